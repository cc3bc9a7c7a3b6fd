//! Parameter sweeps and their CSV form.

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{mean_all, mean_subsequent, run_trial_fresh, BenchError, TrialConfig, TrialResult};
use crate::config::HeapConfig;

/// Allocation sizes of the default by-size sweep (1024 allocations).
pub const SIZE_POINTS: [usize; 8] = [1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000];
/// Allocation counts of the default by-count sweep (1000 bytes each).
pub const COUNT_POINTS: [usize; 9] = [1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000, 9000];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Vary the allocation size; the count stays fixed.
    #[serde(rename = "size")]
    BySize,
    /// Vary the number of allocations; the size stays fixed.
    #[serde(rename = "count")]
    ByCount,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::BySize => "size",
            Axis::ByCount => "count",
        }
    }

    pub fn default_points(self) -> &'static [usize] {
        match self {
            Axis::BySize => &SIZE_POINTS,
            Axis::ByCount => &COUNT_POINTS,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "size" => Ok(Axis::BySize),
            "count" => Ok(Axis::ByCount),
            other => Err(format!("unknown axis {other:?} (expected size or count)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub axis: Axis,
    pub point: usize,
    pub result: TrialResult,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepPoint>,
}

impl SweepTable {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.result.passed())
    }

    /// The CSV rows of this table: one per completed iteration of a passing
    /// trial, then one summary row per trial. Failed trials get only the
    /// summary row, with empty timings.
    pub fn records(&self) -> Vec<CsvRecord> {
        let mut out = Vec::new();
        for row in &self.rows {
            let r = &row.result;
            let verified = r.passed();
            let (all, subsequent) = if verified {
                (mean_all(&r.alloc_ms), mean_subsequent(&r.alloc_ms))
            } else {
                (None, None)
            };
            let record = |iteration: String, alloc_ms, free_ms| CsvRecord {
                variant: r.variant.name().to_string(),
                axis: row.axis,
                point: row.point,
                iteration,
                alloc_ms,
                free_ms,
                mean_all_ms: all,
                mean_subsequent_ms: subsequent,
                verified,
            };
            if verified {
                for (i, (a, f)) in r.alloc_ms.iter().zip(&r.free_ms).enumerate() {
                    out.push(record((i + 1).to_string(), Some(*a), Some(*f)));
                }
            }
            let (alloc_summary, free_summary) = if verified {
                (subsequent, mean_subsequent(&r.free_ms))
            } else {
                (None, None)
            };
            out.push(record(SUMMARY.to_string(), alloc_summary, free_summary));
        }
        out
    }
}

/// `iteration` value of summary rows, whose `alloc_ms` and `free_ms` hold
/// the means over all but the first iteration.
pub const SUMMARY: &str = "summary";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub variant: String,
    pub axis: Axis,
    pub point: usize,
    pub iteration: String,
    pub alloc_ms: Option<f64>,
    pub free_ms: Option<f64>,
    pub mean_all_ms: Option<f64>,
    pub mean_subsequent_ms: Option<f64>,
    pub verified: bool,
}

/// Run one trial per point. `base` supplies everything but the swept
/// quantity; each point gets a fresh allocator built from `heap`, where
/// `heap_for` may enlarge it per point.
pub fn run_sweep(
    axis: Axis,
    base: &TrialConfig,
    points: &[usize],
    heap: &HeapConfig,
    heap_for: impl Fn(&TrialConfig) -> HeapConfig,
) -> Result<SweepTable, BenchError> {
    if points.is_empty() {
        return Err(BenchError::NoPoints);
    }
    base.validate()?;
    let mut table = SweepTable::default();
    for &point in points {
        let mut cfg = base.clone();
        match axis {
            Axis::BySize => cfg.allocation_bytes = point,
            Axis::ByCount => cfg.num_allocations = point,
        }
        let heap_cfg = heap_for(&cfg);
        let result = match run_trial_fresh(&heap_cfg, &cfg) {
            Ok(r) => r,
            Err(BenchError::Config(e)) => {
                log::warn!("{axis} point {point}: {e}; using the base heap");
                run_trial_fresh(heap, &cfg)?
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "{} {axis}={point}: {:?}, mean subsequent alloc {:?} ms",
            cfg.variant,
            result.status,
            result.alloc_mean_subsequent()
        );
        table.rows.push(SweepPoint {
            axis,
            point,
            result,
        });
    }
    Ok(table)
}

pub fn emit_csv(table: &SweepTable, out: impl io::Write) -> csv::Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    writer.write_record([
        "variant",
        "axis",
        "point",
        "iteration",
        "alloc_ms",
        "free_ms",
        "mean_all_ms",
        "mean_subsequent_ms",
        "verified",
    ])?;
    for record in table.records() {
        writer.serialize(record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn parse_csv(input: impl io::Read) -> csv::Result<Vec<CsvRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
