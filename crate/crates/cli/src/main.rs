use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::RangedU64ValueParser;
use clap::{Args, Parser, Subcommand};
use ouro::alloc::Allocator;
use ouro::bench::{self, emit_csv, Axis, SweepPoint, SweepTable, TrialConfig};
use ouro::config::{BackoffMode, HeapConfig, Variant};
use ouro::selftest;

/// Auto-fitted heaps never grow past this.
const FIT_CAP: usize = 1 << 30;

#[derive(Parser, Debug)]
#[command(
    name = "ouro",
    version,
    about = "Lock-free page and chunk allocators over a preallocated arena"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one trial and print its CSV rows.
    Trial {
        #[command(flatten)]
        heap: HeapArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Print allocator statistics to stderr after the trial.
        #[arg(long)]
        stats: bool,
    },
    /// Run one trial per point along an axis.
    Sweep {
        #[command(flatten)]
        heap: HeapArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Quantity to vary: `size` (bytes per allocation) or `count`.
        #[arg(long, default_value = "size")]
        axis: Axis,
        /// Comma-separated points; defaults to the axis' standard grid.
        #[arg(long, value_delimiter = ',')]
        points: Vec<usize>,
    },
    /// Run the invariant checks on all six variants.
    Selftest {
        #[command(flatten)]
        heap: HeapArgs,
    },
}

#[derive(Args, Debug)]
struct HeapArgs {
    #[arg(long, default_value = "page")]
    variant: Variant,
    /// Arena size. Without it, trials get the smallest power-of-two heap of
    /// at least 64 MiB that holds twice their demand.
    #[arg(long)]
    heap_bytes: Option<usize>,
    #[arg(long, default_value_t = 64 << 10)]
    chunk_bytes: usize,
    /// `fence` (fence and yield) or `sleep` (capped exponential sleep).
    #[arg(long, default_value = "fence")]
    backoff: BackoffMode,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value_t = 1024)]
    allocations: usize,
    #[arg(long, default_value_t = 1000)]
    size_bytes: usize,
    /// At least 2: the first iteration is excluded from the reported mean.
    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS, value_parser = RangedU64ValueParser::<usize>::new().range(2..))]
    iterations: usize,
    /// Worker threads; defaults to the allocation count capped at the
    /// available parallelism.
    #[arg(long, env = "OURO_THREADS", value_parser = RangedU64ValueParser::<usize>::new().range(1..))]
    threads: Option<usize>,
    #[arg(long, default_value_t = bench::DEFAULT_SEED)]
    seed: u64,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl HeapArgs {
    fn base(&self) -> HeapConfig {
        let mut heap = HeapConfig::for_variant(self.variant).with_chunk_bytes(self.chunk_bytes);
        heap.backoff = self.backoff;
        if let Some(bytes) = self.heap_bytes {
            heap = heap.with_heap_bytes(bytes);
        }
        heap
    }

    /// Heap for one trial: as given, or fitted to the trial's demand.
    fn heap_for(&self, cfg: &TrialConfig) -> HeapConfig {
        let base = self.base();
        if self.heap_bytes.is_some() {
            return base;
        }
        let fitted = bench::fitted_heap_bytes(&base, cfg, 2, base.heap_bytes);
        if fitted > FIT_CAP {
            log::warn!("trial needs more than {FIT_CAP} bytes of heap; capping");
        }
        base.with_heap_bytes(fitted.min(FIT_CAP))
    }
}

impl RunArgs {
    fn trial(&self, variant: Variant) -> TrialConfig {
        let mut cfg = TrialConfig::new(variant, self.allocations, self.size_bytes);
        cfg.iterations = self.iterations;
        cfg.threads = self.threads;
        cfg.seed = self.seed;
        cfg
    }

    fn writer(&self) -> io::Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => Box::new(BufWriter::new(File::create(path)?)),
            None => Box::new(io::stdout().lock()),
        })
    }
}

/// Exit 1: a trial or check failed. Exit 2: bad arguments or configuration.
enum Failure {
    Trials,
    Usage(String),
}

fn write_table(run: &RunArgs, table: &SweepTable) -> Result<(), Failure> {
    let out = run
        .writer()
        .map_err(|e| Failure::Usage(format!("cannot open output: {e}")))?;
    emit_csv(table, out).map_err(|e| Failure::Usage(format!("writing CSV: {e}")))
}

fn trial(heap: &HeapArgs, run: &RunArgs, stats: bool) -> Result<(), Failure> {
    let cfg = run.trial(heap.variant);
    let heap_cfg = heap.heap_for(&cfg);
    log::info!("{} heap of {} bytes", heap.variant, heap_cfg.heap_bytes);
    let allocator = Allocator::new(heap_cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    let result = bench::run_trial(&allocator, &cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    if stats {
        eprintln!("{:#?}", allocator.stats());
    }
    let passed = result.passed();
    let table = SweepTable {
        rows: vec![SweepPoint {
            axis: Axis::BySize,
            point: run.size_bytes,
            result,
        }],
    };
    write_table(run, &table)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::Trials)
    }
}

fn sweep(heap: &HeapArgs, run: &RunArgs, axis: Axis, points: &[usize]) -> Result<(), Failure> {
    let points = if points.is_empty() {
        axis.default_points()
    } else {
        points
    };
    let table = bench::run_sweep(
        axis,
        &run.trial(heap.variant),
        points,
        &heap.base(),
        |cfg| heap.heap_for(cfg),
    )
    .map_err(|e| Failure::Usage(e.to_string()))?;
    write_table(run, &table)?;
    if table.all_passed() {
        Ok(())
    } else {
        Err(Failure::Trials)
    }
}

fn run_selftest(heap: &HeapArgs) -> Result<(), Failure> {
    let base = heap.base();
    base.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = selftest::run(&base);
    for outcome in &report.outcomes {
        println!("{outcome}");
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Trials)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Trial { heap, run, stats } => trial(heap, run, *stats),
        Command::Sweep {
            heap,
            run,
            axis,
            points,
        } => sweep(heap, run, *axis, points),
        Command::Selftest { heap } => run_selftest(heap),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Trials) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
