//! Invariant checks run against every variant, for the `selftest` command.

use std::collections::HashSet;
use std::fmt;
use std::sync::Mutex;
use std::thread;

use crate::alloc::{AllocError, Allocator};
use crate::arena::PageHandle;
use crate::bench::{run_trial, TrialConfig};
use crate::config::{AllocatorKind, HeapConfig, Variant};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckOutcome {
    pub variant: Variant,
    pub check: &'static str,
    pub result: Result<(), String>,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.result {
            Ok(()) => write!(f, "ok    {:9} {}", self.variant.name(), self.check),
            Err(e) => write!(f, "FAIL  {:9} {}: {e}", self.variant.name(), self.check),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelfTestReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.result.is_ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| o.result.is_err())
    }
}

type Check = fn(&HeapConfig) -> Result<(), String>;

const CHECKS: [(&str, Check); 6] = [
    ("disjoint grants in every class", disjoint_grants),
    ("invalid and double frees rejected", bad_frees),
    ("class exhaustion reports out-of-memory", exhaustion),
    ("full drain restores the initial state", drain_restores),
    ("concurrent churn never double-grants", churn),
    ("benchmark trial verifies", trial),
];

/// Run every check on every variant, each on a fresh allocator built from
/// `base` with the variant swapped in.
pub fn run(base: &HeapConfig) -> SelfTestReport {
    let mut report = SelfTestReport::default();
    for variant in Variant::ALL {
        let heap = base.clone().with_variant(variant);
        for (check, f) in CHECKS {
            let result = f(&heap);
            let outcome = CheckOutcome {
                variant,
                check,
                result,
            };
            log::info!("{outcome}");
            report.outcomes.push(outcome);
        }
    }
    report
}

fn build(heap: &HeapConfig) -> Result<Allocator, String> {
    Allocator::new(heap.clone()).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn class_sizes(a: &Allocator) -> Vec<usize> {
    a.arena().classes().iter().map(|c| c.page_bytes).collect()
}

fn disjoint_grants(heap: &HeapConfig) -> Result<(), String> {
    let a = build(heap)?;
    let mut live = Vec::new();
    let mut spans = Vec::new();
    for bytes in class_sizes(&a) {
        for _ in 0..8 {
            let h = a.alloc(bytes).map_err(|e| e.to_string())?;
            let r = a.page_region(h).map_err(|e| e.to_string())?;
            ensure(r.len >= bytes, || {
                format!("{bytes}-byte request got {} bytes", r.len)
            })?;
            spans.push((r.offset, r.offset + r.len));
            live.push(h);
        }
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        ensure(w[0].1 <= w[1].0, || {
            format!("regions {:?} and {:?} overlap", w[0], w[1])
        })?;
    }
    for h in live {
        a.dealloc(h).map_err(|e| e.to_string())?;
    }
    ensure(a.audit().live_pages() == 0, || {
        "pages still live after freeing all".into()
    })
}

fn bad_frees(heap: &HeapConfig) -> Result<(), String> {
    let a = build(heap)?;
    let h = a.alloc(100).map_err(|e| e.to_string())?;
    a.dealloc(h).map_err(|e| e.to_string())?;
    match a.dealloc(h) {
        Err(AllocError::DoubleFree(_) | AllocError::InvalidHandle(_)) => {}
        other => return Err(format!("second free returned {other:?}")),
    }
    match a.dealloc(PageHandle::from_raw(u32::MAX)) {
        Err(AllocError::InvalidHandle(_)) => {}
        other => return Err(format!("free of a bogus handle returned {other:?}")),
    }
    ensure(a.alloc(0) == Err(AllocError::ZeroSize), || {
        "zero-byte request accepted".into()
    })?;
    ensure(
        matches!(
            a.alloc(heap.max_page_bytes + 1),
            Err(AllocError::TooLarge { .. })
        ),
        || "oversized request accepted".into(),
    )
}

/// Fill the largest class to capacity, expect out-of-memory, free it all.
fn exhaustion(heap: &HeapConfig) -> Result<(), String> {
    let mut heap = heap.clone();
    heap.max_retries = heap.max_retries.min(4);
    let a = build(&heap)?;
    let bytes = heap.max_page_bytes;
    let capacity = a.capacity_pages(bytes).map_err(|e| e.to_string())?;
    let mut live = Vec::new();
    for _ in 0..capacity {
        live.push(
            a.alloc(bytes)
                .map_err(|e| format!("below capacity {capacity}: {e}"))?,
        );
    }
    let extra = a.alloc(bytes);
    ensure(matches!(extra, Err(AllocError::OutOfMemory { .. })), || {
        format!("allocation past capacity {capacity} returned {extra:?}")
    })?;
    for h in live {
        a.dealloc(h).map_err(|e| e.to_string())?;
    }
    let audit = a.audit();
    ensure(audit.live_pages() == 0 && audit.mismatches == 0, || {
        format!("{audit:?}")
    })?;
    a.alloc(bytes)
        .map(|_| ())
        .map_err(|e| format!("after refilling: {e}"))
}

fn drain_restores(heap: &HeapConfig) -> Result<(), String> {
    let a = build(heap)?;
    let before = a.stats();
    let mut live = Vec::new();
    for (k, bytes) in class_sizes(&a).into_iter().enumerate() {
        let capacity = a.capacity_pages(bytes).map_err(|e| e.to_string())? as usize;
        for i in 0..(64 + k * 7).min(capacity / 2) {
            live.push(a.alloc(bytes - i % 2).map_err(|e| e.to_string())?);
        }
    }
    for h in live.into_iter().rev() {
        a.dealloc(h).map_err(|e| e.to_string())?;
    }
    let after = a.stats();
    ensure(after.live_pages() == 0, || {
        format!("{} pages live", after.live_pages())
    })?;
    match a.variant().kind() {
        AllocatorKind::Page => {
            for (b, c) in before.classes.iter().zip(&after.classes) {
                ensure(b.queue_len == c.queue_len, || {
                    format!(
                        "{}-byte queue holds {} entries, was {}",
                        b.page_bytes, c.queue_len, b.queue_len
                    )
                })?;
            }
        }
        AllocatorKind::Chunk => {
            let retained = heap.retained_chunks_per_class as usize * after.classes.len();
            let pool = after.pool_len.unwrap_or(0);
            ensure(pool + retained >= after.payload_chunks, || {
                format!("pool holds {pool} of {} chunks", after.payload_chunks)
            })?;
        }
    }
    Ok(())
}

/// Threads allocate and free in a loop while a shared set tracks which
/// handles are live; a handle granted twice at once is a failure.
fn churn(heap: &HeapConfig) -> Result<(), String> {
    let a = build(heap)?;
    let live = Mutex::new(HashSet::new());
    let faults = Mutex::new(Vec::new());
    let sizes = class_sizes(&a);
    thread::scope(|s| {
        for t in 0..4usize {
            let (a, live, faults, sizes) = (&a, &live, &faults, &sizes);
            s.spawn(move || {
                let mut mine = Vec::new();
                for i in 0..2000usize {
                    let bytes = sizes[(t * 3 + i) % sizes.len()];
                    if i % 3 == 2 {
                        if let Some(h) = mine.pop() {
                            live.lock().unwrap().remove(&h);
                            if let Err(e) = a.dealloc(h) {
                                faults.lock().unwrap().push(format!("free: {e}"));
                            }
                        }
                    } else {
                        match a.alloc(bytes) {
                            Ok(h) => {
                                if !live.lock().unwrap().insert(h) {
                                    faults.lock().unwrap().push(format!("{h:?} granted twice"));
                                }
                                mine.push(h);
                            }
                            Err(AllocError::OutOfMemory { .. }) => {}
                            Err(e) => faults.lock().unwrap().push(format!("alloc: {e}")),
                        }
                    }
                }
                for h in mine {
                    live.lock().unwrap().remove(&h);
                    if let Err(e) = a.dealloc(h) {
                        faults.lock().unwrap().push(format!("drain: {e}"));
                    }
                }
            });
        }
    });
    let faults = faults.into_inner().unwrap();
    ensure(faults.is_empty(), || faults.join("; "))?;
    let audit = a.audit();
    ensure(audit.live_pages() == 0 && audit.mismatches == 0, || {
        format!("{audit:?}")
    })
}

fn trial(heap: &HeapConfig) -> Result<(), String> {
    let a = build(heap)?;
    let mut cfg = TrialConfig::new(heap.variant(), 256, 1000);
    cfg.iterations = 3;
    let r = run_trial(&a, &cfg).map_err(|e| e.to_string())?;
    ensure(r.passed(), || format!("{:?}", r.status))?;
    ensure(a.audit().live_pages() == 0, || "trial leaked pages".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_variant_passes() {
        let base = HeapConfig::default().with_heap_bytes(8 << 20);
        let report = run(&base);
        assert_eq!(report.outcomes.len(), 6 * CHECKS.len());
        let failures: Vec<_> = report.failures().map(|o| o.to_string()).collect();
        assert!(failures.is_empty(), "{failures:#?}");
    }

    #[test]
    fn outcome_lines() {
        let ok = CheckOutcome {
            variant: Variant::VaChunk,
            check: "x",
            result: Ok(()),
        };
        assert_eq!(ok.to_string(), "ok    va-chunk  x");
        let bad = CheckOutcome {
            result: Err("boom".into()),
            ..ok
        };
        assert_eq!(bad.to_string(), "FAIL  va-chunk  x: boom");
        assert!(!SelfTestReport {
            outcomes: vec![bad]
        }
        .passed());
    }
}
