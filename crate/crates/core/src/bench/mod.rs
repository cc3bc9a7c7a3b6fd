//! Benchmark driver: every iteration allocates all slots in parallel
//! (timed), writes a per-slot pattern, verifies every byte, then frees all
//! slots in parallel (timed).

mod pattern;
mod sweep;

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Barrier, Mutex};
use std::thread;
use std::time::Instant;

use thiserror::Error;

pub use pattern::{pattern_byte, verify_pattern, write_pattern};
pub use sweep::{
    emit_csv, parse_csv, run_sweep, Axis, CsvRecord, SweepPoint, SweepTable, COUNT_POINTS,
    SIZE_POINTS,
};

use crate::alloc::{AllocError, Allocator};
use crate::arena::PageHandle;
use crate::config::{ConfigError, HeapConfig, Variant};

pub const DEFAULT_ITERATIONS: usize = 10;
pub const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("iterations must be at least 2, got {0}")]
    Iterations(usize),
    #[error("at least one allocation is required")]
    NoAllocations,
    #[error("thread count must be at least 1")]
    NoThreads,
    #[error("sweep needs at least one point")]
    NoPoints,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialConfig {
    pub variant: Variant,
    pub num_allocations: usize,
    pub allocation_bytes: usize,
    pub iterations: usize,
    /// Worker threads; `None` means `num_allocations` capped at the
    /// available parallelism.
    pub threads: Option<usize>,
    pub seed: u64,
}

impl TrialConfig {
    pub fn new(variant: Variant, num_allocations: usize, allocation_bytes: usize) -> Self {
        TrialConfig {
            variant,
            num_allocations,
            allocation_bytes,
            iterations: DEFAULT_ITERATIONS,
            threads: None,
            seed: DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.iterations < 2 {
            return Err(BenchError::Iterations(self.iterations));
        }
        if self.num_allocations == 0 {
            return Err(BenchError::NoAllocations);
        }
        if self.threads == Some(0) {
            return Err(BenchError::NoThreads);
        }
        Ok(())
    }

    pub fn worker_threads(&self) -> usize {
        self.threads.unwrap_or_else(|| {
            let cores = thread::available_parallelism().map_or(1, |n| n.get());
            self.num_allocations.min(cores)
        })
    }
}

/// Smallest power-of-two heap, at least `floor`, whose allocator of
/// `base`'s variant holds `headroom` times the trial's demand.
pub fn fitted_heap_bytes(
    base: &HeapConfig,
    cfg: &TrialConfig,
    headroom: u64,
    floor: usize,
) -> usize {
    let need = cfg.num_allocations as u64 * headroom;
    let mut heap = floor.max(base.chunk_bytes).next_power_of_two();
    let limit = base.chunk_bytes.saturating_mul(crate::config::MAX_CHUNKS);
    while heap < limit {
        let candidate = base.clone().with_variant(cfg.variant).with_heap_bytes(heap);
        if let Ok(capacity) = Allocator::capacity_for(&candidate, cfg.allocation_bytes) {
            if capacity >= need {
                break;
            }
        }
        heap *= 2;
    }
    heap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Pass,
    OutOfMemory {
        iteration: usize,
        slot: usize,
        error: AllocError,
    },
    VerificationFailed {
        iteration: usize,
        slot: usize,
        offset: usize,
    },
}

impl TrialStatus {
    pub fn passed(&self) -> bool {
        matches!(self, TrialStatus::Pass)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub variant: Variant,
    pub num_allocations: usize,
    pub allocation_bytes: usize,
    /// Per completed iteration, milliseconds.
    pub alloc_ms: Vec<f64>,
    pub free_ms: Vec<f64>,
    pub status: TrialStatus,
}

impl TrialResult {
    pub fn passed(&self) -> bool {
        self.status.passed()
    }

    pub fn alloc_mean_all(&self) -> Option<f64> {
        mean_all(&self.alloc_ms)
    }

    pub fn alloc_mean_subsequent(&self) -> Option<f64> {
        mean_subsequent(&self.alloc_ms)
    }

    pub fn free_mean_all(&self) -> Option<f64> {
        mean_all(&self.free_ms)
    }

    pub fn free_mean_subsequent(&self) -> Option<f64> {
        mean_subsequent(&self.free_ms)
    }
}

/// Mean over all iterations.
pub fn mean_all(samples: &[f64]) -> Option<f64> {
    (!samples.is_empty()).then(|| samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean over all but the first iteration.
pub fn mean_subsequent(samples: &[f64]) -> Option<f64> {
    samples.get(1..).and_then(mean_all)
}

const EMPTY: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
enum Failure {
    Oom(usize, AllocError),
    Corrupt(usize, usize),
}

/// Shared state of one trial's worker pool.
struct Work<'a> {
    allocator: &'a Allocator,
    cfg: &'a TrialConfig,
    slots: Vec<AtomicU32>,
    cursors: [AtomicUsize; 4],
    running: AtomicBool,
    iteration: AtomicUsize,
    failed: AtomicBool,
    failure: Mutex<Option<Failure>>,
    barrier: Barrier,
    epoch: Instant,
    /// Earliest start and latest finish of the timed phase, in
    /// nanoseconds since `epoch`.
    span: [AtomicU64; 2],
}

const ALLOC: usize = 0;
const WRITE: usize = 1;
const VERIFY: usize = 2;
const FREE: usize = 3;

impl Work<'_> {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    /// Run a timed phase on this worker, widening the shared span.
    fn timed(&self, phase: impl FnOnce()) {
        self.span[0].fetch_min(self.now(), Ordering::AcqRel);
        phase();
        self.span[1].fetch_max(self.now(), Ordering::AcqRel);
    }

    /// Wall-clock of the last timed phase in milliseconds; resets the span.
    fn take_span_ms(&self) -> f64 {
        let start = self.span[0].swap(u64::MAX, Ordering::AcqRel);
        let end = self.span[1].swap(0, Ordering::AcqRel);
        end.saturating_sub(start) as f64 / 1e6
    }

    fn record(&self, failure: Failure) {
        self.failed.store(true, Ordering::Release);
        let mut slot = self.failure.lock().unwrap_or_else(|e| e.into_inner());
        slot.get_or_insert(failure);
    }

    /// Hand out slots of `phase` until none are left.
    fn each_slot(&self, phase: usize, mut f: impl FnMut(usize)) {
        loop {
            let slot = self.cursors[phase].fetch_add(1, Ordering::Relaxed);
            if slot >= self.slots.len() {
                return;
            }
            f(slot);
        }
    }

    fn handle(&self, slot: usize) -> Option<PageHandle> {
        let raw = self.slots[slot].load(Ordering::Acquire);
        (raw != EMPTY).then(|| PageHandle::from_raw(raw))
    }

    fn alloc_phase(&self) {
        self.each_slot(ALLOC, |slot| {
            if self.failed.load(Ordering::Acquire) {
                return;
            }
            match self.allocator.alloc(self.cfg.allocation_bytes) {
                Ok(h) => self.slots[slot].store(h.raw(), Ordering::Release),
                Err(e) => self.record(Failure::Oom(slot, e)),
            }
        });
    }

    fn write_phase(&self, iteration: u32) {
        self.each_slot(WRITE, |slot| {
            if let Some(h) = self.handle(slot) {
                // SAFETY: this worker is the only one holding `slot` in this
                // phase and `h` is a live grant.
                let page = unsafe { self.allocator.page_bytes_mut(h) }.expect("live handle");
                write_pattern(
                    &mut page[..self.cfg.allocation_bytes],
                    self.cfg.seed,
                    slot as u32,
                    iteration,
                );
            }
        });
    }

    fn verify_phase(&self, iteration: u32) {
        self.each_slot(VERIFY, |slot| {
            if let Some(h) = self.handle(slot) {
                // SAFETY: nobody writes during the verify phase.
                let page = unsafe { self.allocator.page_bytes(h) }.expect("live handle");
                if let Err(offset) = verify_pattern(
                    &page[..self.cfg.allocation_bytes],
                    self.cfg.seed,
                    slot as u32,
                    iteration,
                ) {
                    self.record(Failure::Corrupt(slot, offset));
                }
            }
        });
    }

    fn free_phase(&self) {
        self.each_slot(FREE, |slot| {
            let raw = self.slots[slot].swap(EMPTY, Ordering::AcqRel);
            if raw != EMPTY {
                self.allocator
                    .dealloc(PageHandle::from_raw(raw))
                    .expect("freeing a live handle");
            }
        });
    }

    fn worker(&self) {
        loop {
            self.barrier.wait();
            if !self.running.load(Ordering::Acquire) {
                return;
            }
            let iteration = self.iteration.load(Ordering::Acquire) as u32;
            self.timed(|| self.alloc_phase());
            self.barrier.wait();
            self.write_phase(iteration);
            self.barrier.wait();
            self.verify_phase(iteration);
            self.barrier.wait();
            self.timed(|| self.free_phase());
            self.barrier.wait();
        }
    }
}

/// Run a trial against an existing allocator. Failures are reported in the
/// result; every granted page is freed before returning, so the allocator
/// stays usable.
pub fn run_trial(allocator: &Allocator, cfg: &TrialConfig) -> Result<TrialResult, BenchError> {
    cfg.validate()?;
    let threads = cfg.worker_threads();
    let work = Work {
        allocator,
        cfg,
        slots: (0..cfg.num_allocations)
            .map(|_| AtomicU32::new(EMPTY))
            .collect(),
        cursors: Default::default(),
        running: AtomicBool::new(true),
        iteration: AtomicUsize::new(0),
        failed: AtomicBool::new(false),
        failure: Mutex::new(None),
        barrier: Barrier::new(threads + 1),
        epoch: Instant::now(),
        span: [AtomicU64::new(u64::MAX), AtomicU64::new(0)],
    };
    let mut result = TrialResult {
        variant: allocator.variant(),
        num_allocations: cfg.num_allocations,
        allocation_bytes: cfg.allocation_bytes,
        alloc_ms: Vec::with_capacity(cfg.iterations),
        free_ms: Vec::with_capacity(cfg.iterations),
        status: TrialStatus::Pass,
    };
    thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| work.worker());
        }
        for iteration in 0..cfg.iterations {
            work.iteration.store(iteration, Ordering::Release);
            for c in &work.cursors {
                c.store(0, Ordering::Relaxed);
            }
            // Phases: allocate, write, verify, free.
            work.barrier.wait();
            work.barrier.wait();
            let alloc_ms = work.take_span_ms();
            work.barrier.wait();
            work.barrier.wait();
            work.barrier.wait();
            let free_ms = work.take_span_ms();

            let failure = *work.failure.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(f) = failure {
                result.status = match f {
                    Failure::Oom(slot, error) => TrialStatus::OutOfMemory {
                        iteration,
                        slot,
                        error,
                    },
                    Failure::Corrupt(slot, offset) => TrialStatus::VerificationFailed {
                        iteration,
                        slot,
                        offset,
                    },
                };
                log::warn!("{} trial failed: {:?}", cfg.variant, result.status);
                break;
            }
            result.alloc_ms.push(alloc_ms);
            result.free_ms.push(free_ms);
        }
        work.running.store(false, Ordering::Release);
        work.barrier.wait();
    });
    Ok(result)
}

/// Build an allocator for `heap` and run one trial on it.
pub fn run_trial_fresh(heap: &HeapConfig, cfg: &TrialConfig) -> Result<TrialResult, BenchError> {
    cfg.validate()?;
    let allocator = Allocator::new(heap.clone().with_variant(cfg.variant))?;
    run_trial(&allocator, cfg)
}
