//! The six allocator variants: {page, chunk} x {array, virtual array,
//! virtual list} queue storage.
//!
//! Payload chunks occupy `[0, P)` of the arena. Virtual flavors reserve the
//! tail `[P, N)` as queue segment storage, sized so no queue can ever wait
//! on the segment pool for long.

mod chunk;
mod page;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::arena::{Arena, ArenaError, PageHandle, Region};
use crate::backoff::Backoff;
use crate::chunk::ChunkError;
use crate::config::{AllocatorKind, ConfigError, HeapConfig, QueueFlavor, Variant};
use crate::queue::{IndexQueue, SegmentPool};

use self::chunk::ChunkAllocator;
use self::page::PageAllocator;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AllocError {
    #[error("request of {requested} bytes exceeds the largest page ({max} bytes)")]
    TooLarge { requested: usize, max: usize },
    #[error("zero-byte request")]
    ZeroSize,
    #[error("out of memory in the {page_bytes}-byte class")]
    OutOfMemory { page_bytes: usize },
    #[error("invalid handle {0:?}")]
    InvalidHandle(PageHandle),
    #[error("double free of {0:?}")]
    DoubleFree(PageHandle),
}

impl From<ArenaError> for AllocError {
    fn from(e: ArenaError) -> Self {
        match e {
            ArenaError::TooLarge { requested, max } => AllocError::TooLarge { requested, max },
            ArenaError::ZeroSize => AllocError::ZeroSize,
            ArenaError::InvalidHandle(h) => AllocError::InvalidHandle(h),
            ArenaError::Range { .. } => AllocError::InvalidHandle(PageHandle::from_raw(u32::MAX)),
        }
    }
}

fn release_error(e: ChunkError, handle: PageHandle) -> AllocError {
    match e {
        ChunkError::DoubleFree(_) => AllocError::DoubleFree(handle),
        _ => AllocError::InvalidHandle(handle),
    }
}

#[derive(Debug, Default)]
struct ClassCounters {
    live: AtomicU64,
    retries: AtomicU64,
    oom: AtomicU64,
}

/// Per-class snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassStats {
    pub page_bytes: usize,
    pub live: u64,
    /// Entries in the class queue. Page variants: free pages. Chunk
    /// variants: chunk hints, possibly stale.
    pub queue_len: usize,
    /// Pages backed by chunks currently assigned to the class.
    pub provisioned: u64,
    pub chunks: usize,
    pub segments_high_water: usize,
    pub retries: u64,
    pub oom: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocatorStats {
    pub variant: Variant,
    pub classes: Vec<ClassStats>,
    pub payload_chunks: usize,
    /// Free-chunk pool length (chunk variants only).
    pub pool_len: Option<usize>,
    pub segment_chunks: usize,
    pub segments_in_use: usize,
    pub segments_high_water: usize,
    pub queue_ops: u64,
}

impl AllocatorStats {
    pub fn live_pages(&self) -> u64 {
        self.classes.iter().map(|c| c.live).sum()
    }
}

/// Occupancy recomputed from the chunk headers alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Audit {
    pub live: Vec<u64>,
    pub free: Vec<u64>,
    pub chunks: Vec<usize>,
    pub unassigned: usize,
    /// Chunks whose free counter disagrees with their bitmap.
    pub mismatches: usize,
}

impl Audit {
    pub fn live_pages(&self) -> u64 {
        self.live.iter().sum()
    }
}

pub(crate) struct Shared {
    arena: Arc<Arena>,
    segments: Option<Arc<SegmentPool>>,
    backoff: Backoff,
    max_retries: u32,
    counters: Box<[ClassCounters]>,
    payload_chunks: u32,
}

impl Shared {
    fn class_of(&self, bytes: usize) -> Result<usize, AllocError> {
        Ok(self.arena.size_class_of(bytes)?.index)
    }

    fn page_bytes(&self, class: usize) -> usize {
        self.arena.classes()[class].page_bytes
    }

    fn pages_per_chunk(&self, class: usize) -> u32 {
        self.arena.classes()[class].pages_per_chunk
    }

    /// Chunk, page and class of a handle into a payload chunk.
    fn locate(&self, handle: PageHandle) -> Result<(u32, u32, usize), AllocError> {
        let (chunk, page) = self
            .arena
            .decode_handle(handle)
            .map_err(|_| AllocError::InvalidHandle(handle))?;
        if chunk >= self.payload_chunks {
            return Err(AllocError::InvalidHandle(handle));
        }
        let header = self.arena.header(chunk);
        let class = header
            .state()
            .class_index()
            .ok_or(AllocError::InvalidHandle(handle))?;
        if page >= header.pages() {
            return Err(AllocError::InvalidHandle(handle));
        }
        Ok((chunk, page, class))
    }

    fn handle(&self, chunk: u32, page: u32) -> PageHandle {
        self.arena
            .encode_handle(chunk, page)
            .expect("chunk and page come from the arena")
    }

    /// Run `attempt` until it succeeds or the retry budget is spent.
    fn retry<T>(
        &self,
        class: usize,
        mut attempt: impl FnMut() -> Option<T>,
    ) -> Result<T, AllocError> {
        let counters = &self.counters[class];
        for round in 0..=self.max_retries {
            if let Some(v) = attempt() {
                return Ok(v);
            }
            if round < self.max_retries {
                counters.retries.fetch_add(1, Ordering::Relaxed);
                self.backoff.wait(round + 1);
            }
        }
        counters.oom.fetch_add(1, Ordering::Relaxed);
        Err(AllocError::OutOfMemory {
            page_bytes: self.page_bytes(class),
        })
    }

    fn new_queue(&self, capacity: usize) -> Result<IndexQueue, ConfigError> {
        let flavor = self.arena.config().queue_flavor;
        IndexQueue::new(flavor, capacity, self.segments.clone())
    }

    fn audit(&self) -> Audit {
        let classes = self.arena.classes().len();
        let mut audit = Audit {
            live: vec![0; classes],
            free: vec![0; classes],
            chunks: vec![0; classes],
            unassigned: 0,
            mismatches: 0,
        };
        for header in &self.arena.headers()[..self.payload_chunks as usize] {
            let Some(k) = header.state().class_index() else {
                audit.unassigned += 1;
                continue;
            };
            let free = header.count_free_bits();
            if free != header.free_count() {
                audit.mismatches += 1;
            }
            audit.chunks[k] += 1;
            audit.free[k] += free as u64;
            audit.live[k] += (header.pages() - free) as u64;
        }
        audit
    }
}

/// Equal split of `chunks` over `classes`, remainder to the smallest class.
pub(crate) fn partition(chunks: usize, classes: usize) -> Vec<usize> {
    let mut split = vec![chunks / classes; classes];
    split[0] += chunks % classes;
    split
}

/// Chunks to set aside for queue segments.
fn segment_reserve(config: &HeapConfig) -> usize {
    let flavor = config.queue_flavor;
    if !flavor.is_virtual() {
        return 0;
    }
    let slots = (config.chunk_bytes / 8).saturating_sub(3).max(1) as u64;
    let n = config.num_chunks();
    let classes = config.num_classes();
    match config.allocator_kind {
        // Bounded by the partition of the whole heap, which only shrinks
        // once the reserve is carved out.
        AllocatorKind::Page => partition(n, classes)
            .iter()
            .enumerate()
            .map(|(k, &chunks)| {
                let pages = chunks * (config.chunk_bytes / (config.min_page_bytes << k));
                IndexQueue::segment_budget(flavor, pages.max(1), slots)
            })
            .sum(),
        AllocatorKind::Chunk => {
            classes * IndexQueue::segment_budget(flavor, chunk::hint_capacity(n), slots)
        }
    }
}

enum Inner {
    Page(PageAllocator),
    Chunk(ChunkAllocator),
}

/// A lock-free page allocator over a preallocated arena.
pub struct Allocator {
    shared: Shared,
    inner: Inner,
}

impl std::fmt::Debug for Allocator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Allocator")
            .field("variant", &self.variant())
            .field("payload_chunks", &self.shared.payload_chunks)
            .finish()
    }
}

impl Allocator {
    pub fn new(config: HeapConfig) -> Result<Allocator, ConfigError> {
        config.validate()?;
        let reserve = segment_reserve(&config);
        let n = config.num_chunks();
        let classes = config.num_classes();
        let needed = reserve
            + if config.allocator_kind == AllocatorKind::Page {
                classes
            } else {
                1
            };
        if n < needed {
            return Err(ConfigError::HeapTooSmall { chunks: n, needed });
        }
        let payload = (n - reserve) as u32;
        let arena = Arc::new(Arena::new(config.clone())?);
        let segments = if reserve > 0 {
            Some(SegmentPool::new(arena.clone(), payload..n as u32)?)
        } else {
            None
        };
        let shared = Shared {
            arena,
            segments,
            backoff: Backoff::new(config.backoff),
            max_retries: config.max_retries,
            counters: (0..classes).map(|_| ClassCounters::default()).collect(),
            payload_chunks: payload,
        };
        let inner = match config.allocator_kind {
            AllocatorKind::Page => Inner::Page(PageAllocator::new(&shared)?),
            AllocatorKind::Chunk => Inner::Chunk(ChunkAllocator::new(
                &shared,
                config.retained_chunks_per_class as usize,
            )?),
        };
        log::debug!(
            "{} allocator: {payload} payload chunks, {reserve} segment chunks",
            config.variant()
        );
        Ok(Allocator { shared, inner })
    }

    pub fn variant(&self) -> Variant {
        self.config().variant()
    }

    pub fn config(&self) -> &HeapConfig {
        self.shared.arena.config()
    }

    pub fn arena(&self) -> &Arena {
        &self.shared.arena
    }

    pub fn flavor(&self) -> QueueFlavor {
        self.config().queue_flavor
    }

    pub fn payload_chunks(&self) -> usize {
        self.shared.payload_chunks as usize
    }

    /// Most pages of the size class serving `bytes` that can be live at once.
    pub fn capacity_pages(&self, bytes: usize) -> Result<u64, AllocError> {
        let class = self.shared.class_of(bytes)?;
        Ok(match &self.inner {
            Inner::Page(p) => p.provisioned(class),
            Inner::Chunk(_) => {
                self.shared.payload_chunks as u64 * self.shared.pages_per_chunk(class) as u64
            }
        })
    }

    /// What [`capacity_pages`](Self::capacity_pages) would report for an
    /// allocator built from `config`, without building it. Zero for
    /// requests no class can serve.
    pub fn capacity_for(config: &HeapConfig, bytes: usize) -> Result<u64, ConfigError> {
        config.validate()?;
        if bytes == 0 || bytes > config.max_page_bytes {
            return Ok(0);
        }
        let page = bytes.max(config.min_page_bytes).next_power_of_two();
        let class = (page / config.min_page_bytes).trailing_zeros() as usize;
        let per_chunk = (config.chunk_bytes / page) as u64;
        let n = config.num_chunks();
        let payload = n.saturating_sub(segment_reserve(config));
        let chunks = match config.allocator_kind {
            AllocatorKind::Page if payload >= config.num_classes() => {
                partition(payload, config.num_classes())[class]
            }
            AllocatorKind::Chunk if payload >= 1 => payload,
            _ => {
                return Err(ConfigError::HeapTooSmall {
                    chunks: n,
                    needed: n - payload + config.num_classes(),
                })
            }
        };
        Ok(chunks as u64 * per_chunk)
    }

    pub fn alloc(&self, bytes: usize) -> Result<PageHandle, AllocError> {
        let (class, handle) = match &self.inner {
            Inner::Page(p) => {
                let class = self.shared.class_of(bytes)?;
                (class, p.alloc(&self.shared, class)?)
            }
            Inner::Chunk(c) => c.alloc(&self.shared, bytes)?,
        };
        self.shared.counters[class]
            .live
            .fetch_add(1, Ordering::Relaxed);
        Ok(handle)
    }

    /// Allocate `n` pages of one size class, appending them to `out`. Either
    /// all `n` are granted or none are.
    pub fn alloc_many(
        &self,
        bytes: usize,
        n: usize,
        out: &mut Vec<PageHandle>,
    ) -> Result<(), AllocError> {
        let class = match &self.inner {
            Inner::Page(p) => {
                let class = self.shared.class_of(bytes)?;
                if n > 0 {
                    p.alloc_many(&self.shared, class, n, out)?;
                }
                class
            }
            Inner::Chunk(c) => c.alloc_many(&self.shared, bytes, n, out)?,
        };
        self.shared.counters[class]
            .live
            .fetch_add(n as u64, Ordering::Relaxed);
        Ok(())
    }

    pub fn dealloc(&self, handle: PageHandle) -> Result<(), AllocError> {
        let class = match &self.inner {
            Inner::Page(p) => p.dealloc(&self.shared, handle),
            Inner::Chunk(c) => c.dealloc(&self.shared, handle),
        }?;
        self.shared.counters[class]
            .live
            .fetch_sub(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn page_region(&self, handle: PageHandle) -> Result<Region, AllocError> {
        self.shared.locate(handle)?;
        Ok(self.shared.arena.page_region(handle)?)
    }

    /// Mutable view of a live page.
    ///
    /// # Safety
    ///
    /// `handle` must be a live grant of this allocator owned by the caller,
    /// with no other reference to its bytes alive for the returned lifetime.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn page_bytes_mut(&self, handle: PageHandle) -> Result<&mut [u8], AllocError> {
        self.shared.locate(handle)?;
        Ok(self.shared.arena.page_bytes_mut(handle)?)
    }

    /// Shared view of a live page.
    ///
    /// # Safety
    ///
    /// `handle` must be a live grant of this allocator and nobody may write
    /// the page while the returned slice is alive.
    pub unsafe fn page_bytes(&self, handle: PageHandle) -> Result<&[u8], AllocError> {
        self.shared.locate(handle)?;
        Ok(self.shared.arena.page_bytes(handle)?)
    }

    /// Total operations on the class queues and the chunk pool.
    pub fn queue_ops(&self) -> u64 {
        match &self.inner {
            Inner::Page(p) => p.queue_ops(),
            Inner::Chunk(c) => c.queue_ops(),
        }
    }

    pub fn stats(&self) -> AllocatorStats {
        let shared = &self.shared;
        let classes = (0..shared.counters.len())
            .map(|k| {
                let counters = &shared.counters[k];
                let (queue, chunks, provisioned) = match &self.inner {
                    Inner::Page(p) => (p.queue(k), p.chunks(k), p.provisioned(k)),
                    Inner::Chunk(c) => {
                        let chunks = c.assigned(k);
                        (
                            c.queue(k),
                            chunks,
                            chunks as u64 * shared.pages_per_chunk(k) as u64,
                        )
                    }
                };
                ClassStats {
                    page_bytes: shared.page_bytes(k),
                    live: counters.live.load(Ordering::Relaxed),
                    queue_len: queue.len(),
                    provisioned,
                    chunks,
                    segments_high_water: queue.segments_high_water(),
                    retries: counters.retries.load(Ordering::Relaxed),
                    oom: counters.oom.load(Ordering::Relaxed),
                }
            })
            .collect();
        let segments = shared.segments.as_deref();
        AllocatorStats {
            variant: self.variant(),
            classes,
            payload_chunks: shared.payload_chunks as usize,
            pool_len: match &self.inner {
                Inner::Page(_) => None,
                Inner::Chunk(c) => Some(c.pool_len()),
            },
            segment_chunks: segments.map_or(0, |s| s.capacity()),
            segments_in_use: segments.map_or(0, |s| s.in_use()),
            segments_high_water: segments.map_or(0, |s| s.high_water()),
            queue_ops: self.queue_ops(),
        }
    }

    /// Recount occupancy from the chunk headers. Exact at quiescence.
    pub fn audit(&self) -> Audit {
        self.shared.audit()
    }
}
