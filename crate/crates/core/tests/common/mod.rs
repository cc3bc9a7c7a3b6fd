//! Test support shared by the integration suites: a reference model of the
//! allocators and a few statistics helpers.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use ouro::alloc::{AllocError, Allocator};
use ouro::arena::{PageHandle, Region};
use ouro::config::{AllocatorKind, HeapConfig};

/// What the model expects from an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Grant { page_bytes: usize },
    OutOfMemory,
    ZeroSize,
    TooLarge,
    Freed,
    DoubleFree,
    InvalidHandle,
}

#[derive(Debug, Clone, Copy)]
struct Grant {
    chunk: usize,
    page: usize,
    class: usize,
    offset: usize,
}

#[derive(Debug, Clone, Copy)]
struct ChunkModel {
    class: usize,
    live: usize,
}

/// Free-list model of a single-threaded allocator.
///
/// Page kind: every class owns a fixed share of the chunks (an equal split,
/// remainder to the smallest class) and grants succeed while the class has
/// free pages. Chunk kind: chunks move between a shared pool and the
/// classes; a grant succeeds if a chunk of the class has a free page or the
/// pool is not empty, and a chunk that becomes fully free returns to the
/// pool unless the class is down to its retained chunks.
#[derive(Debug)]
pub struct Model {
    kind: AllocatorKind,
    chunk_bytes: usize,
    page_sizes: Vec<usize>,
    max_page: usize,
    payload_bytes: usize,
    retained: usize,
    capacity: Vec<usize>,
    live_per_class: Vec<usize>,
    chunks: Vec<Option<ChunkModel>>,
    assigned: Vec<usize>,
    pool: usize,
    live: HashMap<u32, Grant>,
    /// Every handle ever granted, with the chunk and page it named.
    seen: HashMap<u32, (usize, usize)>,
    /// Live byte ranges, start to end.
    ranges: BTreeMap<usize, usize>,
}

impl Model {
    pub fn new(heap: &HeapConfig, payload_chunks: usize) -> Model {
        let mut page_sizes = Vec::new();
        let mut p = heap.min_page_bytes;
        while p <= heap.max_page_bytes {
            page_sizes.push(p);
            p *= 2;
        }
        let classes = page_sizes.len();
        let mut share = vec![payload_chunks / classes; classes];
        share[0] += payload_chunks % classes;
        let capacity = share
            .iter()
            .zip(&page_sizes)
            .map(|(chunks, page)| chunks * (heap.chunk_bytes / page))
            .collect();
        Model {
            kind: heap.allocator_kind,
            chunk_bytes: heap.chunk_bytes,
            max_page: heap.max_page_bytes,
            payload_bytes: payload_chunks * heap.chunk_bytes,
            retained: heap.retained_chunks_per_class as usize,
            capacity,
            live_per_class: vec![0; classes],
            chunks: vec![None; payload_chunks],
            assigned: vec![0; classes],
            pool: payload_chunks,
            live: HashMap::new(),
            seen: HashMap::new(),
            ranges: BTreeMap::new(),
            page_sizes,
        }
    }

    pub fn for_allocator(a: &Allocator) -> Model {
        Model::new(a.config(), a.payload_chunks())
    }

    fn class_of(&self, bytes: usize) -> Option<usize> {
        self.page_sizes.iter().position(|&p| p >= bytes)
    }

    fn pages_per_chunk(&self, class: usize) -> usize {
        self.chunk_bytes / self.page_sizes[class]
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn live_handles(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.live.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn seen_handles(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.seen.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    pub fn expect_alloc(&self, bytes: usize) -> Expect {
        if bytes == 0 {
            return Expect::ZeroSize;
        }
        if bytes > self.max_page {
            return Expect::TooLarge;
        }
        let class = self.class_of(bytes).expect("within the largest page");
        let available = match self.kind {
            AllocatorKind::Page => self.live_per_class[class] < self.capacity[class],
            AllocatorKind::Chunk => {
                self.pool > 0
                    || self
                        .chunks
                        .iter()
                        .flatten()
                        .any(|c| c.class == class && c.live < self.pages_per_chunk(class))
            }
        };
        if available {
            Expect::Grant {
                page_bytes: self.page_sizes[class],
            }
        } else {
            Expect::OutOfMemory
        }
    }

    /// Record a grant the allocator made, checking it against the model.
    pub fn grant(
        &mut self,
        bytes: usize,
        handle: PageHandle,
        region: Region,
    ) -> Result<(), String> {
        let class = self
            .class_of(bytes.max(1))
            .ok_or("grant for an oversized request")?;
        let page_bytes = self.page_sizes[class];
        if region.len != page_bytes {
            return Err(format!(
                "{bytes} bytes granted a {}-byte page, expected {page_bytes}",
                region.len
            ));
        }
        if region.offset % page_bytes != 0 || region.offset + region.len > self.payload_bytes {
            return Err(format!("region {region:?} is misplaced"));
        }
        if let Some((&start, &end)) = self.ranges.range(..region.offset + region.len).next_back() {
            if end > region.offset {
                return Err(format!("region {region:?} overlaps live [{start}, {end})"));
            }
        }
        let raw = handle.raw();
        if self.live.contains_key(&raw) {
            return Err(format!("{handle:?} granted while live"));
        }
        let chunk = region.offset / self.chunk_bytes;
        let page = (region.offset % self.chunk_bytes) / page_bytes;
        if self.kind == AllocatorKind::Chunk {
            let ppc = self.pages_per_chunk(class);
            match &mut self.chunks[chunk] {
                None => {
                    if self.pool == 0 {
                        return Err(format!("chunk {chunk} taken from an empty pool"));
                    }
                    self.pool -= 1;
                    self.assigned[class] += 1;
                    self.chunks[chunk] = Some(ChunkModel { class, live: 0 });
                }
                Some(c) if c.class != class => {
                    return Err(format!(
                        "chunk {chunk} belongs to class {}, granted for {class}",
                        c.class
                    ));
                }
                Some(c) if c.live >= ppc => return Err(format!("chunk {chunk} is already full")),
                Some(_) => {}
            }
            self.chunks[chunk].as_mut().unwrap().live += 1;
        }
        self.live_per_class[class] += 1;
        self.ranges
            .insert(region.offset, region.offset + region.len);
        self.live.insert(
            raw,
            Grant {
                chunk,
                page,
                class,
                offset: region.offset,
            },
        );
        self.seen.insert(raw, (chunk, page));
        Ok(())
    }

    pub fn expect_free(&self, handle: PageHandle) -> Expect {
        let raw = handle.raw();
        if self.live.contains_key(&raw) {
            return Expect::Freed;
        }
        let Some(&(chunk, page)) = self.seen.get(&raw) else {
            return Expect::InvalidHandle;
        };
        match self.kind {
            AllocatorKind::Page => Expect::DoubleFree,
            AllocatorKind::Chunk => match self.chunks[chunk] {
                None => Expect::InvalidHandle,
                Some(c) if page >= self.pages_per_chunk(c.class) => Expect::InvalidHandle,
                Some(_) => Expect::DoubleFree,
            },
        }
    }

    pub fn free(&mut self, handle: PageHandle) {
        let g = self
            .live
            .remove(&handle.raw())
            .expect("freeing a live handle");
        self.ranges.remove(&g.offset);
        self.live_per_class[g.class] -= 1;
        if self.kind == AllocatorKind::Chunk {
            let c = self.chunks[g.chunk]
                .as_mut()
                .expect("live page in an assigned chunk");
            c.live -= 1;
            if c.live == 0 && self.assigned[g.class] > self.retained {
                self.chunks[g.chunk] = None;
                self.assigned[g.class] -= 1;
                self.pool += 1;
            }
        }
        debug_assert!(g.page < self.pages_per_chunk(g.class));
    }
}

/// Classify an allocator outcome the way the model predicts it.
pub fn observed_alloc(a: &Allocator, r: &Result<PageHandle, AllocError>) -> Expect {
    match r {
        Ok(h) => Expect::Grant {
            page_bytes: a.page_region(*h).map_or(0, |r| r.len),
        },
        Err(AllocError::OutOfMemory { .. }) => Expect::OutOfMemory,
        Err(AllocError::ZeroSize) => Expect::ZeroSize,
        Err(AllocError::TooLarge { .. }) => Expect::TooLarge,
        Err(AllocError::InvalidHandle(_)) => Expect::InvalidHandle,
        Err(AllocError::DoubleFree(_)) => Expect::DoubleFree,
    }
}

pub fn observed_free(r: &Result<(), AllocError>) -> Expect {
    match r {
        Ok(()) => Expect::Freed,
        Err(AllocError::DoubleFree(_)) => Expect::DoubleFree,
        Err(AllocError::InvalidHandle(_)) => Expect::InvalidHandle,
        Err(AllocError::OutOfMemory { .. }) => Expect::OutOfMemory,
        Err(AllocError::ZeroSize) => Expect::ZeroSize,
        Err(AllocError::TooLarge { .. }) => Expect::TooLarge,
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of the ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
