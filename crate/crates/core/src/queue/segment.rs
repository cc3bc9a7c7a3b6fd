//! Queue segments carved out of arena chunks.
//!
//! A segment is one reserved arena chunk viewed as 64-bit atomic words:
//!
//! ```text
//! word 0   segment id (queue id << 24 | segment number), 0 when free
//! word 1   next link (owner id << 25 | next chunk + 1), list flavor only
//! word 2   consumed-slot counter
//! word 3.. slots
//! ```
//!
//! Reserved chunks are only ever touched through atomics, so a thread that
//! races with a segment's recycling reads stale but well-defined words and
//! the embedded ids let it notice.

use std::ops::Range;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_utils::Backoff;

use super::IndexQueue;
use crate::arena::Arena;
use crate::config::{ConfigError, QueueFlavor};

pub(crate) const ID: usize = 0;
pub(crate) const NEXT: usize = 1;
pub(crate) const CONSUMED: usize = 2;
pub(crate) const HEADER_WORDS: usize = 3;

const FULL: u64 = 1 << 63;
const LINK_SHIFT: u32 = 25;
const CHUNK_MASK: u64 = (1 << LINK_SHIFT) - 1;
const MAX_QUEUE_ID: u32 = (1 << 15) - 1;

/// Segment id, unique per queue for 2^24 consecutive segments. Never zero.
pub(crate) fn segment_id(queue: u32, segment: u64) -> u64 {
    (queue as u64) << 24 | (segment & 0xff_ffff)
}

/// Slot word of a filled slot: the full bit, the low 31 bits of the owning
/// segment id and the value.
pub(crate) fn full_slot(id: u64, value: u32) -> u64 {
    FULL | (id & 0x7fff_ffff) << 32 | value as u64
}

/// Value of a filled slot word, checking the owner tag.
pub(crate) fn slot_value(word: u64, id: u64) -> Option<u32> {
    if word & FULL == 0 {
        return None;
    }
    debug_assert_eq!(
        (word >> 32) & 0x7fff_ffff,
        id & 0x7fff_ffff,
        "slot read through a recycled segment"
    );
    Some(word as u32)
}

/// Directory and head/tail pointer encoding: segment number plus chunk, or
/// a segment number with no chunk yet (installation in progress).
pub(crate) fn seg_ref(segment: u64, chunk: Option<u32>) -> u64 {
    (segment + 1) << LINK_SHIFT | chunk.map_or(0, |c| c as u64 + 1)
}

pub(crate) fn decode_seg_ref(word: u64) -> Option<(u64, Option<u32>)> {
    (word != 0).then(|| {
        let chunk = word & CHUNK_MASK;
        (
            (word >> LINK_SHIFT) - 1,
            (chunk != 0).then(|| (chunk - 1) as u32),
        )
    })
}

pub(crate) fn link(owner: u64, next: Option<u32>) -> u64 {
    owner << LINK_SHIFT | next.map_or(0, |c| c as u64 + 1)
}

pub(crate) fn decode_link(word: u64) -> (u64, Option<u32>) {
    let chunk = word & CHUNK_MASK;
    (word >> LINK_SHIFT, (chunk != 0).then(|| (chunk - 1) as u32))
}

/// Live-segment gauge with a high-watermark.
#[derive(Debug, Default)]
pub(crate) struct SegmentUsage {
    live: AtomicUsize,
    high: AtomicUsize,
}

impl SegmentUsage {
    pub(crate) fn inc(&self) {
        let now = self.live.fetch_add(1, Ordering::AcqRel) + 1;
        self.high.fetch_max(now, Ordering::AcqRel);
    }

    pub(crate) fn dec(&self) {
        self.live.fetch_sub(1, Ordering::AcqRel);
    }

    pub(crate) fn live(&self) -> usize {
        self.live.load(Ordering::Acquire)
    }

    pub(crate) fn high(&self) -> usize {
        self.high.load(Ordering::Acquire)
    }
}

/// Pool of reserved arena chunks handed out as queue segments.
pub struct SegmentPool {
    arena: Arc<Arena>,
    free: IndexQueue,
    chunks: usize,
    usage: SegmentUsage,
    next_queue: AtomicU32,
}

impl std::fmt::Debug for SegmentPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegmentPool")
            .field("chunks", &self.chunks)
            .field("in_use", &self.in_use())
            .finish()
    }
}

impl SegmentPool {
    /// Reserve `chunks` of `arena` as segment storage.
    pub fn new(arena: Arc<Arena>, chunks: Range<u32>) -> Result<Arc<SegmentPool>, ConfigError> {
        if arena.chunk_bytes() / 8 <= HEADER_WORDS {
            return Err(ConfigError::HeapTooSmall {
                chunks: arena.num_chunks(),
                needed: 0,
            });
        }
        let count = chunks.len();
        arena
            .reserve_chunks(chunks.clone())
            .map_err(|_| ConfigError::HeapTooSmall {
                chunks: arena.num_chunks(),
                needed: count,
            })?;
        let free = IndexQueue::new(QueueFlavor::Array, count.max(1), None)?;
        for c in chunks {
            free.enqueue(c).expect("pool sized to its chunks");
        }
        Ok(Arc::new(SegmentPool {
            arena,
            free,
            chunks: count,
            usage: SegmentUsage::default(),
            next_queue: AtomicU32::new(1),
        }))
    }

    /// Number of chunks set aside for segments.
    pub fn capacity(&self) -> usize {
        self.chunks
    }

    pub fn available(&self) -> usize {
        self.free.len()
    }

    pub fn in_use(&self) -> usize {
        self.usage.live()
    }

    pub fn high_water(&self) -> usize {
        self.usage.high()
    }

    pub fn slots_per_segment(&self) -> u64 {
        (self.arena.chunk_bytes() / 8 - HEADER_WORDS) as u64
    }

    pub(crate) fn register_queue(&self) -> u32 {
        let id = self.next_queue.fetch_add(1, Ordering::AcqRel);
        assert!(id <= MAX_QUEUE_ID, "too many queues on one segment pool");
        id
    }

    /// Take a chunk and initialize it as segment `id`.
    pub(crate) fn acquire(&self, id: u64, consumed: u64) -> u32 {
        let backoff = Backoff::new();
        let chunk = loop {
            match self.free.dequeue() {
                Some(c) => break c,
                // Queues are budgeted so this only waits for a retiring
                // segment that another thread is about to hand back.
                None => backoff.snooze(),
            }
        };
        self.usage.inc();
        let words = self.words(chunk);
        for w in &words[HEADER_WORDS..] {
            w.store(0, Ordering::Relaxed);
        }
        words[CONSUMED].store(consumed, Ordering::Relaxed);
        words[NEXT].store(link(id, None), Ordering::Relaxed);
        words[ID].store(id, Ordering::Release);
        chunk
    }

    pub(crate) fn release(&self, chunk: u32) {
        self.words(chunk)[ID].store(0, Ordering::Release);
        self.usage.dec();
        self.free.enqueue(chunk).expect("segment returned twice");
    }

    pub(crate) fn words(&self, chunk: u32) -> &[AtomicU64] {
        self.arena.chunk_words(chunk)
    }
}
