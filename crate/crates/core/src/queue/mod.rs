//! Bounded lock-free MPMC FIFO of 32-bit indices.
//!
//! All three flavors share one protocol. An occupancy counter acts as a
//! semaphore: producers reserve room with a compare-exchange against the
//! capacity, consumers reserve an element the same way. A reservation is
//! then turned into a ticket with a `fetch_add` on the tail (producers) or
//! head (consumers), and the ticket names exactly one slot. Each slot is
//! written once and read once per ticket; its word carries a tag for the
//! ticket's generation, so a slow thread can never act on a slot that has
//! since been reused.
//!
//! The flavors differ only in where slot `t` lives:
//!
//! * [`QueueFlavor::Array`]: `slots[t % capacity]`, allocated up front.
//! * [`QueueFlavor::VirtualArray`]: a directory of arena-chunk segments,
//!   installed on first touch and returned once every slot was consumed.
//! * [`QueueFlavor::VirtualList`]: a linked list of arena-chunk segments
//!   walked from the head or tail segment.

mod segment;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_utils::{Backoff, CachePadded};
use thiserror::Error;

pub use segment::SegmentPool;
use segment::{
    decode_link, decode_seg_ref, full_slot, link, seg_ref, segment_id, slot_value, SegmentUsage,
    CONSUMED, HEADER_WORDS, NEXT,
};

use crate::config::{ConfigError, QueueFlavor};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("queue is full")]
pub struct QueueFull;

pub struct IndexQueue {
    capacity: usize,
    count: CachePadded<AtomicUsize>,
    head: CachePadded<AtomicU64>,
    tail: CachePadded<AtomicU64>,
    ops: AtomicU64,
    storage: Storage,
}

enum Storage {
    Array(ArraySlots),
    VirtualArray(VirtualArraySlots),
    VirtualList(VirtualListSlots),
}

impl std::fmt::Debug for IndexQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IndexQueue")
            .field("flavor", &self.flavor())
            .field("capacity", &self.capacity)
            .field("len", &self.len())
            .finish()
    }
}

impl IndexQueue {
    /// An empty queue. Virtual flavors take their segments from `pool` on
    /// demand and hold none until the first enqueue.
    pub fn new(
        flavor: QueueFlavor,
        capacity: usize,
        pool: Option<Arc<SegmentPool>>,
    ) -> Result<IndexQueue, ConfigError> {
        if capacity == 0 {
            return Err(ConfigError::ZeroCapacity);
        }
        let storage = match flavor {
            QueueFlavor::Array => Storage::Array(ArraySlots::new(capacity)),
            QueueFlavor::VirtualArray => {
                let pool = pool.ok_or(ConfigError::MissingPool)?;
                Storage::VirtualArray(VirtualArraySlots::new(pool, capacity))
            }
            QueueFlavor::VirtualList => {
                let pool = pool.ok_or(ConfigError::MissingPool)?;
                Storage::VirtualList(VirtualListSlots::new(pool))
            }
        };
        Ok(IndexQueue {
            capacity,
            count: CachePadded::new(AtomicUsize::new(0)),
            head: CachePadded::new(AtomicU64::new(0)),
            tail: CachePadded::new(AtomicU64::new(0)),
            ops: AtomicU64::new(0),
            storage,
        })
    }

    /// Upper bound on the segments a queue of this flavor and capacity keeps
    /// alive at once (zero for the array flavor).
    pub fn segment_budget(flavor: QueueFlavor, capacity: usize, slots_per_segment: u64) -> usize {
        let spanned = (capacity as u64).div_ceil(slots_per_segment) as usize;
        match flavor {
            QueueFlavor::Array => 0,
            QueueFlavor::VirtualArray => spanned + 2,
            QueueFlavor::VirtualList => spanned + 3,
        }
    }

    pub fn flavor(&self) -> QueueFlavor {
        match self.storage {
            Storage::Array(_) => QueueFlavor::Array,
            Storage::VirtualArray(_) => QueueFlavor::VirtualArray,
            Storage::VirtualList(_) => QueueFlavor::VirtualList,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Occupancy snapshot, including elements whose enqueue is in flight.
    pub fn len(&self) -> usize {
        self.count.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of enqueue/dequeue calls (single or batched) so far.
    pub fn ops(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    /// Segments currently held (virtual flavors).
    pub fn segments_live(&self) -> usize {
        match &self.storage {
            Storage::Array(_) => 0,
            Storage::VirtualArray(s) => s.usage.live(),
            Storage::VirtualList(s) => s.usage.live(),
        }
    }

    pub fn segments_high_water(&self) -> usize {
        match &self.storage {
            Storage::Array(_) => 0,
            Storage::VirtualArray(s) => s.usage.high(),
            Storage::VirtualList(s) => s.usage.high(),
        }
    }

    pub fn enqueue(&self, value: u32) -> Result<(), QueueFull> {
        self.enqueue_batch(std::slice::from_ref(&value))
    }

    pub fn dequeue(&self) -> Option<u32> {
        self.ops.fetch_add(1, Ordering::Relaxed);
        if !self.reserve_pop(1) {
            return None;
        }
        let ticket = self.head.fetch_add(1, Ordering::AcqRel);
        Some(self.take(ticket))
    }

    /// Enqueue all of `values` as one operation, or none of them.
    pub fn enqueue_batch(&self, values: &[u32]) -> Result<(), QueueFull> {
        self.ops.fetch_add(1, Ordering::Relaxed);
        if values.is_empty() {
            return Ok(());
        }
        if !self.reserve_push(values.len()) {
            return Err(QueueFull);
        }
        let first = self.tail.fetch_add(values.len() as u64, Ordering::AcqRel);
        for (ticket, &value) in (first..).zip(values) {
            self.put(ticket, value);
        }
        Ok(())
    }

    /// Dequeue exactly `n` elements into `out` as one operation; returns
    /// false and leaves `out` untouched if fewer than `n` are available.
    pub fn dequeue_batch(&self, n: usize, out: &mut Vec<u32>) -> bool {
        self.ops.fetch_add(1, Ordering::Relaxed);
        if n == 0 {
            return true;
        }
        if !self.reserve_pop(n) {
            return false;
        }
        let first = self.head.fetch_add(n as u64, Ordering::AcqRel);
        out.extend((first..first + n as u64).map(|t| self.take(t)));
        true
    }

    fn reserve_push(&self, n: usize) -> bool {
        self.count
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| {
                (c + n <= self.capacity).then_some(c + n)
            })
            .is_ok()
    }

    fn reserve_pop(&self, n: usize) -> bool {
        self.count
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| {
                (c >= n).then(|| c - n)
            })
            .is_ok()
    }

    fn put(&self, ticket: u64, value: u32) {
        match &self.storage {
            Storage::Array(s) => s.put(ticket, value),
            Storage::VirtualArray(s) => s.put(ticket, value),
            Storage::VirtualList(s) => s.put(ticket, value),
        }
    }

    fn take(&self, ticket: u64) -> u32 {
        match &self.storage {
            Storage::Array(s) => s.take(ticket),
            Storage::VirtualArray(s) => s.take(ticket),
            Storage::VirtualList(s) => s.take(ticket),
        }
    }
}

/// Slot word: tag in the high half, value in the low half. For lap `l` of a
/// slot, tag `2l` means empty and `2l + 1` means full.
struct ArraySlots {
    slots: Box<[AtomicU64]>,
}

impl ArraySlots {
    fn new(capacity: usize) -> Self {
        ArraySlots {
            slots: (0..capacity).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn locate(&self, ticket: u64) -> (&AtomicU64, u32) {
        let cap = self.slots.len() as u64;
        let lap = (ticket / cap) as u32;
        (&self.slots[(ticket % cap) as usize], lap.wrapping_mul(2))
    }

    fn put(&self, ticket: u64, value: u32) {
        let (slot, empty) = self.locate(ticket);
        let backoff = Backoff::new();
        // Waits only for the consumer of the previous lap to finish reading.
        while (slot.load(Ordering::Acquire) >> 32) as u32 != empty {
            backoff.snooze();
        }
        slot.store(
            (empty.wrapping_add(1) as u64) << 32 | value as u64,
            Ordering::Release,
        );
    }

    fn take(&self, ticket: u64) -> u32 {
        let (slot, empty) = self.locate(ticket);
        let full = empty.wrapping_add(1);
        let backoff = Backoff::new();
        loop {
            let word = slot.load(Ordering::Acquire);
            if (word >> 32) as u32 == full {
                slot.store((full.wrapping_add(1) as u64) << 32, Ordering::Release);
                return word as u32;
            }
            backoff.snooze();
        }
    }
}

fn wait_for_slot(words: &[AtomicU64], index: usize, id: u64) -> u32 {
    let backoff = Backoff::new();
    loop {
        if let Some(value) = slot_value(words[index].load(Ordering::Acquire), id) {
            return value;
        }
        backoff.snooze();
    }
}

/// Segment `s` sits in directory entry `s % dir.len()`. An entry is empty
/// (0), being installed (segment number without a chunk), or live.
struct VirtualArraySlots {
    pool: Arc<SegmentPool>,
    queue_id: u32,
    per_segment: u64,
    dir: Box<[AtomicU64]>,
    usage: SegmentUsage,
}

impl VirtualArraySlots {
    fn new(pool: Arc<SegmentPool>, capacity: usize) -> Self {
        let per_segment = pool.slots_per_segment();
        let entries = IndexQueue::segment_budget(QueueFlavor::VirtualArray, capacity, per_segment);
        VirtualArraySlots {
            queue_id: pool.register_queue(),
            per_segment,
            dir: (0..entries).map(|_| AtomicU64::new(0)).collect(),
            usage: SegmentUsage::default(),
            pool,
        }
    }

    fn locate(&self, segment: u64) -> u32 {
        let entry = &self.dir[(segment % self.dir.len() as u64) as usize];
        let backoff = Backoff::new();
        loop {
            match decode_seg_ref(entry.load(Ordering::Acquire)) {
                None => {
                    let installing = seg_ref(segment, None);
                    if entry
                        .compare_exchange(0, installing, Ordering::AcqRel, Ordering::Acquire)
                        .is_ok()
                    {
                        let id = segment_id(self.queue_id, segment);
                        let chunk = self.pool.acquire(id, 0);
                        self.usage.inc();
                        entry.store(seg_ref(segment, Some(chunk)), Ordering::Release);
                        return chunk;
                    }
                }
                Some((s, Some(chunk))) if s == segment => return chunk,
                // Being installed, or an older segment still draining.
                Some(_) => backoff.snooze(),
            }
        }
    }

    fn put(&self, ticket: u64, value: u32) {
        let segment = ticket / self.per_segment;
        let words = self.pool.words(self.locate(segment));
        let index = HEADER_WORDS + (ticket % self.per_segment) as usize;
        let id = segment_id(self.queue_id, segment);
        words[index].store(full_slot(id, value), Ordering::Release);
    }

    fn take(&self, ticket: u64) -> u32 {
        let segment = ticket / self.per_segment;
        let chunk = self.locate(segment);
        let words = self.pool.words(chunk);
        let index = HEADER_WORDS + (ticket % self.per_segment) as usize;
        let value = wait_for_slot(words, index, segment_id(self.queue_id, segment));
        if words[CONSUMED].fetch_add(1, Ordering::AcqRel) + 1 == self.per_segment {
            let entry = &self.dir[(segment % self.dir.len() as u64) as usize];
            entry.store(0, Ordering::Release);
            self.usage.dec();
            self.pool.release(chunk);
        }
        value
    }
}

impl Drop for VirtualArraySlots {
    fn drop(&mut self) {
        for entry in self.dir.iter() {
            if let Some((_, Some(chunk))) = decode_seg_ref(entry.load(Ordering::Acquire)) {
                self.pool.release(chunk);
            }
        }
    }
}

/// Segments form a singly linked list through their `NEXT` words. The head
/// pointer names the oldest live segment; the tail pointer is a hint for
/// producers and never lags behind the head.
///
/// A segment retires once all of its slots were consumed *and* it became
/// the head segment. The second condition is a token worth one extra
/// consumption, passed on by the retiring predecessor, so segments retire
/// strictly in order and the head always points at a live segment.
struct VirtualListSlots {
    pool: Arc<SegmentPool>,
    queue_id: u32,
    per_segment: u64,
    head_seg: CachePadded<AtomicU64>,
    tail_seg: CachePadded<AtomicU64>,
    usage: SegmentUsage,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Producer,
    Consumer,
}

impl VirtualListSlots {
    fn new(pool: Arc<SegmentPool>) -> Self {
        VirtualListSlots {
            queue_id: pool.register_queue(),
            per_segment: pool.slots_per_segment(),
            head_seg: CachePadded::new(AtomicU64::new(0)),
            tail_seg: CachePadded::new(AtomicU64::new(0)),
            usage: SegmentUsage::default(),
            pool,
        }
    }

    fn id(&self, segment: u64) -> u64 {
        segment_id(self.queue_id, segment)
    }

    fn install_first(&self) {
        let installing = seg_ref(0, None);
        if self
            .tail_seg
            .compare_exchange(0, installing, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
        {
            // The first segment starts out holding the head token.
            let chunk = self.pool.acquire(self.id(0), 1);
            self.usage.inc();
            self.head_seg
                .store(seg_ref(0, Some(chunk)), Ordering::Release);
            self.tail_seg
                .store(seg_ref(0, Some(chunk)), Ordering::Release);
        }
    }

    /// Follow links from `(segment, chunk)` to `target`, installing missing
    /// segments. `None` means a link was read from a recycled chunk and the
    /// caller must restart from a fresh head or tail.
    fn walk(&self, mut segment: u64, mut chunk: u32, target: u64) -> Option<u32> {
        while segment < target {
            let next = &self.pool.words(chunk)[NEXT];
            let word = next.load(Ordering::Acquire);
            let (owner, successor) = decode_link(word);
            if owner != self.id(segment) {
                return None;
            }
            match successor {
                Some(c) => chunk = c,
                None => {
                    let fresh = self.pool.acquire(self.id(segment + 1), 0);
                    let linked = link(self.id(segment), Some(fresh));
                    if next
                        .compare_exchange(word, linked, Ordering::AcqRel, Ordering::Acquire)
                        .is_err()
                    {
                        self.pool.release(fresh);
                        continue;
                    }
                    self.usage.inc();
                    chunk = fresh;
                }
            }
            segment += 1;
        }
        Some(chunk)
    }

    fn locate(&self, segment: u64, role: Role) -> u32 {
        let backoff = Backoff::new();
        loop {
            let tail = self.tail_seg.load(Ordering::Acquire);
            let start = match (role, decode_seg_ref(tail)) {
                (_, None) => {
                    self.install_first();
                    continue;
                }
                (_, Some((_, None))) => {
                    backoff.snooze();
                    continue;
                }
                (Role::Producer, Some((s, Some(c)))) if s <= segment => Some((tail, s, c)),
                _ => None,
            };
            let (from_tail, s, c) = match start {
                Some((word, s, c)) => (Some(word), s, c),
                None => match decode_seg_ref(self.head_seg.load(Ordering::Acquire)) {
                    Some((s, Some(c))) => (None, s, c),
                    _ => {
                        backoff.snooze();
                        continue;
                    }
                },
            };
            debug_assert!(s <= segment, "target segment already retired");
            match self.walk(s, c, segment) {
                Some(chunk) => {
                    if let Some(word) = from_tail.filter(|_| segment > s) {
                        // Advance the tail hint; losing this race is fine.
                        let _ = self.tail_seg.compare_exchange(
                            word,
                            seg_ref(segment, Some(chunk)),
                            Ordering::AcqRel,
                            Ordering::Relaxed,
                        );
                    }
                    return chunk;
                }
                None => backoff.snooze(),
            }
        }
    }

    fn put(&self, ticket: u64, value: u32) {
        let segment = ticket / self.per_segment;
        let words = self.pool.words(self.locate(segment, Role::Producer));
        let index = HEADER_WORDS + (ticket % self.per_segment) as usize;
        words[index].store(full_slot(self.id(segment), value), Ordering::Release);
    }

    fn take(&self, ticket: u64) -> u32 {
        let segment = ticket / self.per_segment;
        let chunk = self.locate(segment, Role::Consumer);
        let words = self.pool.words(chunk);
        let index = HEADER_WORDS + (ticket % self.per_segment) as usize;
        let value = wait_for_slot(words, index, self.id(segment));
        if words[CONSUMED].fetch_add(1, Ordering::AcqRel) + 1 == self.per_segment + 1 {
            self.retire(segment, chunk);
        }
        value
    }

    fn retire(&self, mut segment: u64, mut chunk: u32) {
        loop {
            let next = self
                .walk(segment, chunk, segment + 1)
                .expect("a retiring segment is live");
            let mut tail = self.tail_seg.load(Ordering::Acquire);
            while matches!(decode_seg_ref(tail), Some((s, _)) if s == segment) {
                match self.tail_seg.compare_exchange(
                    tail,
                    seg_ref(segment + 1, Some(next)),
                    Ordering::AcqRel,
                    Ordering::Acquire,
                ) {
                    Ok(_) => break,
                    Err(now) => tail = now,
                }
            }
            self.head_seg
                .store(seg_ref(segment + 1, Some(next)), Ordering::Release);
            self.usage.dec();
            self.pool.release(chunk);

            let words = self.pool.words(next);
            if words[CONSUMED].fetch_add(1, Ordering::AcqRel) + 1 != self.per_segment + 1 {
                return;
            }
            segment += 1;
            chunk = next;
        }
    }
}

impl Drop for VirtualListSlots {
    fn drop(&mut self) {
        let Some((mut segment, Some(mut chunk))) =
            decode_seg_ref(self.head_seg.load(Ordering::Acquire))
        else {
            return;
        };
        loop {
            let (owner, next) = decode_link(self.pool.words(chunk)[NEXT].load(Ordering::Acquire));
            debug_assert_eq!(owner, self.id(segment));
            self.pool.release(chunk);
            match next {
                Some(c) => {
                    chunk = c;
                    segment += 1;
                }
                None => break,
            }
        }
    }
}
