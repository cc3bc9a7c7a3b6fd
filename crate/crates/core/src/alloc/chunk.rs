//! Chunk allocator: a shared pool of unassigned chunks plus, per size class,
//! a queue of chunks that have free pages. Allocation dequeues a chunk,
//! scans its bitmap for free pages and puts it back if pages remain.
//!
//! The class queues form a singly linked list ordered by page size.
//! Allocation walks it from the smallest class to the first one whose pages
//! fit the request, and a free walks to the class recorded in the chunk
//! header, so larger classes cost more hops.
//!
//! Class queue entries are hints. An entry packs the chunk index with the
//! low bits of the epoch the chunk was queued under, so each queued chunk
//! owns exactly one live entry and [`ChunkHeader::try_take`] skips the ones
//! left behind by retirement. A requeue that finds the queue full drains
//! stale entries itself instead of waiting for an allocation to do it.
//!
//! [`ChunkHeader::try_take`]: crate::chunk::ChunkHeader::try_take

use std::sync::atomic::{fence, AtomicUsize, Ordering};

use crossbeam_utils::Backoff;

use super::{release_error, AllocError, Shared};
use crate::arena::PageHandle;
use crate::config::{ConfigError, QueueFlavor};
use crate::queue::IndexQueue;

/// Class queue capacity for a heap of `chunks` payload chunks: one live
/// entry per chunk plus room for stale ones.
pub(crate) fn hint_capacity(chunks: usize) -> usize {
    2 * chunks + 64
}

/// One size class: its queue of chunks with free pages and the link to the
/// next larger class.
struct ClassQueue {
    class: usize,
    page_bytes: usize,
    queue: IndexQueue,
    /// Chunks currently assigned to the class.
    assigned: AtomicUsize,
    next: Option<Box<ClassQueue>>,
}

/// Packing of class queue entries: chunk index in the low bits, epoch tag
/// above.
#[derive(Clone, Copy)]
struct Tags {
    chunk_bits: u32,
}

impl Tags {
    fn new(chunks: u32) -> Tags {
        Tags {
            chunk_bits: 32 - chunks.saturating_sub(1).leading_zeros(),
        }
    }

    fn mask(self) -> u32 {
        u32::MAX.checked_shr(self.chunk_bits).unwrap_or(0)
    }

    fn pack(self, chunk: u32, epoch: u32) -> u32 {
        chunk
            | (epoch & self.mask())
                .checked_shl(self.chunk_bits)
                .unwrap_or(0)
    }

    /// Chunk index and epoch tag.
    fn unpack(self, entry: u32) -> (u32, u32) {
        let chunk = entry & !(u32::MAX.checked_shl(self.chunk_bits).unwrap_or(0));
        (chunk, entry.checked_shr(self.chunk_bits).unwrap_or(0))
    }
}

pub(crate) struct ChunkAllocator {
    pool: IndexQueue,
    head: Box<ClassQueue>,
    retained: usize,
    tags: Tags,
}

impl ChunkAllocator {
    pub(crate) fn new(shared: &Shared, retained: usize) -> Result<Self, ConfigError> {
        let chunks = shared.payload_chunks as usize;
        let pool = IndexQueue::new(QueueFlavor::Array, chunks, None)?;
        let all: Vec<u32> = (0..shared.payload_chunks).collect();
        pool.enqueue_batch(&all).expect("pool sized to the payload");
        let mut next = None;
        for (class, size) in shared.arena.classes().iter().enumerate().rev() {
            next = Some(Box::new(ClassQueue {
                class,
                page_bytes: size.page_bytes,
                queue: shared.new_queue(hint_capacity(chunks))?,
                assigned: AtomicUsize::new(0),
                next,
            }));
        }
        Ok(ChunkAllocator {
            pool,
            head: next.expect("at least one size class"),
            retained,
            tags: Tags::new(shared.payload_chunks),
        })
    }

    fn classes(&self) -> impl Iterator<Item = &ClassQueue> {
        std::iter::successors(Some(&*self.head), |node| node.next.as_deref())
    }

    fn nth(&self, class: usize) -> &ClassQueue {
        self.classes().nth(class).expect("class index in range")
    }

    /// Walk to the smallest class whose pages hold `bytes`.
    fn find(&self, bytes: usize) -> Result<&ClassQueue, AllocError> {
        if bytes == 0 {
            return Err(AllocError::ZeroSize);
        }
        let mut node = &*self.head;
        while node.page_bytes < bytes {
            node = match node.next.as_deref() {
                Some(next) => next,
                None => {
                    return Err(AllocError::TooLarge {
                        requested: bytes,
                        max: node.page_bytes,
                    })
                }
            };
        }
        Ok(node)
    }

    pub(crate) fn queue(&self, class: usize) -> &IndexQueue {
        &self.nth(class).queue
    }

    pub(crate) fn assigned(&self, class: usize) -> usize {
        self.nth(class).assigned.load(Ordering::Acquire)
    }

    pub(crate) fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub(crate) fn queue_ops(&self) -> u64 {
        self.pool.ops() + self.classes().map(|c| c.queue.ops()).sum::<u64>()
    }

    /// Returns the class served and the page.
    pub(crate) fn alloc(
        &self,
        shared: &Shared,
        bytes: usize,
    ) -> Result<(usize, PageHandle), AllocError> {
        let node = self.find(bytes)?;
        let handle = shared.retry(node.class, || {
            let mut handle = None;
            self.round(shared, node, 1, &mut |c, p| {
                handle = Some(shared.handle(c, p))
            });
            handle
        })?;
        Ok((node.class, handle))
    }

    /// Returns the class served.
    pub(crate) fn alloc_many(
        &self,
        shared: &Shared,
        bytes: usize,
        n: usize,
        out: &mut Vec<PageHandle>,
    ) -> Result<usize, AllocError> {
        let node = self.find(bytes)?;
        if n == 0 {
            return Ok(node.class);
        }
        let start = out.len();
        let result = shared.retry(node.class, || {
            let want = n - (out.len() - start);
            let got = self.round(shared, node, want as u32, &mut |c, p| {
                out.push(shared.handle(c, p))
            });
            (got as usize == want).then_some(())
        });
        if result.is_err() {
            for handle in out.drain(start..) {
                self.dealloc(shared, handle)
                    .expect("rolling back a fresh grant");
            }
        }
        result.map(|()| node.class)
    }

    /// One pass over the class queue, then the pool. Returns the number of
    /// pages handed to `sink`.
    fn round(
        &self,
        shared: &Shared,
        node: &ClassQueue,
        want: u32,
        sink: &mut dyn FnMut(u32, u32),
    ) -> u32 {
        let mut got = 0;
        while got < want {
            let Some(entry) = node.queue.dequeue() else {
                break;
            };
            let (chunk, tag) = self.tags.unpack(entry);
            if shared
                .arena
                .header(chunk)
                .try_take(node.class, tag, self.tags.mask())
            {
                got += self.visit(shared, chunk, node, want - got, sink);
            }
        }
        while got < want {
            let Some(chunk) = self.pool.dequeue() else {
                break;
            };
            node.assigned.fetch_add(1, Ordering::AcqRel);
            shared
                .arena
                .header(chunk)
                .assign(node.class, shared.pages_per_chunk(node.class))
                .expect("pool chunks are unassigned");
            got += self.visit(shared, chunk, node, want - got, sink);
        }
        got
    }

    /// Take pages from a held chunk and hand it back to its class queue if
    /// any remain.
    fn visit(
        &self,
        shared: &Shared,
        chunk: u32,
        node: &ClassQueue,
        want: u32,
        sink: &mut dyn FnMut(u32, u32),
    ) -> u32 {
        let header = shared.arena.header(chunk);
        let mut got = 0;
        let remaining = header.acquire_pages(want, |p| {
            sink(chunk, p);
            got += 1;
        });
        if remaining > 0 {
            self.requeue(shared, chunk, node);
            // A release that emptied the chunk while we held it could not
            // retire it; pairs with the fence in `maybe_retire`.
            fence(Ordering::SeqCst);
            if header.free_count() == header.pages() {
                self.maybe_retire(shared, chunk, node);
            }
        }
        got
    }

    fn requeue(&self, shared: &Shared, chunk: u32, node: &ClassQueue) {
        let epoch = shared.arena.header(chunk).set_queued();
        // Live entries number at most one per chunk, under half the queue,
        // so a full queue always has stale entries to drop. Live ones taken
        // out while looking for them are carried and put back.
        let mut pending = vec![self.tags.pack(chunk, epoch)];
        let backoff = Backoff::new();
        while let Some(&entry) = pending.last() {
            if node.queue.enqueue(entry).is_ok() {
                pending.pop();
                continue;
            }
            match node.queue.dequeue() {
                Some(other) => {
                    let (c, tag) = self.tags.unpack(other);
                    if shared
                        .arena
                        .header(c)
                        .is_current(node.class, tag, self.tags.mask())
                    {
                        pending.push(other);
                    }
                }
                None => backoff.snooze(),
            }
        }
    }

    /// Return a fully free, queued chunk to the pool unless the class is at
    /// its retained minimum.
    fn maybe_retire(&self, shared: &Shared, chunk: u32, node: &ClassQueue) {
        fence(Ordering::SeqCst);
        let header = shared.arena.header(chunk);
        if !header.try_retire() {
            return;
        }
        let released = node
            .assigned
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| {
                (n > self.retained).then(|| n - 1)
            });
        if released.is_ok() {
            self.pool.enqueue(chunk).expect("pool sized to the payload");
        } else {
            header
                .assign(node.class, shared.pages_per_chunk(node.class))
                .expect("just retired by this thread");
            self.requeue(shared, chunk, node);
        }
    }

    pub(crate) fn dealloc(&self, shared: &Shared, handle: PageHandle) -> Result<usize, AllocError> {
        let (chunk, page, class) = shared.locate(handle)?;
        let header = shared.arena.header(chunk);
        let after = header
            .release_page(page)
            .map_err(|e| release_error(e, handle))?;
        if after == 1 || after == header.pages() {
            let node = self.nth(class);
            if after == 1 {
                // The chunk was full and detached; this release brings it back.
                self.requeue(shared, chunk, node);
            }
            if after == header.pages() {
                self.maybe_retire(shared, chunk, node);
            }
        }
        Ok(class)
    }
}
