//! Page allocator: the payload chunks are split among the size classes up
//! front and every class queue starts out holding all of its page handles.

use super::{partition, release_error, AllocError, Shared};
use crate::arena::PageHandle;
use crate::config::ConfigError;
use crate::queue::IndexQueue;

pub(crate) struct PageAllocator {
    queues: Box<[IndexQueue]>,
    chunks: Box<[usize]>,
    provisioned: Box<[u64]>,
}

impl PageAllocator {
    pub(crate) fn new(shared: &Shared) -> Result<Self, ConfigError> {
        let classes = shared.arena.classes().len();
        let split = partition(shared.payload_chunks as usize, classes);
        let mut queues = Vec::with_capacity(classes);
        let mut provisioned = Vec::with_capacity(classes);
        let mut next_chunk = 0u32;
        let mut batch = Vec::new();
        for (k, &chunks) in split.iter().enumerate() {
            let pages = shared.pages_per_chunk(k);
            let total = chunks as u64 * pages as u64;
            let queue = shared.new_queue(total as usize)?;
            for chunk in next_chunk..next_chunk + chunks as u32 {
                shared
                    .arena
                    .header(chunk)
                    .assign(k, pages)
                    .expect("fresh arena chunks are unassigned");
                batch.clear();
                batch.extend((0..pages).map(|p| shared.handle(chunk, p).raw()));
                queue
                    .enqueue_batch(&batch)
                    .expect("queue sized to its pages");
            }
            next_chunk += chunks as u32;
            queues.push(queue);
            provisioned.push(total);
        }
        Ok(PageAllocator {
            queues: queues.into(),
            chunks: split.into(),
            provisioned: provisioned.into(),
        })
    }

    pub(crate) fn queue(&self, class: usize) -> &IndexQueue {
        &self.queues[class]
    }

    pub(crate) fn chunks(&self, class: usize) -> usize {
        self.chunks[class]
    }

    pub(crate) fn provisioned(&self, class: usize) -> u64 {
        self.provisioned[class]
    }

    pub(crate) fn queue_ops(&self) -> u64 {
        self.queues.iter().map(|q| q.ops()).sum()
    }

    fn claim(shared: &Shared, raw: u32) -> PageHandle {
        let handle = PageHandle::from_raw(raw);
        let (chunk, page) = shared
            .arena
            .decode_handle(handle)
            .expect("queues hold valid handles");
        let claimed = shared.arena.header(chunk).claim_page(page);
        debug_assert!(claimed.is_ok(), "queued page {handle:?} was not free");
        handle
    }

    pub(crate) fn alloc(&self, shared: &Shared, class: usize) -> Result<PageHandle, AllocError> {
        let queue = &self.queues[class];
        let raw = shared.retry(class, || queue.dequeue())?;
        Ok(Self::claim(shared, raw))
    }

    pub(crate) fn alloc_many(
        &self,
        shared: &Shared,
        class: usize,
        n: usize,
        out: &mut Vec<PageHandle>,
    ) -> Result<(), AllocError> {
        let queue = &self.queues[class];
        let mut raw = Vec::with_capacity(n);
        shared.retry(class, || queue.dequeue_batch(n, &mut raw).then_some(()))?;
        out.extend(raw.into_iter().map(|r| Self::claim(shared, r)));
        Ok(())
    }

    pub(crate) fn dealloc(&self, shared: &Shared, handle: PageHandle) -> Result<usize, AllocError> {
        let (chunk, page, class) = shared.locate(handle)?;
        shared
            .arena
            .header(chunk)
            .release_page(page)
            .map_err(|e| release_error(e, handle))?;
        self.queues[class]
            .enqueue(handle.raw())
            .expect("every page is either queued or live");
        Ok(class)
    }
}
