//! The preallocated heap: a single host allocation split into uniform
//! power-of-two chunks, the size-class ladder and packed page handles.
//!
//! Chunk headers live in a side table, so payload offsets are pure
//! arithmetic: page `p` of chunk `c` starts at `c * chunk_bytes + p *
//! page_bytes`.

use std::alloc::{self, Layout};
use std::fmt;
use std::ptr::NonNull;
use std::sync::atomic::AtomicU64;

use thiserror::Error;

use crate::chunk::{ChunkHeader, Phase};
use crate::config::{ConfigError, HeapConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SizeClass {
    pub index: usize,
    pub page_bytes: usize,
    pub pages_per_chunk: u32,
}

/// Packed `(chunk index, page index)` identifying one grant.
///
/// The low `page_bits` bits hold the page index, where `page_bits =
/// log2(chunk_bytes / min_page_bytes)`; the chunk index sits above them.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageHandle(u32);

impl PageHandle {
    pub fn from_raw(raw: u32) -> Self {
        PageHandle(raw)
    }

    pub fn raw(self) -> u32 {
        self.0
    }
}

impl fmt::Debug for PageHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PageHandle({:#x})", self.0)
    }
}

/// Byte interval of a page, relative to the arena base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Region {
    pub offset: usize,
    pub len: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ArenaError {
    #[error("request of {requested} bytes exceeds the largest page of {max} bytes")]
    TooLarge { requested: usize, max: usize },
    #[error("zero-byte request")]
    ZeroSize,
    #[error("chunk {chunk} / page {page} out of range")]
    Range { chunk: u32, page: u32 },
    #[error("{0:?} does not name a page of an assigned chunk")]
    InvalidHandle(PageHandle),
}

pub struct Arena {
    config: HeapConfig,
    base: NonNull<u8>,
    layout: Layout,
    classes: Vec<SizeClass>,
    headers: Box<[ChunkHeader]>,
    page_bits: u32,
}

// SAFETY: the raw region is only reached through `page_bytes*` (whose callers
// promise exclusive ownership of the page) and `chunk_words` (atomics only).
unsafe impl Send for Arena {}
unsafe impl Sync for Arena {}

impl fmt::Debug for Arena {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Arena")
            .field("heap_bytes", &self.config.heap_bytes)
            .field("chunk_bytes", &self.config.chunk_bytes)
            .field("num_chunks", &self.num_chunks())
            .field("classes", &self.classes.len())
            .finish()
    }
}

impl Arena {
    pub fn new(config: HeapConfig) -> Result<Arena, ConfigError> {
        config.validate()?;
        // 16 bytes is the smallest page; keeping to the system allocator's
        // natural alignment lets large arenas come from lazily zeroed memory.
        let layout = Layout::from_size_align(config.heap_bytes, 16)
            .map_err(|_| ConfigError::HostAllocation(config.heap_bytes))?;
        // SAFETY: layout has nonzero size (heap_bytes >= chunk_bytes >= 16).
        let base = NonNull::new(unsafe { alloc::alloc_zeroed(layout) })
            .ok_or(ConfigError::HostAllocation(config.heap_bytes))?;

        let classes = (0..config.num_classes())
            .map(|index| {
                let page_bytes = config.min_page_bytes << index;
                SizeClass {
                    index,
                    page_bytes,
                    pages_per_chunk: (config.chunk_bytes / page_bytes) as u32,
                }
            })
            .collect();
        let max_pages = config.chunk_bytes / config.min_page_bytes;
        let headers = (0..config.num_chunks())
            .map(|_| ChunkHeader::new(max_pages))
            .collect();
        Ok(Arena {
            page_bits: config.page_bits(),
            config,
            base,
            layout,
            classes,
            headers,
        })
    }

    pub fn config(&self) -> &HeapConfig {
        &self.config
    }

    pub fn num_chunks(&self) -> usize {
        self.headers.len()
    }

    pub fn chunk_bytes(&self) -> usize {
        self.config.chunk_bytes
    }

    pub fn classes(&self) -> &[SizeClass] {
        &self.classes
    }

    pub fn class(&self, index: usize) -> Option<&SizeClass> {
        self.classes.get(index)
    }

    pub fn header(&self, chunk: u32) -> &ChunkHeader {
        &self.headers[chunk as usize]
    }

    pub fn headers(&self) -> &[ChunkHeader] {
        &self.headers
    }

    /// Smallest class whose pages hold `request_bytes`.
    pub fn size_class_of(&self, request_bytes: usize) -> Result<&SizeClass, ArenaError> {
        if request_bytes == 0 {
            return Err(ArenaError::ZeroSize);
        }
        if request_bytes > self.config.max_page_bytes {
            return Err(ArenaError::TooLarge {
                requested: request_bytes,
                max: self.config.max_page_bytes,
            });
        }
        let page = request_bytes
            .max(self.config.min_page_bytes)
            .next_power_of_two();
        let index = (page / self.config.min_page_bytes).trailing_zeros() as usize;
        Ok(&self.classes[index])
    }

    pub fn encode_handle(&self, chunk: u32, page: u32) -> Result<PageHandle, ArenaError> {
        if chunk as usize >= self.num_chunks() || page >> self.page_bits != 0 {
            return Err(ArenaError::Range { chunk, page });
        }
        Ok(PageHandle(
            ((chunk as u64) << self.page_bits | page as u64) as u32,
        ))
    }

    pub fn decode_handle(&self, handle: PageHandle) -> Result<(u32, u32), ArenaError> {
        let raw = handle.0 as u64;
        let chunk = (raw >> self.page_bits) as u32;
        let page = (raw & ((1 << self.page_bits) - 1)) as u32;
        if chunk as usize >= self.num_chunks() {
            return Err(ArenaError::Range { chunk, page });
        }
        Ok((chunk, page))
    }

    /// Byte interval of `handle` under its chunk's current class.
    pub fn page_region(&self, handle: PageHandle) -> Result<Region, ArenaError> {
        let (chunk, page) = self
            .decode_handle(handle)
            .map_err(|_| ArenaError::InvalidHandle(handle))?;
        let state = self.header(chunk).state();
        let class = state
            .class_index()
            .and_then(|c| self.classes.get(c))
            .ok_or(ArenaError::InvalidHandle(handle))?;
        if page >= class.pages_per_chunk {
            return Err(ArenaError::InvalidHandle(handle));
        }
        Ok(Region {
            offset: chunk as usize * self.config.chunk_bytes + page as usize * class.page_bytes,
            len: class.page_bytes,
        })
    }

    /// Mutable view of a granted page.
    ///
    /// # Safety
    ///
    /// `handle` must be a live grant owned by the caller, with no other
    /// reference to the same bytes alive for the returned lifetime.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn page_bytes_mut(&self, handle: PageHandle) -> Result<&mut [u8], ArenaError> {
        let region = self.page_region(handle)?;
        Ok(std::slice::from_raw_parts_mut(
            self.base.as_ptr().add(region.offset),
            region.len,
        ))
    }

    /// Shared view of a granted page.
    ///
    /// # Safety
    ///
    /// `handle` must be a live grant and nobody may write the page while the
    /// returned slice is alive.
    pub unsafe fn page_bytes(&self, handle: PageHandle) -> Result<&[u8], ArenaError> {
        let region = self.page_region(handle)?;
        Ok(std::slice::from_raw_parts(
            self.base.as_ptr().add(region.offset),
            region.len,
        ))
    }

    /// Move chunks into the reserved phase so they can back queue segments.
    pub(crate) fn reserve_chunks(&self, chunks: std::ops::Range<u32>) -> Result<(), ArenaError> {
        for c in chunks {
            self.header(c)
                .reserve()
                .map_err(|_| ArenaError::Range { chunk: c, page: 0 })?;
        }
        Ok(())
    }

    /// A reserved chunk viewed as 64-bit atomic words.
    pub(crate) fn chunk_words(&self, chunk: u32) -> &[AtomicU64] {
        debug_assert_eq!(self.header(chunk).state().phase, Phase::Reserved);
        let words = self.config.chunk_bytes / 8;
        // SAFETY: reserved chunks are never handed out as pages, so this
        // memory is only ever accessed through these atomics. The base is at
        // least 16-byte aligned and chunk offsets are multiples of 16.
        unsafe {
            let ptr = self
                .base
                .as_ptr()
                .add(chunk as usize * self.config.chunk_bytes);
            std::slice::from_raw_parts(ptr as *const AtomicU64, words)
        }
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        // SAFETY: allocated in `new` with this layout.
        unsafe { alloc::dealloc(self.base.as_ptr(), self.layout) }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn arena(heap: usize) -> Arena {
        Arena::new(HeapConfig::default().with_heap_bytes(heap)).unwrap()
    }

    #[test]
    fn chunk_and_class_counts() {
        let a = arena(1 << 20);
        assert_eq!(a.num_chunks(), 16);
        let sizes: Vec<_> = a.classes().iter().map(|c| c.page_bytes).collect();
        assert_eq!(sizes, [16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192]);
        assert_eq!(a.classes()[6].pages_per_chunk, 64);
        assert_eq!(arena(64 << 10).num_chunks(), 1);
    }

    #[test]
    fn bad_chunk_size_is_config_error() {
        let cfg = HeapConfig::default().with_chunk_bytes(3 << 10);
        assert!(matches!(
            Arena::new(cfg),
            Err(ConfigError::NotPowerOfTwo { .. })
        ));
    }

    #[test]
    fn size_classes() {
        let a = arena(1 << 20);
        assert_eq!(a.size_class_of(1000).unwrap().page_bytes, 1024);
        assert_eq!(a.size_class_of(16).unwrap().index, 0);
        assert_eq!(a.size_class_of(1).unwrap().index, 0);
        assert_eq!(a.size_class_of(8192).unwrap().index, 9);
        assert_eq!(
            a.size_class_of(8193),
            Err(ArenaError::TooLarge {
                requested: 8193,
                max: 8192
            })
        );
        assert_eq!(a.size_class_of(0), Err(ArenaError::ZeroSize));
        let mut last = 0;
        for req in 1..=8192 {
            let class = a.size_class_of(req).unwrap();
            assert!(class.page_bytes >= req && class.index >= last);
            last = class.index;
        }
        for class in a.classes() {
            assert_eq!(a.size_class_of(class.page_bytes).unwrap(), class);
        }
    }

    #[test]
    fn handle_packing() {
        let a = arena(1 << 20);
        let h = a.encode_handle(0, 0).unwrap();
        assert_eq!(h.raw(), 0);
        assert_eq!(a.decode_handle(h), Ok((0, 0)));
        let h = a.encode_handle(1, 0).unwrap();
        assert_eq!(h.raw(), 4096);
        assert_eq!(a.decode_handle(h), Ok((1, 0)));
        assert!(a.encode_handle(16, 0).is_err());
        assert!(a.encode_handle(0, 4096).is_err());
        assert!(a.decode_handle(PageHandle::from_raw(16 << 12)).is_err());
    }

    #[test]
    fn region_arithmetic() {
        let a = arena(1 << 20);
        let class = a.size_class_of(1024).unwrap();
        for c in 0..2 {
            a.header(c)
                .assign(class.index, class.pages_per_chunk)
                .unwrap();
        }
        let h = a.encode_handle(0, 0).unwrap();
        assert_eq!(
            a.page_region(h),
            Ok(Region {
                offset: 0,
                len: 1024
            })
        );
        let h = a.encode_handle(1, 2).unwrap();
        assert_eq!(
            a.page_region(h),
            Ok(Region {
                offset: 65536 + 2048,
                len: 1024
            })
        );
        let past = a.encode_handle(1, 64).unwrap();
        assert_eq!(a.page_region(past), Err(ArenaError::InvalidHandle(past)));
        let unassigned = a.encode_handle(2, 0).unwrap();
        assert_eq!(
            a.page_region(unassigned),
            Err(ArenaError::InvalidHandle(unassigned))
        );
    }

    #[test]
    fn regions_of_distinct_pages_are_disjoint() {
        let a = arena(1 << 20);
        for (chunk, class) in a.classes().iter().enumerate() {
            a.header(chunk as u32)
                .assign(class.index, class.pages_per_chunk)
                .unwrap();
        }
        let mut regions = Vec::new();
        for chunk in 0..a.classes().len() as u32 {
            for page in 0..a.header(chunk).pages() {
                regions.push(
                    a.page_region(a.encode_handle(chunk, page).unwrap())
                        .unwrap(),
                );
            }
        }
        // Sort-and-sweep stands in for the quadratic pairwise check.
        regions.sort();
        for pair in regions.windows(2) {
            assert!(pair[0].end() <= pair[1].offset, "{pair:?}");
        }
        for r in &regions {
            assert_eq!(r.offset % r.len, 0, "pages are aligned to their size");
        }
    }

    #[test]
    fn fuzz_round_trip_100k() {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let a = arena(64 << 20);
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..100_000 {
            let c = rng.gen_range(0..1024u32);
            let p = rng.gen_range(0..4096u32);
            let h = a.encode_handle(c, p).unwrap();
            assert_eq!(h.raw(), c * 4096 + p);
            assert_eq!(a.decode_handle(h), Ok((c, p)));
        }
    }

    proptest! {
        #[test]
        fn round_trip(chunk_shift in 0u32..6, c in any::<u32>(), p in any::<u32>()) {
            let chunk_bytes = 4096usize << chunk_shift;
            let cfg = HeapConfig {
                heap_bytes: 1 << 22,
                chunk_bytes,
                max_page_bytes: chunk_bytes.min(8192),
                ..HeapConfig::default()
            };
            let a = Arena::new(cfg).unwrap();
            let c = c % a.num_chunks() as u32;
            let p = p % (a.chunk_bytes() / 16) as u32;
            let h = a.encode_handle(c, p).unwrap();
            prop_assert_eq!(a.decode_handle(h), Ok((c, p)));
        }
    }
}
