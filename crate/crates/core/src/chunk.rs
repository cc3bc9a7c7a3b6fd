//! Per-chunk occupancy: class assignment, free-page bitmap and the atomic
//! page acquire/release used by the chunk allocator's page scan.
//!
//! The header's state word packs three fields:
//!
//! ```text
//!  63            32 31     16 15    8 7   0
//! +----------------+---------+-------+-----+
//! |     epoch      |  unused | class |phase|
//! +----------------+---------+-------+-----+
//! ```
//!
//! `phase` tells where the chunk lives: unassigned (in a free pool), held by
//! exactly one thread or full and out of every queue, queued in its class
//! queue, or reserved as queue-segment storage. The epoch is bumped on every
//! transition into the queued phase and on retirement, so a compare-exchange
//! against a previously observed state fails if the chunk was taken and
//! put back in the meantime.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Unassigned,
    /// Assigned and owned by one thread, or full and detached from queues.
    Held,
    /// Assigned and published in its class queue.
    Queued,
    /// Permanently set aside for queue segment storage.
    Reserved,
}

impl Phase {
    fn bits(self) -> u64 {
        match self {
            Phase::Unassigned => 0,
            Phase::Held => 1,
            Phase::Queued => 2,
            Phase::Reserved => 3,
        }
    }

    fn from_bits(bits: u64) -> Phase {
        match bits & 0xff {
            0 => Phase::Unassigned,
            1 => Phase::Held,
            2 => Phase::Queued,
            _ => Phase::Reserved,
        }
    }
}

/// Decoded snapshot of a header's state word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkState {
    pub phase: Phase,
    pub class: u8,
    pub epoch: u32,
}

impl ChunkState {
    fn pack(self) -> u64 {
        (self.epoch as u64) << 32 | (self.class as u64) << 8 | self.phase.bits()
    }

    fn unpack(word: u64) -> ChunkState {
        ChunkState {
            phase: Phase::from_bits(word),
            class: (word >> 8) as u8,
            epoch: (word >> 32) as u32,
        }
    }

    pub fn is_assigned(&self) -> bool {
        matches!(self.phase, Phase::Held | Phase::Queued)
    }

    /// Size class index while assigned.
    pub fn class_index(&self) -> Option<usize> {
        self.is_assigned().then_some(self.class as usize)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ChunkError {
    #[error("chunk is already assigned or reserved")]
    AlreadyAssigned,
    #[error("chunk has no free pages")]
    ChunkFull,
    #[error("chunk is not assigned to a size class")]
    Unassigned,
    #[error("page {page} is outside the chunk's {pages} pages")]
    InvalidPage { page: u32, pages: u32 },
    #[error("page {0} is already free")]
    DoubleFree(u32),
    #[error("page {0} is already taken")]
    AlreadyTaken(u32),
    #[error("chunk still has {live} live pages")]
    Busy { live: u32 },
}

pub struct ChunkHeader {
    state: AtomicU64,
    free_count: AtomicU32,
    pages: AtomicU32,
    generation: AtomicU32,
    /// Lowest bitmap word that may hold a free bit; scans start here.
    first_free: AtomicU32,
    /// One bit per page, 1 = free.
    bitmap: Box<[AtomicU64]>,
}

impl ChunkHeader {
    /// A fresh, unassigned header able to track up to `max_pages` pages.
    pub fn new(max_pages: usize) -> Self {
        ChunkHeader {
            state: AtomicU64::new(0),
            free_count: AtomicU32::new(0),
            pages: AtomicU32::new(0),
            generation: AtomicU32::new(0),
            first_free: AtomicU32::new(0),
            bitmap: (0..max_pages.div_ceil(64))
                .map(|_| AtomicU64::new(0))
                .collect(),
        }
    }

    pub fn state(&self) -> ChunkState {
        ChunkState::unpack(self.state.load(Ordering::Acquire))
    }

    pub fn free_count(&self) -> u32 {
        self.free_count.load(Ordering::Acquire)
    }

    /// Pages of the current (or most recent) class assignment.
    pub fn pages(&self) -> u32 {
        self.pages.load(Ordering::Acquire)
    }

    /// Number of Unassigned to Assigned transitions so far.
    pub fn generation(&self) -> u32 {
        self.generation.load(Ordering::Acquire)
    }

    /// Number of set (free) bits, i.e. a recount of `free_count`.
    pub fn count_free_bits(&self) -> u32 {
        self.bitmap
            .iter()
            .map(|w| w.load(Ordering::Acquire).count_ones())
            .sum()
    }

    pub fn is_page_free(&self, page: u32) -> bool {
        let word = self.bitmap[page as usize / 64].load(Ordering::Acquire);
        word & (1 << (page % 64)) != 0
    }

    /// Move an unassigned chunk into `class` with `pages` free pages and
    /// return its new generation.
    ///
    /// The caller must hold the chunk exclusively (it was just taken from a
    /// free pool); the chunk comes back in the [`Phase::Held`] phase.
    pub fn assign(&self, class: usize, pages: u32) -> Result<u32, ChunkError> {
        debug_assert!(pages >= 1 && pages as usize <= self.bitmap.len() * 64);
        let current = self.state.load(Ordering::Acquire);
        let state = ChunkState::unpack(current);
        if state.phase != Phase::Unassigned {
            return Err(ChunkError::AlreadyAssigned);
        }
        let held = ChunkState {
            phase: Phase::Held,
            class: class as u8,
            epoch: state.epoch,
        };
        self.state
            .compare_exchange(current, held.pack(), Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| ChunkError::AlreadyAssigned)?;

        let full_words = pages as usize / 64;
        for (i, word) in self.bitmap.iter().enumerate() {
            let bits = if i < full_words {
                u64::MAX
            } else if i == full_words && pages % 64 != 0 {
                (1u64 << (pages % 64)) - 1
            } else {
                0
            };
            word.store(bits, Ordering::Relaxed);
        }
        self.first_free.store(0, Ordering::Relaxed);
        self.pages.store(pages, Ordering::Release);
        self.free_count.store(pages, Ordering::Release);
        Ok(self.generation.fetch_add(1, Ordering::AcqRel) + 1)
    }

    /// Return a fully free, held chunk to the unassigned state.
    pub fn unassign(&self) -> Result<(), ChunkError> {
        let current = self.state.load(Ordering::Acquire);
        let state = ChunkState::unpack(current);
        if !state.is_assigned() {
            return Err(ChunkError::Unassigned);
        }
        let free = self.free_count();
        let pages = self.pages();
        if free != pages {
            return Err(ChunkError::Busy { live: pages - free });
        }
        let next = ChunkState {
            phase: Phase::Unassigned,
            class: 0,
            epoch: state.epoch.wrapping_add(1),
        };
        self.state
            .compare_exchange(current, next.pack(), Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
            .map_err(|_| ChunkError::Busy { live: 0 })
    }

    /// Set an unassigned chunk aside for queue segment storage.
    pub fn reserve(&self) -> Result<(), ChunkError> {
        let current = self.state.load(Ordering::Acquire);
        if ChunkState::unpack(current).phase != Phase::Unassigned {
            return Err(ChunkError::AlreadyAssigned);
        }
        let reserved = ChunkState {
            phase: Phase::Reserved,
            class: 0,
            epoch: 0,
        };
        self.state
            .compare_exchange(
                current,
                reserved.pack(),
                Ordering::AcqRel,
                Ordering::Acquire,
            )
            .map(|_| ())
            .map_err(|_| ChunkError::AlreadyAssigned)
    }

    /// Claim one free page. Returns the page and the number of free pages
    /// left right after the claim.
    pub fn acquire_page(&self) -> Result<(u32, u32), ChunkError> {
        let mut page = None;
        let remaining = self.acquire_pages(1, |p| page = Some(p));
        page.map(|p| (p, remaining)).ok_or(ChunkError::ChunkFull)
    }

    /// Claim up to `want` free pages, handing each to `sink`. Returns the
    /// free count left after the reservation; zero pages are claimed when the
    /// chunk is full.
    pub fn acquire_pages(&self, want: u32, mut sink: impl FnMut(u32)) -> u32 {
        // Reserve first so the scan below is guaranteed to find its bits:
        // releasers set the bit before bumping the count.
        let mut taken = 0;
        let reserved = self
            .free_count
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |free| {
                taken = free.min(want);
                (taken > 0).then(|| free - taken)
            });
        let Ok(before) = reserved else {
            return 0;
        };
        // The hint is only a starting point; the scan wraps, so a stale
        // hint costs time, never pages.
        let words = self.bitmap.len();
        let start = (self.first_free.load(Ordering::Relaxed) as usize).min(words - 1);
        let mut claimed = 0;
        while claimed < taken {
            for i in (start..words).chain(0..start) {
                let word = &self.bitmap[i];
                let mut bits = word.load(Ordering::Acquire);
                while bits != 0 && claimed < taken {
                    let mask = 1u64 << bits.trailing_zeros();
                    let prev = word.fetch_and(!mask, Ordering::AcqRel);
                    if prev & mask != 0 {
                        sink(i as u32 * 64 + mask.trailing_zeros());
                        claimed += 1;
                    }
                    bits = prev & !mask;
                }
                if claimed == taken {
                    let next = if bits == 0 { i + 1 } else { i };
                    self.first_free
                        .store(next.min(words - 1) as u32, Ordering::Relaxed);
                    break;
                }
            }
        }
        before - taken
    }

    /// Claim a specific page (page allocators hand out pages from their
    /// queues and mark them taken here).
    pub fn claim_page(&self, page: u32) -> Result<u32, ChunkError> {
        let pages = self.pages();
        if page >= pages {
            return Err(ChunkError::InvalidPage { page, pages });
        }
        let mask = 1u64 << (page % 64);
        let prev = self.bitmap[page as usize / 64].fetch_and(!mask, Ordering::AcqRel);
        if prev & mask == 0 {
            return Err(ChunkError::AlreadyTaken(page));
        }
        Ok(self.free_count.fetch_sub(1, Ordering::AcqRel) - 1)
    }

    /// Give a page back. Returns the free count right after the release so
    /// the caller can spot the full-to-nonfull and fully-free transitions.
    pub fn release_page(&self, page: u32) -> Result<u32, ChunkError> {
        if !self.state().is_assigned() {
            return Err(ChunkError::Unassigned);
        }
        let pages = self.pages();
        if page >= pages {
            return Err(ChunkError::InvalidPage { page, pages });
        }
        let mask = 1u64 << (page % 64);
        let prev = self.bitmap[page as usize / 64].fetch_or(mask, Ordering::AcqRel);
        if prev & mask != 0 {
            return Err(ChunkError::DoubleFree(page));
        }
        self.first_free.fetch_min(page / 64, Ordering::Relaxed);
        Ok(self.free_count.fetch_add(1, Ordering::AcqRel) + 1)
    }

    /// Whether a queue entry tagged with `epoch` still names this chunk's
    /// current stay in the `class` queue. Only the bits in `mask` of the
    /// epoch are compared.
    pub fn is_current(&self, class: usize, epoch: u32, mask: u32) -> bool {
        let state = self.state();
        state.phase == Phase::Queued
            && state.class as usize == class
            && (state.epoch ^ epoch) & mask == 0
    }

    /// Take a queued chunk of `class` out of circulation for the calling
    /// thread. Fails for stale queue entries: the chunk is not queued in
    /// `class`, or its epoch differs from `epoch` in the bits of `mask`.
    pub fn try_take(&self, class: usize, epoch: u32, mask: u32) -> bool {
        let current = self.state.load(Ordering::Acquire);
        let state = ChunkState::unpack(current);
        if state.phase != Phase::Queued
            || state.class as usize != class
            || (state.epoch ^ epoch) & mask != 0
        {
            return false;
        }
        let held = ChunkState {
            phase: Phase::Held,
            ..state
        };
        self.state
            .compare_exchange(current, held.pack(), Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    /// Mark a held chunk as queued and return the new epoch. Must be
    /// followed by an enqueue of the chunk index into its class queue.
    pub fn set_queued(&self) -> u32 {
        let prev = self
            .state
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |word| {
                let state = ChunkState::unpack(word);
                (state.phase == Phase::Held).then(|| {
                    ChunkState {
                        phase: Phase::Queued,
                        class: state.class,
                        epoch: state.epoch.wrapping_add(1),
                    }
                    .pack()
                })
            });
        let prev = prev.expect("set_queued on a chunk that is not held");
        ChunkState::unpack(prev).epoch.wrapping_add(1)
    }

    /// Retire a queued chunk whose pages are all free. The class queue may
    /// still hold its index; that entry goes stale and is skipped by
    /// [`try_take`](Self::try_take).
    pub fn try_retire(&self) -> bool {
        let current = self.state.load(Ordering::Acquire);
        let state = ChunkState::unpack(current);
        if state.phase != Phase::Queued || self.free_count() != self.pages() {
            return false;
        }
        // Acquires need the held phase, so an unchanged state word means the
        // free count above is still exact.
        let retired = ChunkState {
            phase: Phase::Unassigned,
            class: 0,
            epoch: state.epoch.wrapping_add(1),
        };
        self.state
            .compare_exchange(current, retired.pack(), Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::{Arc, Barrier};
    use std::thread;

    use rand::{rngs::StdRng, Rng, SeedableRng};

    use super::*;

    fn assigned(pages: u32) -> ChunkHeader {
        let hdr = ChunkHeader::new(4096);
        hdr.assign(6, pages).unwrap();
        hdr
    }

    #[test]
    fn assign_sets_free_pages() {
        let hdr = ChunkHeader::new(4096);
        assert_eq!(hdr.assign(6, 64), Ok(1));
        assert_eq!(hdr.free_count(), 64);
        assert_eq!(hdr.count_free_bits(), 64);
        assert_eq!(hdr.state().class_index(), Some(6));
        assert_eq!(hdr.assign(6, 64), Err(ChunkError::AlreadyAssigned));
    }

    #[test]
    fn reassign_after_full_cycle() {
        let hdr = assigned(64);
        let mut pages = Vec::new();
        while let Ok((p, _)) = hdr.acquire_page() {
            pages.push(p);
        }
        assert_eq!(pages.len(), 64);
        assert!(matches!(hdr.unassign(), Err(ChunkError::Busy { live: 64 })));
        for p in pages {
            hdr.release_page(p).unwrap();
        }
        hdr.unassign().unwrap();
        assert_eq!(hdr.assign(2, 1024), Ok(2));
        // Recount from the bitmap, independent of the counter.
        assert_eq!(hdr.count_free_bits(), 1024);
        assert_eq!(hdr.free_count(), 1024);
        assert_eq!(hdr.pages(), 1024);
    }

    #[test]
    fn sixty_four_distinct_then_full() {
        let hdr = assigned(64);
        let got: BTreeSet<u32> = (0..64).map(|_| hdr.acquire_page().unwrap().0).collect();
        assert_eq!(got, (0..64).collect());
        assert_eq!(hdr.acquire_page(), Err(ChunkError::ChunkFull));
    }

    #[test]
    fn single_page_chunk() {
        let hdr = assigned(1);
        assert_eq!(hdr.acquire_page(), Ok((0, 0)));
        assert_eq!(hdr.acquire_page(), Err(ChunkError::ChunkFull));
    }

    #[test]
    fn release_reports_occupancy() {
        let hdr = assigned(64);
        let mut page = None;
        for _ in 0..4 {
            page = Some(hdr.acquire_page().unwrap().0);
        }
        assert_eq!(page, Some(3));
        assert_eq!(hdr.release_page(3), Ok(61));
        assert_eq!(hdr.release_page(3), Err(ChunkError::DoubleFree(3)));
        assert_eq!(hdr.release_page(10), Err(ChunkError::DoubleFree(10)));
        assert!(matches!(
            hdr.release_page(64),
            Err(ChunkError::InvalidPage { .. })
        ));
    }

    #[test]
    fn release_on_unassigned_chunk() {
        let hdr = ChunkHeader::new(64);
        assert_eq!(hdr.release_page(0), Err(ChunkError::Unassigned));
    }

    #[test]
    fn random_interleave_matches_reference_bitset() {
        let mut rng = StdRng::seed_from_u64(7);
        let hdr = assigned(200);
        let mut live: Vec<u32> = Vec::new();
        let mut reference = vec![true; 200];
        for _ in 0..20_000 {
            if live.is_empty() || (rng.gen_bool(0.55) && live.len() < 200) {
                let (p, remaining) = hdr.acquire_page().unwrap();
                assert!(reference[p as usize]);
                reference[p as usize] = false;
                live.push(p);
                assert_eq!(remaining as usize, reference.iter().filter(|f| **f).count());
            } else {
                let p = live.swap_remove(rng.gen_range(0..live.len()));
                reference[p as usize] = true;
                let after = hdr.release_page(p).unwrap();
                assert_eq!(after as usize, reference.iter().filter(|f| **f).count());
            }
            assert_eq!(hdr.count_free_bits(), hdr.free_count());
        }
        for p in 0..200 {
            assert_eq!(hdr.is_page_free(p), reference[p as usize]);
        }
    }

    #[test]
    fn racing_threads_get_distinct_pages() {
        let hdr = Arc::new(assigned(32));
        let barrier = Arc::new(Barrier::new(32));
        let handles: Vec<_> = (0..32)
            .map(|_| {
                let hdr = hdr.clone();
                let barrier = barrier.clone();
                thread::spawn(move || {
                    barrier.wait();
                    hdr.acquire_page().unwrap().0
                })
            })
            .collect();
        let got: BTreeSet<u32> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(got.len(), 32);
        assert_eq!(hdr.free_count(), 0);
    }

    #[test]
    fn phase_transitions() {
        let hdr = assigned(4);
        assert!(!hdr.try_take(6, 0, 0));
        let epoch = hdr.set_queued();
        assert_eq!(hdr.state().epoch, epoch);
        assert!(!hdr.try_take(5, epoch, !0));
        let queued = hdr.state();
        assert!(hdr.try_retire());
        assert_eq!(hdr.state().phase, Phase::Unassigned);
        assert!(hdr.state().epoch > queued.epoch);

        hdr.assign(6, 4).unwrap();
        hdr.acquire_page().unwrap();
        let epoch = hdr.set_queued();
        assert!(!hdr.try_retire(), "a live page blocks retirement");
        assert!(hdr.try_take(6, epoch, !0));
        assert!(!hdr.try_take(6, epoch, !0));
    }

    #[test]
    fn superseded_entries_are_stale() {
        let hdr = assigned(4);
        let old = hdr.set_queued();
        assert!(hdr.try_retire());
        hdr.assign(6, 4).unwrap();
        let new = hdr.set_queued();
        assert!(!hdr.is_current(6, old, 0xff));
        assert!(!hdr.try_take(6, old, 0xff));
        assert!(hdr.is_current(6, new, 0xff));
        assert!(hdr.try_take(6, new, 0xff));
    }

    #[test]
    fn reserved_chunks_cannot_be_assigned() {
        let hdr = ChunkHeader::new(64);
        hdr.reserve().unwrap();
        assert_eq!(hdr.assign(0, 4), Err(ChunkError::AlreadyAssigned));
        assert_eq!(hdr.state().phase, Phase::Reserved);
    }
}
