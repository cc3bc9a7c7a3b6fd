//! Warp-style coalesced allocation for groups of cooperating threads.
//!
//! A [`LaneGroup`] binds `width` threads (lanes). [`LaneGroup::active_mask`]
//! is a collective OR-reduction of `1 << lane` over the lanes that want to
//! allocate; every lane must call it. [`LaneGroup::alloc_coalesced`] is then
//! called by the active lanes only: the lowest active lane allocates pages
//! for all of them in one batch and each lane picks its page by its rank in
//! the mask.

use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::alloc::{AllocError, Allocator};
use crate::arena::PageHandle;

pub const MAX_WIDTH: usize = 64;
pub const DEFAULT_WIDTH: usize = 32;

/// Bit `i` set iff lane `i` is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActiveMask(pub u64);

impl ActiveMask {
    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn contains(self, lane: usize) -> bool {
        lane < MAX_WIDTH && self.0 >> lane & 1 == 1
    }

    /// Lowest active lane.
    pub fn leader(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    /// Number of active lanes below `lane`.
    pub fn rank(self, lane: usize) -> usize {
        (self.0 & ((1u64 << lane) - 1)).count_ones() as usize
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum CoalesceError {
    #[error("lane {lane} timed out waiting for the group")]
    Timeout { lane: usize },
    #[error("lane {lane} out of range for a group of width {width}")]
    InvalidLane { lane: usize, width: usize },
    #[error("lane {lane} is not in the active mask")]
    NotActive { lane: usize },
    #[error("empty active mask")]
    EmptyMask,
    #[error("group width {0} outside 1..=64")]
    Width(usize),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

#[derive(Debug)]
struct GroupState {
    // Mask reduction.
    generation: u64,
    arrived: usize,
    accumulated: u64,
    reduced: u64,
    broken: bool,
    // Leader to follower hand-off.
    round: u64,
    seen: Vec<u64>,
    busy: bool,
    pending: usize,
    granted: ActiveMask,
    grant: Result<Vec<PageHandle>, AllocError>,
}

pub struct LaneGroup {
    width: usize,
    timeout: Duration,
    state: Mutex<GroupState>,
    changed: Condvar,
}

impl std::fmt::Debug for LaneGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LaneGroup")
            .field("width", &self.width)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl LaneGroup {
    pub fn new(width: usize, timeout: Duration) -> Result<LaneGroup, CoalesceError> {
        if width == 0 || width > MAX_WIDTH {
            return Err(CoalesceError::Width(width));
        }
        Ok(LaneGroup {
            width,
            timeout,
            state: Mutex::new(GroupState {
                generation: 0,
                arrived: 0,
                accumulated: 0,
                reduced: 0,
                broken: false,
                round: 0,
                seen: vec![0; width],
                busy: false,
                pending: 0,
                granted: ActiveMask(0),
                grant: Ok(Vec::new()),
            }),
            changed: Condvar::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// A group whose rendezvous timed out stays broken; every later call
    /// fails fast with [`CoalesceError::Timeout`].
    pub fn is_broken(&self) -> bool {
        self.lock().broken
    }

    fn lock(&self) -> MutexGuard<'_, GroupState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn check_lane(&self, lane: usize) -> Result<(), CoalesceError> {
        if lane >= self.width {
            return Err(CoalesceError::InvalidLane {
                lane,
                width: self.width,
            });
        }
        Ok(())
    }

    /// Wait on the condition variable until `done` holds, the group breaks
    /// or the deadline passes (which breaks the group).
    fn wait_until<'a>(
        &self,
        mut state: MutexGuard<'a, GroupState>,
        lane: usize,
        deadline: Instant,
        mut done: impl FnMut(&GroupState) -> bool,
    ) -> Result<MutexGuard<'a, GroupState>, CoalesceError> {
        loop {
            if done(&state) {
                return Ok(state);
            }
            if state.broken {
                return Err(CoalesceError::Timeout { lane });
            }
            let now = Instant::now();
            if now >= deadline {
                state.broken = true;
                self.changed.notify_all();
                log::warn!("lane {lane} gave up on its group after {:?}", self.timeout);
                return Err(CoalesceError::Timeout { lane });
            }
            state = self
                .changed
                .wait_timeout(state, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Collective OR of `1 << lane` over the active lanes. All `width`
    /// lanes must call this; a lane that never arrives makes the others
    /// fail with [`CoalesceError::Timeout`] instead of hanging.
    pub fn active_mask(&self, lane: usize, active: bool) -> Result<ActiveMask, CoalesceError> {
        self.check_lane(lane)?;
        let deadline = Instant::now() + self.timeout;
        let mut state = self.lock();
        if state.broken {
            return Err(CoalesceError::Timeout { lane });
        }
        state.accumulated |= u64::from(active) << lane;
        state.arrived += 1;
        if state.arrived == self.width {
            state.reduced = state.accumulated;
            state.accumulated = 0;
            state.arrived = 0;
            state.generation += 1;
            self.changed.notify_all();
            return Ok(ActiveMask(state.reduced));
        }
        let generation = state.generation;
        // The next reduction cannot complete without this lane, so
        // `reduced` still holds this generation's result on wake-up.
        let state = self.wait_until(state, lane, deadline, |s| s.generation != generation)?;
        Ok(ActiveMask(state.reduced))
    }

    /// Allocate one page of `bytes` for each lane in `mask`. Called by the
    /// active lanes only. Either every active lane gets a page or every one
    /// gets the same error.
    pub fn alloc_coalesced(
        &self,
        allocator: &Allocator,
        lane: usize,
        mask: ActiveMask,
        bytes: usize,
    ) -> Result<PageHandle, CoalesceError> {
        self.check_lane(lane)?;
        let leader = mask.leader().ok_or(CoalesceError::EmptyMask)?;
        if mask.0.checked_shr(self.width as u32).unwrap_or(0) != 0 {
            return Err(CoalesceError::InvalidLane {
                lane: 63 - mask.0.leading_zeros() as usize,
                width: self.width,
            });
        }
        if !mask.contains(lane) {
            return Err(CoalesceError::NotActive { lane });
        }
        let deadline = Instant::now() + self.timeout;
        let state = self.lock();
        if lane == leader {
            // Wait for the previous hand-off to be fully picked up.
            let mut state =
                self.wait_until(state, lane, deadline, |s| !s.busy && s.pending == 0)?;
            state.busy = true;
            drop(state);

            let mut pages = Vec::with_capacity(mask.count() as usize);
            let grant = allocator
                .alloc_many(bytes, mask.count() as usize, &mut pages)
                .map(|()| pages);

            let mut state = self.lock();
            state.busy = false;
            state.round += 1;
            let round = state.round;
            state.seen[lane] = round;
            state.pending = mask.count() as usize - 1;
            state.granted = mask;
            state.grant = grant;
            self.changed.notify_all();
            let mine = state.grant.as_ref().map(|p| p[0]).map_err(|e| *e);
            return mine.map_err(CoalesceError::Alloc);
        }
        let seen = state.seen[lane];
        let mut state = self.wait_until(state, lane, deadline, |s| {
            s.round > seen && s.pending > 0 && !s.busy && s.granted.contains(lane)
        })?;
        state.seen[lane] = state.round;
        state.pending -= 1;
        let mine = state
            .grant
            .as_ref()
            .map(|p| p[mask.rank(lane)])
            .map_err(|e| *e);
        if state.pending == 0 {
            self.changed.notify_all();
        }
        mine.map_err(CoalesceError::Alloc)
    }
}
