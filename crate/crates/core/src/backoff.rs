//! Retry policy between failed acquisition rounds.

use std::sync::atomic::{fence, Ordering};
use std::time::Duration;

use crate::config::BackoffMode;

pub const SLEEP_BASE: Duration = Duration::from_nanos(100);
pub const SLEEP_CAP: Duration = Duration::from_micros(100);

/// What one backoff step does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackoffAction {
    /// Sequentially consistent fence, then yield the processor.
    FenceYield,
    Sleep(Duration),
}

#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    mode: BackoffMode,
    base: Duration,
    cap: Duration,
}

impl Backoff {
    pub fn new(mode: BackoffMode) -> Self {
        Backoff {
            mode,
            base: SLEEP_BASE,
            cap: SLEEP_CAP,
        }
    }

    pub fn with_sleep(mode: BackoffMode, base: Duration, cap: Duration) -> Self {
        Backoff { mode, base, cap }
    }

    pub fn mode(&self) -> BackoffMode {
        self.mode
    }

    /// The step taken before retry number `attempt` (counted from 1).
    pub fn action(&self, attempt: u32) -> BackoffAction {
        match self.mode {
            BackoffMode::FenceRetry => BackoffAction::FenceYield,
            BackoffMode::SleepRetry => {
                let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
                let nanos = (self.base.as_nanos() as u64).saturating_mul(factor as u64);
                BackoffAction::Sleep(Duration::from_nanos(nanos).min(self.cap))
            }
        }
    }

    pub fn wait(&self, attempt: u32) {
        match self.action(attempt) {
            BackoffAction::FenceYield => {
                fence(Ordering::SeqCst);
                std::thread::yield_now();
            }
            BackoffAction::Sleep(d) => std::thread::sleep(d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fence_mode_never_sleeps() {
        let b = Backoff::new(BackoffMode::FenceRetry);
        for attempt in [1, 2, 30, u32::MAX] {
            assert_eq!(b.action(attempt), BackoffAction::FenceYield);
        }
    }

    #[test]
    fn sleep_doubles_then_caps() {
        let b = Backoff::new(BackoffMode::SleepRetry);
        assert_eq!(b.action(1), BackoffAction::Sleep(Duration::from_nanos(200)));
        assert_eq!(b.action(2), BackoffAction::Sleep(Duration::from_nanos(400)));
        assert_eq!(
            b.action(9),
            BackoffAction::Sleep(Duration::from_nanos(51_200))
        );
        assert_eq!(b.action(10), BackoffAction::Sleep(SLEEP_CAP));
        assert_eq!(b.action(30), BackoffAction::Sleep(SLEEP_CAP));
        assert_eq!(b.action(200), BackoffAction::Sleep(SLEEP_CAP));
    }
}
