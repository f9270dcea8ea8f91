use core::cell::Cell;

use serde::{Deserialize, Serialize};

/// Microseconds since the Unix epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn micros_since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

pub trait Clock {
    fn now(&self) -> Timestamp;
}

/// A clock that advances by a fixed step on every read. Used by tests and by
/// replay tooling where wall time must not leak into results.
#[derive(Debug, Default)]
pub struct StepClock {
    current: Cell<u64>,
    step: u64,
}

impl StepClock {
    pub fn new(start: u64, step: u64) -> Self {
        StepClock {
            current: Cell::new(start),
            step,
        }
    }
}

impl Clock for StepClock {
    fn now(&self) -> Timestamp {
        let t = self.current.get();
        self.current.set(t + self.step);
        Timestamp(t)
    }
}
