use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// Virtual time in whole microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    /// Rounds to the nearest microsecond; negative and non-finite inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if !s.is_finite() || s <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((s * 1e6).round() as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}s", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

/// `k`-th point of a period of `bits / rate_bps` seconds after `start`,
/// computed from `k` directly so rounding never accumulates.
pub(crate) fn periodic(start: SimTime, k: u64, bits: u64, rate_bps: f64) -> SimTime {
    let offset = (k as f64 * bits as f64 * 1e6 / rate_bps).round() as u64;
    SimTime(start.0 + offset)
}

/// Whole periods of `bits / rate_bps` seconds that fit in `[start, stop]`.
pub(crate) fn period_count(start: SimTime, stop: SimTime, bits: u64, rate_bps: f64) -> u64 {
    if stop <= start {
        return 0;
    }
    let exact = (stop.0 - start.0) as f64 * rate_bps / (bits as f64 * 1e6);
    // Guard against 0.9999999 from binary rounding of an exact ratio.
    (exact + 1e-9).floor() as u64
}
