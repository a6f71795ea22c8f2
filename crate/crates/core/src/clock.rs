//! Simulated and wall clocks.
//!
//! All timekeeping inside the service uses integer nanoseconds so that
//! scheduled events fire at exact instants and replays are bit-reproducible.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::{Add, Sub};
use std::time::Instant;

/// An instant on the service timeline, in nanoseconds since the run started.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime {
    nanos: u64,
}

/// A span of simulated time, in nanoseconds.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimDuration {
    nanos: u64,
}

impl SimTime {
    pub const ZERO: SimTime = SimTime { nanos: 0 };

    pub fn from_nanos(nanos: u64) -> Self {
        SimTime { nanos }
    }

    pub fn as_nanos(self) -> u64 {
        self.nanos
    }

    pub fn as_secs_f64(self) -> f64 {
        self.nanos as f64 / 1e9
    }

    /// Elapsed span since `earlier`; saturates at zero if `earlier` is later.
    pub fn since(self, earlier: SimTime) -> SimDuration {
        SimDuration {
            nanos: self.nanos.saturating_sub(earlier.nanos),
        }
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration { nanos: 0 };

    pub fn from_nanos(nanos: u64) -> Self {
        SimDuration { nanos }
    }

    /// Converts seconds to a duration, rounding to the nearest nanosecond.
    /// Negative and non-finite inputs clamp to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        if !secs.is_finite() || secs <= 0.0 {
            return SimDuration::ZERO;
        }
        SimDuration {
            nanos: (secs * 1e9).round() as u64,
        }
    }

    pub fn as_nanos(self) -> u64 {
        self.nanos
    }

    pub fn as_secs_f64(self) -> f64 {
        self.nanos as f64 / 1e9
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime {
            nanos: self.nanos.saturating_add(rhs.nanos),
        }
    }
}

impl Sub<SimTime> for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        self.since(rhs)
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}s", self.as_secs_f64())
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}", self.as_secs_f64())
    }
}

impl fmt::Debug for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}s", self.as_secs_f64())
    }
}

/// Which clock drives the run. Virtual time is the default for tests and
/// scenario runs; wall time exists for live demo serving.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    Virtual,
    Wall,
}

/// Source of "now" for the fleet and orchestrator.
#[derive(Debug)]
pub enum Clock {
    Virtual { now: SimTime },
    Wall { origin: Instant },
}

impl Clock {
    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Virtual => Clock::Virtual { now: SimTime::ZERO },
            ClockMode::Wall => Clock::Wall {
                origin: Instant::now(),
            },
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            Clock::Virtual { .. } => ClockMode::Virtual,
            Clock::Wall { .. } => ClockMode::Wall,
        }
    }

    pub fn now(&self) -> SimTime {
        match self {
            Clock::Virtual { now } => *now,
            Clock::Wall { origin } => SimTime::from_nanos(origin.elapsed().as_nanos() as u64),
        }
    }

    /// Moves a virtual clock forward to `target`. Never moves backwards.
    /// No-op on a wall clock.
    pub(crate) fn advance_to(&mut self, target: SimTime) {
        if let Clock::Virtual { now } = self {
            if target > *now {
                *now = target;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duration_round_trips_through_nanos() {
        let d = SimDuration::from_secs_f64(70.517);
        assert_eq!(d.as_nanos(), 70_517_000_000);
        assert!((d.as_secs_f64() - 70.517).abs() < 1e-9);
    }

    #[test]
    fn negative_seconds_clamp_to_zero() {
        assert_eq!(SimDuration::from_secs_f64(-1.0), SimDuration::ZERO);
        assert_eq!(SimDuration::from_secs_f64(f64::NAN), SimDuration::ZERO);
    }

    #[test]
    fn virtual_clock_never_rewinds() {
        let mut c = Clock::new(ClockMode::Virtual);
        c.advance_to(SimTime::from_nanos(100));
        c.advance_to(SimTime::from_nanos(50));
        assert_eq!(c.now(), SimTime::from_nanos(100));
    }

    #[test]
    fn exact_additivity() {
        let t0 = SimTime::from_nanos(123_456_789);
        let d = SimDuration::from_secs_f64(70.517);
        let t1 = t0 + d;
        assert_eq!(t1 - t0, d);
    }
}
