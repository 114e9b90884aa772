//! Fixed-point quantities used throughout the model.
//!
//! Delays are kept in whole microseconds and CPU shares in millicores so that
//! path sums, tie-breaks and compensation arithmetic are exact.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// A non-negative duration in whole microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Micros(pub u64);

impl Micros {
    pub const ZERO: Micros = Micros(0);

    /// Converts a millisecond value, rounding to the nearest microsecond.
    /// Negative and non-finite input saturates to zero.
    pub fn from_millis_f64(ms: f64) -> Self {
        if !ms.is_finite() || ms <= 0.0 {
            return Micros(0);
        }
        Micros((ms * 1000.0).round() as u64)
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn half(self) -> Self {
        Micros(self.0 / 2)
    }

    pub fn saturating_sub(self, other: Micros) -> Micros {
        Micros(self.0.saturating_sub(other.0))
    }
}

impl Add for Micros {
    type Output = Micros;
    fn add(self, rhs: Micros) -> Micros {
        Micros(self.0 + rhs.0)
    }
}

impl Sub for Micros {
    type Output = Micros;
    fn sub(self, rhs: Micros) -> Micros {
        Micros(self.0 - rhs.0)
    }
}

impl std::iter::Sum for Micros {
    fn sum<I: Iterator<Item = Micros>>(iter: I) -> Micros {
        iter.fold(Micros::ZERO, Add::add)
    }
}

impl fmt::Display for Micros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.as_millis_f64())
    }
}

/// CPU share in thousandths of a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Millicores(pub u64);

impl Millicores {
    pub fn from_cores_f64(cores: f64) -> Self {
        if !cores.is_finite() || cores <= 0.0 {
            return Millicores(0);
        }
        Millicores((cores * 1000.0).round() as u64)
    }

    pub fn as_cores_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Millicores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_cores_f64())
    }
}

pub const MIB: u64 = 1024 * 1024;

/// Converts a mebibyte figure (possibly fractional) to bytes.
pub fn mib_to_bytes(mib: f64) -> u64 {
    if !mib.is_finite() || mib <= 0.0 {
        return 0;
    }
    (mib * MIB as f64).round() as u64
}

pub fn bytes_to_mib(bytes: u64) -> f64 {
    bytes as f64 / MIB as f64
}

/// Rounds to nine decimals so that decimal document values survive a
/// value -> probability -> value round trip bit-for-bit.
pub(crate) fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Probability(f64);

impl Probability {
    pub const ZERO: Probability = Probability(0.0);
    pub const CERTAIN: Probability = Probability(1.0);

    /// Returns `None` when `p` is outside `[0, 1]` or not finite.
    pub fn new(p: f64) -> Option<Self> {
        (p.is_finite() && (0.0..=1.0).contains(&p)).then_some(Probability(p))
    }

    pub fn from_percent(pct: f64) -> Option<Self> {
        Self::new(pct / 100.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn as_percent(self) -> f64 {
        round9(self.0 * 100.0)
    }

    /// Probability that an event with per-stage probabilities `ps` happens at
    /// least once, assuming independent stages: `1 - prod(1 - p_i)`.
    pub fn any_of<I: IntoIterator<Item = Probability>>(ps: I) -> Probability {
        let survive: f64 = ps.into_iter().map(|p| 1.0 - p.0).product();
        Probability((1.0 - survive).clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micros_round_trip_through_millis() {
        for ms in [0.0, 0.7, 1.0, 9.3, 12.0, 50.0, 0.001] {
            let us = Micros::from_millis_f64(ms);
            assert_eq!(Micros::from_millis_f64(us.as_millis_f64()), us);
        }
        assert_eq!(Micros::from_millis_f64(-3.0), Micros::ZERO);
        assert_eq!(Micros::from_millis_f64(9.3), Micros(9300));
    }

    #[test]
    fn probability_bounds() {
        assert!(Probability::new(1.1).is_none());
        assert!(Probability::new(-0.01).is_none());
        assert!(Probability::new(f64::NAN).is_none());
        assert_eq!(Probability::from_percent(100.0), Some(Probability::CERTAIN));
    }

    #[test]
    fn percent_round_trip_is_exact() {
        for pct in [0.0, 7.0, 20.0, 33.3, 0.01, 99.999, 100.0] {
            let p = Probability::from_percent(pct).unwrap();
            assert_eq!(p.as_percent(), pct);
            assert_eq!(Probability::from_percent(p.as_percent()), Some(p));
        }
    }

    #[test]
    fn two_hop_loss() {
        let p = Probability::new(0.2).unwrap();
        let agg = Probability::any_of([p, p]);
        assert!((agg.value() - 0.36).abs() < 1e-12);
        assert_eq!(Probability::any_of([]), Probability::ZERO);
    }
}
