//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Euclid, Float, FloatConst, FromPrimitive, NumAssign};

/// Real scalar the simulator, networks and samplers are generic over.
///
/// Implemented for `f32` and `f64`. Persistence always goes through `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Euclid
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, rounding to the nearest representable value.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Wraps an angle into `[0, 2π)`.
///
/// `rem_euclid` can round up to exactly `2π` for tiny negative inputs, which
/// is folded back to zero.
#[inline]
pub fn wrap_phase<T: Real>(theta: T) -> T {
    let two_pi = T::TAU();
    let w = theta.rem_euclid(&two_pi);
    if w >= two_pi {
        T::zero()
    } else {
        w
    }
}

/// Wraps an angle difference into `[-π, π)`.
#[inline]
pub fn wrap_to_pi<T: Real>(delta: T) -> T {
    wrap_phase(delta + T::PI()) - T::PI()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_stays_in_range() {
        for &x in &[-1e-17_f64, -7.0, 0.0, std::f64::consts::TAU, 13.0, -std::f64::consts::TAU] {
            let w = wrap_phase(x);
            assert!((0.0..std::f64::consts::TAU).contains(&w), "{x} -> {w}");
        }
        assert_eq!(wrap_phase(-1e-17_f64), 0.0);
    }

    #[test]
    fn wrap_to_pi_is_symmetric_interval() {
        assert!((wrap_to_pi(3.5_f64) - (3.5 - std::f64::consts::TAU)).abs() < 1e-12);
        assert!((wrap_to_pi(-0.25_f64) + 0.25).abs() < 1e-15);
    }
}
