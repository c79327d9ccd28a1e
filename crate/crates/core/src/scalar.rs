//! Scalar abstraction: everything in this crate is generic over the working
//! float type through [`Real`], with `f64` aliases re-exported at the crate
//! root.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar usable throughout the crate (`f32` or `f64`).
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;

    /// Conversion from a count.
    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }

    /// Lossy conversion to `f64` for reporting.
    fn to_f64_lossy(self) -> f64;

    /// `|r|^p` with fast paths for small-integer and half-integer exponents.
    ///
    /// The polynomial drift families all use exponents in 0.5 steps, and
    /// `powf` dominates the step cost otherwise.
    fn abs_powf(self, p: Self) -> Self {
        let a = self.abs();
        let p64 = p.to_f64_lossy();
        let twice = 2.0 * p64;
        if (0.0..=16.0).contains(&twice) && twice.fract() == 0.0 {
            let half_steps = twice as i32;
            let whole = half_steps / 2;
            let mut out = a.powi(whole);
            if half_steps % 2 == 1 {
                out *= a.sqrt();
            }
            out
        } else {
            a.powf(p)
        }
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_powf_matches_powf() {
        for &p in &[0.5f64, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 2.3] {
            for &r in &[-3.25f64, -1.0, -1e-3, 0.0, 0.7, 2.0, 11.5] {
                let fast = r.abs_powf(p);
                let slow = r.abs().powf(p);
                assert!(
                    (fast - slow).abs() <= 1e-12 * (1.0 + slow),
                    "p={p} r={r}: {fast} vs {slow}"
                );
            }
        }
    }
}
