//! Order-stable summation and the Monte-Carlo estimate record.
//!
//! Reductions are pairwise over a fixed index order, so results are
//! bit-identical regardless of how many threads produced the inputs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Pairwise (cascade) summation.
pub fn pairwise_sum<T: Real>(values: &[T]) -> T {
    if values.len() <= 8 {
        let mut acc = T::zero();
        for &v in values {
            acc += v;
        }
        acc
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Mean and standard error of the mean.
pub fn mean_stderr<T: Real>(values: &[T]) -> (T, T) {
    let n = values.len();
    if n == 0 {
        return (T::zero(), T::zero());
    }
    let mean = pairwise_sum(values) / T::of_usize(n);
    if n == 1 {
        return (mean, T::zero());
    }
    let sq: Vec<T> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / T::of_usize(n - 1);
    (mean, (var / T::of_usize(n)).sqrt())
}

/// Sample excess kurtosis; a heavy-tail diagnostic for weighted estimators.
pub fn excess_kurtosis<T: Real>(values: &[T]) -> T {
    let n = values.len();
    if n < 4 {
        return T::zero();
    }
    let mean = pairwise_sum(values) / T::of_usize(n);
    let m2: Vec<T> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    let m4: Vec<T> = m2.iter().map(|&s| s * s).collect();
    let v2 = pairwise_sum(&m2) / T::of_usize(n);
    let v4 = pairwise_sum(&m4) / T::of_usize(n);
    if v2 == T::zero() {
        return T::zero();
    }
    v4 / (v2 * v2) - T::of(3.0)
}

/// Monte-Carlo mean with standard error, sample counts and a 95% interval.
#[derive(Debug, Clone, Serialize)]
pub struct McEstimate<T> {
    pub mean: T,
    pub stderr: T,
    pub n_samples: usize,
    pub n_excluded: usize,
    pub ci95: (T, T),
    /// Exclusion rate above 0.1% marks the estimate as suspect.
    pub exclusion_flagged: bool,
}

impl<T: Real> McEstimate<T> {
    /// Builds the estimate from per-trajectory values, recording how many
    /// trajectories were excluded (blown up). Errors if nothing survived.
    pub fn from_values(values: &[T], n_excluded: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EstimationFailure(format!(
                "all {n_excluded} trajectories excluded"
            )));
        }
        let (mean, stderr) = mean_stderr(values);
        Ok(Self::from_moments(mean, stderr, values.len(), n_excluded))
    }

    pub fn from_moments(mean: T, stderr: T, n_samples: usize, n_excluded: usize) -> Self {
        let half = T::of(1.96) * stderr;
        let total = n_samples + n_excluded;
        let exclusion_flagged =
            total > 0 && T::of_usize(n_excluded) > T::of(1e-3) * T::of_usize(total);
        Self {
            mean,
            stderr,
            n_samples,
            n_excluded,
            ci95: (mean - half, mean + half),
            exclusion_flagged,
        }
    }

    /// `√(se₁² + se₂²)` for difference tests.
    pub fn combined_stderr(&self, other: &Self) -> T {
        (self.stderr * self.stderr + other.stderr * other.stderr).sqrt()
    }
}
