//! Counter-based Gaussian stream for reproducible parallel Monte Carlo.
//!
//! Every trajectory owns a stateless stream keyed by `(seed, trajectory
//! index)`; the normal draw for `(step k, mode j)` is a pure function of the
//! key and a counter, so results do not depend on evaluation order or thread
//! count, and coupled simulations can replay the exact same increments.

use crate::dynamics::TimeGrid;
use crate::scalar::Real;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trajectory stateless random stream.
#[derive(Debug, Clone, Copy)]
pub struct PathRng {
    key: u64,
}

impl PathRng {
    pub fn new(seed: u64, trajectory_index: u64) -> Self {
        let key = mix64(seed ^ mix64(trajectory_index.wrapping_add(1).wrapping_mul(GOLDEN)));
        Self { key }
    }

    #[inline]
    fn u64_at(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform in `(0, 1]` from counter `c`.
    #[inline]
    fn uniform_at(&self, counter: u64) -> f64 {
        (((self.u64_at(counter) >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal pair from counters `2c`, `2c+1` (Box–Muller).
    #[inline]
    pub fn normal_pair(&self, c: u64) -> (f64, f64) {
        let u1 = self.uniform_at(2 * c);
        let u2 = self.uniform_at(2 * c + 1);
        let mag = (-2.0 * u1.ln()).sqrt();
        let (s, co) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        (mag * co, mag * s)
    }

    /// Fills `out` with the `N` per-mode increments of step `k`: i.i.d.
    /// `N(0, dt)` scaled by `sqrt_dt`.
    #[inline]
    pub fn fill_increments<T: Real>(&self, step: usize, sqrt_dt: T, out: &mut [T]) {
        let n = out.len();
        let pairs = n.div_ceil(2) as u64;
        let base = step as u64 * pairs;
        for p in 0..pairs {
            let (z1, z2) = self.normal_pair(base + p);
            let i = (2 * p) as usize;
            out[i] = T::of(z1) * sqrt_dt;
            if i + 1 < n {
                out[i + 1] = T::of(z2) * sqrt_dt;
            }
        }
    }
}

/// All noise increments of one trajectory: `n_steps` vectors of length
/// `n_modes` with per-mode variance `dt`.
pub fn draw_increments<T: Real>(
    seed: u64,
    trajectory_index: u64,
    grid: &TimeGrid<T>,
    n_modes: usize,
) -> Vec<Vec<T>> {
    let rng = PathRng::new(seed, trajectory_index);
    let sqrt_dt = grid.dt().sqrt();
    (0..grid.n_steps())
        .map(|k| {
            let mut row = vec![T::zero(); n_modes];
            rng.fill_increments(k, sqrt_dt, &mut row);
            row
        })
        .collect()
}
