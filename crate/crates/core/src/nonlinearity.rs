//! Drift nonlinearity `l`, its derivative and antiderivative, the energy
//! functional, and a numeric certifier for the structural conditions the
//! estimators and bounds rely on:
//!
//! ```text
//! (1) l′ ≥ 0,  |l(r)| ≤ K₁|r|^ρ + K₂,  |l′(r)| ≤ K₃|r|^{ρ−1} + K₄
//! (2) j(x) = ∫₀ˣ l ≥ K₅|x|^{ρ+1}
//! (3) a ρ-dependent modulus-of-continuity bound on l′
//! ```
//!
//! For ρ > 2 the modulus bound is enforced with `max(|r₁|,|r₂|)^{ρ−2}`; the
//! variant with the minimum is vacuous for the polynomial family (take
//! `r₂ = 0`), and every downstream expansion uses the max side.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spectral::{Field, SpectralSpace, State};

/// Closures for a user-supplied drift family.
#[derive(Clone)]
pub struct CustomFamily<T> {
    pub name: String,
    pub l: Arc<dyn Fn(T) -> T + Send + Sync>,
    pub l_prime: Arc<dyn Fn(T) -> T + Send + Sync>,
    pub antiderivative: Arc<dyn Fn(T) -> T + Send + Sync>,
}

impl<T> fmt::Debug for CustomFamily<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomFamily({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum Family<T> {
    /// `l(r) = |r|^{ρ−1} r`.
    KleinGordon,
    /// `l ≡ 0`.
    LinearZero,
    /// User-supplied pointwise functions; constants must be certified by
    /// [`check_conditions`] before the bounds mean anything.
    Custom(CustomFamily<T>),
}

impl<T> Family<T> {
    pub fn name(&self) -> &str {
        match self {
            Family::KleinGordon => "klein_gordon",
            Family::LinearZero => "linear_zero",
            Family::Custom(c) => &c.name,
        }
    }
}

/// Drift family with growth exponent and structural constants.
#[derive(Debug, Clone)]
pub struct NonlinearityParams<T> {
    pub family: Family<T>,
    pub rho: T,
    pub k1: T,
    pub k2: T,
    pub k3: T,
    pub k4: T,
    pub k5: T,
    pub c1: T,
    pub c2: T,
    pub c3: T,
    pub c4: T,
    pub c5: T,
    /// Hölder exponent of the `C₃` term, in `(0, 1)`.
    pub w: T,
    /// Hölder exponent of the `C₅` term at ρ = 1, in `(0, 1]`.
    pub gamma: T,
}

impl<T: Real> NonlinearityParams<T> {
    /// `l(r) = |r|^{ρ−1} r` with its certified constants:
    /// `K₁ = 1, K₃ = ρ, K₅ = 1/(ρ+1)`, and the modulus constant
    /// `C₁ = ρ(ρ−1)` (ρ > 2), `C₄ = ρ` (ρ ∈ (1,2]) or `C₅ = 0` (ρ = 1).
    pub fn klein_gordon(rho: T) -> Result<Self> {
        if !(rho >= T::one()) {
            return Err(Error::InvalidConfig(format!("rho = {rho} must be ≥ 1")));
        }
        let mut p = Self {
            family: Family::KleinGordon,
            rho,
            k1: T::one(),
            k2: T::zero(),
            k3: rho,
            k4: T::zero(),
            k5: T::one() / (rho + T::one()),
            c1: T::zero(),
            c2: T::zero(),
            c3: T::zero(),
            c4: T::zero(),
            c5: T::zero(),
            w: T::of(0.5),
            gamma: T::one(),
        };
        if rho > T::of(2.0) {
            p.c1 = rho * (rho - T::one());
        } else if rho > T::one() {
            p.c4 = rho;
        }
        Ok(p)
    }

    /// `l ≡ 0`; every constant vanishes.
    pub fn linear_zero() -> Self {
        Self {
            family: Family::LinearZero,
            rho: T::one(),
            k1: T::zero(),
            k2: T::zero(),
            k3: T::zero(),
            k4: T::zero(),
            k5: T::zero(),
            c1: T::zero(),
            c2: T::zero(),
            c3: T::zero(),
            c4: T::zero(),
            c5: T::zero(),
            w: T::of(0.5),
            gamma: T::one(),
        }
    }

    pub fn l(&self, r: T) -> T {
        match &self.family {
            Family::KleinGordon => {
                if self.rho == T::one() {
                    r
                } else {
                    r * r.abs_powf(self.rho - T::one())
                }
            }
            Family::LinearZero => T::zero(),
            Family::Custom(c) => (c.l)(r),
        }
    }

    /// `l′`; at the cusp `r = 0` (ρ ∈ (1,2)) the value is 0.
    pub fn l_prime(&self, r: T) -> T {
        match &self.family {
            Family::KleinGordon => {
                if self.rho == T::one() {
                    T::one()
                } else {
                    self.rho * r.abs_powf(self.rho - T::one())
                }
            }
            Family::LinearZero => T::zero(),
            Family::Custom(c) => (c.l_prime)(r),
        }
    }

    /// Antiderivative `j(r) = ∫₀ʳ l`.
    pub fn antiderivative(&self, r: T) -> T {
        match &self.family {
            Family::KleinGordon => r.abs_powf(self.rho + T::one()) / (self.rho + T::one()),
            Family::LinearZero => T::zero(),
            Family::Custom(c) => (c.antiderivative)(r),
        }
    }

    /// `Some(c)` when `l(r) = c·r` exactly, enabling coefficient-space drift
    /// evaluation without grid transforms.
    pub fn linear_coefficient(&self) -> Option<T> {
        match &self.family {
            Family::LinearZero => Some(T::zero()),
            Family::KleinGordon if self.rho == T::one() => Some(T::one()),
            _ => None,
        }
    }

    /// `Some(c)` when `l′ ≡ c`.
    pub fn l_prime_constant(&self) -> Option<T> {
        self.linear_coefficient()
    }
}

/// One inequality violation found on the check grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Violation<T> {
    pub condition: String,
    pub r1: T,
    pub r2: Option<T>,
    pub lhs: T,
    pub rhs: T,
    /// Relative excess `(lhs − rhs) / max(1, |lhs|, |rhs|)`.
    pub excess: T,
    /// Absolute excess `lhs − rhs` (ranking key for the report).
    pub abs_excess: T,
}

/// Outcome of a structural-condition sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConditionReport<T> {
    pub passed: bool,
    pub worst_violations: Vec<Violation<T>>,
    pub n_points: usize,
    pub n_pairs: usize,
}

const REL_SLACK: f64 = 1e-12;

fn record<T: Real>(
    worst: &mut Vec<Violation<T>>,
    condition: &str,
    r1: T,
    r2: Option<T>,
    lhs: T,
    rhs: T,
) {
    let scale = T::one().max(lhs.abs()).max(rhs.abs());
    let excess = (lhs - rhs) / scale;
    if excess > T::of(REL_SLACK) {
        worst.push(Violation {
            condition: condition.to_string(),
            r1,
            r2,
            lhs,
            rhs,
            excess,
            abs_excess: lhs - rhs,
        });
    }
}

/// All ordered grid pairs plus near-diagonal companions `(r, r·(1+1e−4))`,
/// which carry the supremum of the modulus ratio for smooth families.
fn condition_pairs<T: Real>(r_grid: &[T]) -> Vec<(T, T)> {
    let mut pairs = Vec::new();
    for (i, &r1) in r_grid.iter().enumerate() {
        for &r2 in &r_grid[i + 1..] {
            pairs.push((r1, r2));
        }
        if r1 != T::zero() {
            pairs.push((r1, r1 * (T::one() + T::of(1e-4))));
        }
    }
    pairs
}

/// Evaluates conditions (1)–(3) on `r_grid` (pairwise for the modulus
/// condition). Passes iff no inequality is violated beyond a relative
/// `1e−12` slack.
pub fn check_conditions<T: Real>(
    params: &NonlinearityParams<T>,
    r_grid: &[T],
) -> Result<ConditionReport<T>> {
    if r_grid.is_empty() {
        return Err(Error::InvalidConfig("empty check grid".into()));
    }
    let rho = params.rho;
    let mut worst: Vec<Violation<T>> = Vec::new();

    for &r in r_grid {
        let lp = params.l_prime(r);
        record(&mut worst, "monotonicity l' >= 0", r, None, -lp, T::zero());
        record(
            &mut worst,
            "growth |l(r)| <= K1|r|^rho + K2",
            r,
            None,
            params.l(r).abs(),
            params.k1 * r.abs_powf(rho) + params.k2,
        );
        record(
            &mut worst,
            "growth |l'(r)| <= K3|r|^(rho-1) + K4",
            r,
            None,
            lp.abs(),
            params.k3 * r.abs_powf(rho - T::one()) + params.k4,
        );
        record(
            &mut worst,
            "coercivity j(r) >= K5|r|^(rho+1)",
            r,
            None,
            params.k5 * r.abs_powf(rho + T::one()),
            params.antiderivative(r),
        );
    }

    let pairs = condition_pairs(r_grid);
    let n_pairs = pairs.len();
    for &(r1, r2) in &pairs {
        let lhs = (params.l_prime(r1) - params.l_prime(r2)).abs();
        let dr = (r1 - r2).abs();
        let (label, rhs) = if rho > T::of(2.0) {
            let big = r1.abs().max(r2.abs());
            (
                "modulus (rho > 2, max form)",
                (params.c1 * big.abs_powf(rho - T::of(2.0)) + params.c2) * dr
                    + params.c3 * dr.abs_powf(params.w),
            )
        } else if rho > T::one() {
            (
                "modulus (rho in (1,2])",
                params.c4 * dr.abs_powf(rho - T::one()),
            )
        } else {
            (
                "modulus (rho = 1)",
                params.c5 * dr.abs_powf(params.gamma).min(T::one()),
            )
        };
        record(&mut worst, label, r1, Some(r2), lhs, rhs);
    }

    worst.sort_by(|a, b| b.abs_excess.partial_cmp(&a.abs_excess).unwrap());
    worst.truncate(8);
    Ok(ConditionReport {
        passed: worst.is_empty(),
        worst_violations: worst,
        n_points: r_grid.len(),
        n_pairs,
    })
}

/// Smallest constants that make the sweep pass, measured on `r_grid`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CertifiedConstants<T> {
    pub k1: T,
    pub k3: T,
    pub k5: T,
    /// ρ > 2 modulus constant (max form).
    pub c1: Option<T>,
    /// ρ ∈ (1,2] Hölder constant.
    pub c4: Option<T>,
    /// ρ = 1 modulus constant at the declared `gamma`.
    pub c5: Option<T>,
}

/// Pair-grid sweep producing empirical minimal constants for a family.
pub fn certify_constants<T: Real>(
    params: &NonlinearityParams<T>,
    r_grid: &[T],
) -> Result<CertifiedConstants<T>> {
    if r_grid.is_empty() {
        return Err(Error::InvalidConfig("empty check grid".into()));
    }
    let rho = params.rho;
    let mut k1 = T::zero();
    let mut k3 = T::zero();
    let mut k5 = T::infinity();
    for &r in r_grid {
        if r == T::zero() {
            continue;
        }
        k1 = k1.max(params.l(r).abs() / r.abs_powf(rho));
        let denom = r.abs_powf(rho - T::one());
        if denom > T::zero() {
            k3 = k3.max(params.l_prime(r).abs() / denom);
        }
        k5 = k5.min(params.antiderivative(r) / r.abs_powf(rho + T::one()));
    }
    let mut c_mod = T::zero();
    for &(r1, r2) in &condition_pairs(r_grid) {
        let dl = (params.l_prime(r1) - params.l_prime(r2)).abs();
        if dl == T::zero() {
            continue;
        }
        let dr = (r1 - r2).abs();
        let denom = if rho > T::of(2.0) {
            r1.abs().max(r2.abs()).abs_powf(rho - T::of(2.0)) * dr
        } else if rho > T::one() {
            dr.abs_powf(rho - T::one())
        } else {
            dr.abs_powf(params.gamma).min(T::one())
        };
        if denom > T::zero() {
            c_mod = c_mod.max(dl / denom);
        }
    }
    Ok(CertifiedConstants {
        k1,
        k3,
        k5,
        c1: (rho > T::of(2.0)).then_some(c_mod),
        c4: (rho > T::one() && rho <= T::of(2.0)).then_some(c_mod),
        c5: (rho == T::one()).then_some(c_mod),
    })
}

/// Logarithmic check grid over `±[1e−6, 1e3]` plus zero.
pub fn standard_check_grid<T: Real>() -> Vec<T> {
    let mut grid = vec![T::zero()];
    let points = 55usize;
    for i in 0..points {
        let exp = -6.0 + 9.0 * i as f64 / (points - 1) as f64;
        let r = T::of(10f64.powf(exp));
        grid.push(r);
        grid.push(-r);
    }
    grid
}

/// `J(u) = ∫ j(u(ξ)) dξ` by grid quadrature.
pub fn j_functional<T: Real>(
    space: &SpectralSpace<T>,
    params: &NonlinearityParams<T>,
    u: &Field<T>,
) -> T {
    match params.linear_coefficient() {
        // j(r) = c r²/2, so J = c‖u‖²/2 exactly by Parseval.
        Some(c) => {
            let n = space.norm_l2(u);
            c * n * n / T::of(2.0)
        }
        None => {
            let grid = space.to_grid(u).expect("mode count fixed by space");
            j_functional_grid(space, params, &grid)
        }
    }
}

pub(crate) fn j_functional_grid<T: Real>(
    space: &SpectralSpace<T>,
    params: &NonlinearityParams<T>,
    grid_values: &[T],
) -> T {
    let vals: Vec<T> = grid_values.iter().map(|&v| params.antiderivative(v)).collect();
    space.quadrature(&vals)
}

/// Damped-wave energy `𝓔(x, y) = ‖x‖²_{H₀¹} + ‖y‖² + 2J(x)`.
pub fn energy<T: Real>(
    space: &SpectralSpace<T>,
    params: &NonlinearityParams<T>,
    z: &State<T>,
) -> T {
    let hx = space.norm_h01(&z.x);
    let ny = space.norm_l2(&z.y);
    hx * hx + ny * ny + T::of(2.0) * j_functional(space, params, &z.x)
}

pub(crate) fn energy_with_grid<T: Real>(
    space: &SpectralSpace<T>,
    params: &NonlinearityParams<T>,
    x_coeffs: &[T],
    y_coeffs: &[T],
    grid_x: &[T],
) -> T {
    let hx = space.sobolev_norm_unchecked(x_coeffs, T::one());
    let ny = space.sobolev_norm_unchecked(y_coeffs, T::zero());
    hx * hx + ny * ny + T::of(2.0) * j_functional_grid(space, params, grid_x)
}
