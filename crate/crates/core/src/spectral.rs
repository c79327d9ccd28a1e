//! Dirichlet sine eigenbasis on the interval `(0, L)`.
//!
//! The negative Dirichlet Laplacian `A` on `(0, L)` has eigenpairs
//!
//! ```text
//! e_j(ξ) = √(2/L) · sin(jπξ/L),    λ_j = (jπ/L)²,    j = 1, 2, …
//! ```
//!
//! A [`Field`] stores the first `N` eigenbasis coefficients of a function.
//! Fractional-power Sobolev norms are diagonal, `‖u‖_θ² = Σ λ_j^θ u_j²`,
//! and the linear wave group acts as an independent rotation in each mode.
//!
//! Pointwise (nonlinear) operations go through a discrete sine transform to
//! an `M`-point uniform grid, `ξ_m = m·L/(M+1)`, on which the quadrature
//! `(L/(M+1))·Σ` is exact for products of basis functions up to mode `M`.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Coefficient vector of a function on `(0, L)` in the Dirichlet sine basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T>(Vec<T>);

impl<T: Real> Field<T> {
    /// Wraps a coefficient vector, rejecting non-finite entries.
    pub fn new(coeffs: Vec<T>) -> Result<Self> {
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidField(format!(
                "non-finite coefficient at mode {}",
                i + 1
            )));
        }
        Ok(Self(coeffs))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    /// A single eigenmode `amp · e_j` (`mode` is 1-based).
    pub fn mode(n: usize, mode: usize, amp: T) -> Self {
        assert!(mode >= 1 && mode <= n, "mode index out of range");
        let mut c = vec![T::zero(); n];
        c[mode - 1] = amp;
        Self(c)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coeffs(&self) -> &[T] {
        &self.0
    }

    pub fn coeffs_mut(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|c| *c == T::zero())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// `self + s · other`, elementwise.
    pub fn axpy(&self, s: T, other: &Field<T>) -> Field<T> {
        assert_eq!(self.len(), other.len());
        Field(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| a + s * b)
                .collect(),
        )
    }

    pub fn scaled(&self, s: T) -> Field<T> {
        Field(self.0.iter().map(|&a| s * a).collect())
    }
}

impl<T: Real> From<Field<T>> for Vec<T> {
    fn from(f: Field<T>) -> Self {
        f.0
    }
}

/// Position/velocity pair `(X, Y)`, the state of the second-order system.
#[derive(Debug, Clone, PartialEq)]
pub struct State<T> {
    pub x: Field<T>,
    pub y: Field<T>,
}

impl<T: Real> State<T> {
    pub fn new(x: Field<T>, y: Field<T>) -> Self {
        assert_eq!(x.len(), y.len(), "position/velocity mode counts differ");
        Self { x, y }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            x: Field::zeros(n),
            y: Field::zeros(n),
        }
    }

    pub fn n_modes(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// `self + s · (h1, h2)`.
    pub fn shifted(&self, s: T, h1: &Field<T>, h2: &Field<T>) -> State<T> {
        State {
            x: self.x.axpy(s, h1),
            y: self.y.axpy(s, h2),
        }
    }
}

/// Spectral discretization: eigenvalues, transform tables and quadrature.
#[derive(Debug, Clone)]
pub struct SpectralSpace<T> {
    length: T,
    n_modes: usize,
    grid_size: usize,
    lambdas: Vec<T>,
    sqrt_lambdas: Vec<T>,
    /// `sin_table[j·M + m] = e_{j+1}(ξ_m)`.
    sin_table: Vec<T>,
    quad_weight: T,
    norm_factor: T,
}

impl<T: Real> SpectralSpace<T> {
    /// Builds the space on `(0, length)` with `n_modes` retained modes and an
    /// `grid_size`-point physical grid (`grid_size ≥ 2·n_modes`).
    pub fn new(length: T, n_modes: usize, grid_size: usize) -> Result<Self> {
        if !(length > T::zero()) || !length.is_finite() {
            return Err(Error::InvalidConfig("interval length must be positive".into()));
        }
        if n_modes == 0 {
            return Err(Error::InvalidConfig("need at least one mode".into()));
        }
        if grid_size < 2 * n_modes {
            return Err(Error::InvalidConfig(format!(
                "grid size {grid_size} below dealiasing minimum {}",
                2 * n_modes
            )));
        }
        let pi = T::PI();
        let norm_factor = (T::of(2.0) / length).sqrt();
        let mut lambdas = Vec::with_capacity(n_modes);
        let mut sqrt_lambdas = Vec::with_capacity(n_modes);
        for j in 1..=n_modes {
            let sq = T::of_usize(j) * pi / length;
            sqrt_lambdas.push(sq);
            lambdas.push(sq * sq);
        }
        let denom = T::of_usize(grid_size + 1);
        let mut sin_table = Vec::with_capacity(n_modes * grid_size);
        for j in 1..=n_modes {
            for m in 1..=grid_size {
                let arg = pi * T::of_usize(j) * T::of_usize(m) / denom;
                sin_table.push(norm_factor * arg.sin());
            }
        }
        Ok(Self {
            length,
            n_modes,
            grid_size,
            lambdas,
            sqrt_lambdas,
            sin_table,
            quad_weight: length / denom,
            norm_factor,
        })
    }

    /// Default layout: `L = π` (so `λ_j = j²`) and a 4× dealiasing grid.
    pub fn standard(n_modes: usize) -> Self {
        Self::new(T::PI(), n_modes, 4 * n_modes).expect("standard space is valid")
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn lambdas(&self) -> &[T] {
        &self.lambdas
    }

    pub fn sqrt_lambdas(&self) -> &[T] {
        &self.sqrt_lambdas
    }

    pub fn quad_weight(&self) -> T {
        self.quad_weight
    }

    /// Sharp one-dimensional Dirichlet embedding constant `√L / 2` in
    /// `sup|u| ≤ C·‖u‖_{H₀¹}` (extremized by the tent function).
    pub fn embedding_const(&self) -> T {
        self.length.sqrt() / T::of(2.0)
    }

    /// Physical grid point `ξ_m`, `m = 0..grid_size`.
    pub fn grid_point(&self, m: usize) -> T {
        self.length * T::of_usize(m + 1) / T::of_usize(self.grid_size + 1)
    }

    /// Synthesis: grid values of the function with coefficients `u`.
    pub fn to_grid(&self, u: &Field<T>) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.grid_size];
        self.to_grid_into(u.coeffs(), &mut out)?;
        Ok(out)
    }

    /// Analysis: coefficients of the function with grid values `values`.
    pub fn from_grid(&self, values: &[T]) -> Result<Field<T>> {
        if values.len() != self.grid_size {
            return Err(Error::LengthMismatch {
                expected: self.grid_size,
                got: values.len(),
            });
        }
        let mut out = vec![T::zero(); self.n_modes];
        self.from_grid_into(values, &mut out);
        Ok(Field(out))
    }

    pub(crate) fn to_grid_into(&self, coeffs: &[T], out: &mut [T]) -> Result<()> {
        if coeffs.len() != self.n_modes {
            return Err(Error::LengthMismatch {
                expected: self.n_modes,
                got: coeffs.len(),
            });
        }
        out.iter_mut().for_each(|v| *v = T::zero());
        for (j, &c) in coeffs.iter().enumerate() {
            if c == T::zero() {
                continue;
            }
            let row = &self.sin_table[j * self.grid_size..(j + 1) * self.grid_size];
            for (o, &s) in out.iter_mut().zip(row) {
                *o += c * s;
            }
        }
        Ok(())
    }

    #[allow(clippy::wrong_self_convention)]
    pub(crate) fn from_grid_into(&self, values: &[T], out: &mut [T]) {
        debug_assert_eq!(values.len(), self.grid_size);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.sin_table[j * self.grid_size..(j + 1) * self.grid_size];
            let mut acc = T::zero();
            for (&v, &s) in values.iter().zip(row) {
                acc += v * s;
            }
            *o = self.quad_weight * acc;
        }
    }

    /// Quadrature of grid values: `(L/(M+1))·Σ_m v_m`.
    pub fn quadrature(&self, values: &[T]) -> T {
        debug_assert_eq!(values.len(), self.grid_size);
        self.quad_weight * crate::stats::pairwise_sum(values)
    }

    /// `L²` inner product via Parseval: `Σ_j a_j b_j`.
    pub fn inner(&self, a: &Field<T>, b: &Field<T>) -> T {
        a.coeffs()
            .iter()
            .zip(b.coeffs())
            .map(|(&x, &y)| x * y)
            .sum()
    }

    /// Fractional Sobolev norm `(Σ_j λ_j^θ u_j²)^{1/2}`.
    ///
    /// `theta = 0` is the `L²` norm, `theta = 1` the `H₀¹` norm. Intended
    /// range is `θ ∈ [−1, 2]`.
    pub fn sobolev_norm(&self, u: &Field<T>, theta: T) -> Result<T> {
        if !u.is_finite() {
            return Err(Error::InvalidField("non-finite coefficients".into()));
        }
        Ok(self.sobolev_norm_unchecked(u.coeffs(), theta))
    }

    pub(crate) fn sobolev_norm_unchecked(&self, coeffs: &[T], theta: T) -> T {
        let t64 = theta.to_f64_lossy();
        let mut acc = T::zero();
        if t64 == 0.0 {
            for &c in coeffs {
                acc += c * c;
            }
        } else if t64 == 1.0 {
            for (&c, &l) in coeffs.iter().zip(&self.lambdas) {
                acc += l * c * c;
            }
        } else if t64 == -1.0 {
            for (&c, &l) in coeffs.iter().zip(&self.lambdas) {
                acc += c * c / l;
            }
        } else if t64 == 2.0 {
            for (&c, &l) in coeffs.iter().zip(&self.lambdas) {
                acc += l * l * c * c;
            }
        } else {
            for (&c, &l) in coeffs.iter().zip(&self.lambdas) {
                acc += l.powf(theta) * c * c;
            }
        }
        acc.sqrt()
    }

    /// `L²` norm.
    pub fn norm_l2(&self, u: &Field<T>) -> T {
        self.sobolev_norm_unchecked(u.coeffs(), T::zero())
    }

    /// `H₀¹` norm.
    pub fn norm_h01(&self, u: &Field<T>) -> T {
        self.sobolev_norm_unchecked(u.coeffs(), T::one())
    }

    /// Guard functional `‖x‖_{1/2} + ‖y‖` used by the blow-up stopping rule.
    pub fn guard_norm(&self, z: &State<T>) -> T {
        self.norm_h01(&z.x) + self.norm_l2(&z.y)
    }

    /// Max of `|u|` over an 8× refined grid (approximates `sup_(0,L) |u|`).
    pub fn sup_norm(&self, u: &Field<T>) -> T {
        let refine = 8 * (self.grid_size + 1);
        let pi = T::PI();
        let mut best = T::zero();
        for i in 1..refine {
            let frac = T::of_usize(i) / T::of_usize(refine);
            let mut v = T::zero();
            for (j, &c) in u.coeffs().iter().enumerate() {
                if c != T::zero() {
                    v += c * self.norm_factor * (pi * T::of_usize(j + 1) * frac).sin();
                }
            }
            if v.abs() > best {
                best = v.abs();
            }
        }
        best
    }

    /// Linear wave group at time `t` applied to `(h1, h2)`:
    /// per mode, `(cos(√λ t)·h1 + sin(√λ t)/√λ·h2, −√λ sin(√λ t)·h1 + cos(√λ t)·h2)`.
    pub fn group_action(&self, t: T, h1: &Field<T>, h2: &Field<T>) -> (Field<T>, Field<T>) {
        assert_eq!(h1.len(), self.n_modes);
        assert_eq!(h2.len(), self.n_modes);
        let mut out1 = Vec::with_capacity(self.n_modes);
        let mut out2 = Vec::with_capacity(self.n_modes);
        for j in 0..self.n_modes {
            let sq = self.sqrt_lambdas[j];
            let (s, c) = (sq * t).sin_cos();
            let a = h1.coeffs()[j];
            let b = h2.coeffs()[j];
            out1.push(c * a + s / sq * b);
            out2.push(-sq * s * a + c * b);
        }
        (Field(out1), Field(out2))
    }
}
