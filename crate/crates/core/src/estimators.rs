//! Monte-Carlo estimation of `P_T g`, the coupling-based derivative formula,
//! the integration-by-parts formula, and the Girsanov-weight moments used by
//! the inequality verifiers.
//!
//! Conventions shared by every estimator:
//!
//! * trajectories are embarrassingly parallel; per-trajectory values are
//!   gathered in index order and reduced pairwise, so results are
//!   bit-identical for any thread count;
//! * Itô sums are left-point, matching the definition of the stochastic
//!   integral and the weight accumulation;
//! * blown-up trajectories are excluded and counted, never folded into the
//!   mean silently;
//! * the global sign of the derivative-formula integrand is resolved once
//!   per run against a finite-difference pilot and recorded in the result
//!   (differentiating the discrete Girsanov weight at ε = 0 yields `−M`, so
//!   the forward default is −1; the duality argument for the shifted
//!   integrand gives +1).

use rayon::prelude::*;
use serde::Serialize;

use crate::bounds;
use crate::coupling::{ControlKind, ControlTables, CouplingControls};
use crate::dynamics::{Integrator, Model, Scheme, Scratch, TimeGrid};
use crate::error::{Error, Result};
use crate::oracle::GaussianTerminal;
use crate::rng::PathRng;
use crate::scalar::Real;
use crate::spectral::{Field, State};
use crate::stats::{excess_kurtosis, mean_stderr, McEstimate};

/// Monte-Carlo run configuration.
#[derive(Debug, Clone)]
pub struct McConfig<T> {
    pub grid: TimeGrid<T>,
    pub scheme: Scheme,
    pub guard: T,
    pub seed: u64,
    pub n_traj: usize,
}

impl<T: Real> McConfig<T> {
    pub fn new(grid: TimeGrid<T>, scheme: Scheme, guard: T, seed: u64, n_traj: usize) -> Self {
        Self { grid, scheme, guard, seed, n_traj }
    }

    fn validate(&self, model: &Model<T>) -> Result<()> {
        self.grid.validate_for(&model.space, self.scheme)?;
        if self.n_traj < 100 {
            return Err(Error::InvalidConfig(format!(
                "n_traj = {} below the minimum of 100",
                self.n_traj
            )));
        }
        Ok(())
    }

    /// Same configuration on a shortened horizon (step size preserved).
    pub fn with_horizon_capped(&self, t_max: T) -> Result<Self> {
        if self.grid.horizon() <= t_max {
            return Ok(self.clone());
        }
        let dt = self.grid.dt();
        let n = (t_max / dt).to_f64_lossy().floor() as usize;
        if n == 0 {
            return Err(Error::InvalidConfig(format!(
                "horizon cap {t_max} below one step dt = {dt}"
            )));
        }
        Ok(Self {
            grid: TimeGrid::new(dt * T::of_usize(n), n)?,
            ..self.clone()
        })
    }
}

/// Path functionals `g` evaluated at the terminal state.
#[derive(Debug, Clone)]
pub enum TestFunctional<T> {
    /// `g(z) = exp(c·(⟨a₁, x⟩ + ⟨a₂, y⟩))`; strictly positive.
    ExpLinear { a1: Field<T>, a2: Field<T>, c: T },
    /// `g(z) = 1 / (1 + ‖z − z*‖²)`; strictly positive and bounded.
    BoundedSmooth { center: State<T> },
    /// `g(z) = ‖z − z*‖²`.
    Quadratic { center: State<T> },
    /// Smoothed ball indicator `σ(k·(r² − ‖z − z*‖²))`; strictly positive.
    IndicatorSmooth { center: State<T>, radius: T, sharpness: T },
}

impl<T: Real> TestFunctional<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TestFunctional::ExpLinear { .. } => "exp_linear",
            TestFunctional::BoundedSmooth { .. } => "bounded_smooth",
            TestFunctional::Quadratic { .. } => "quadratic",
            TestFunctional::IndicatorSmooth { .. } => "indicator_smooth",
        }
    }

    /// Strict positivity (required by the Harnack verifiers).
    pub fn strictly_positive(&self) -> bool {
        !matches!(self, TestFunctional::Quadratic { .. })
    }

    pub fn eval(&self, z: &State<T>) -> T {
        self.eval_parts(z.x.coeffs(), z.y.coeffs())
    }

    pub fn eval_parts(&self, x: &[T], y: &[T]) -> T {
        match self {
            TestFunctional::ExpLinear { a1, a2, c } => {
                let mut lin = T::zero();
                for (j, &a) in a1.coeffs().iter().enumerate() {
                    lin += a * x[j];
                }
                for (j, &a) in a2.coeffs().iter().enumerate() {
                    lin += a * y[j];
                }
                (*c * lin).exp()
            }
            TestFunctional::BoundedSmooth { center } => {
                T::one() / (T::one() + dist_sq(center, x, y))
            }
            TestFunctional::Quadratic { center } => dist_sq(center, x, y),
            TestFunctional::IndicatorSmooth { center, radius, sharpness } => {
                let d = dist_sq(center, x, y);
                T::one() / (T::one() + (*sharpness * (d - *radius * *radius)).exp())
            }
        }
    }

    /// Closed-form directional gradient `∇_{(h₁,h₂)} g(z)`; `None` for kinds
    /// without one.
    pub fn directional_gradient(&self, z: &State<T>, h1: &Field<T>, h2: &Field<T>) -> Option<T> {
        let x = z.x.coeffs();
        let y = z.y.coeffs();
        match self {
            TestFunctional::ExpLinear { a1, a2, c } => {
                let mut lin = T::zero();
                for (j, &a) in a1.coeffs().iter().enumerate() {
                    lin += a * h1.coeffs()[j];
                }
                for (j, &a) in a2.coeffs().iter().enumerate() {
                    lin += a * h2.coeffs()[j];
                }
                Some(*c * lin * self.eval_parts(x, y))
            }
            TestFunctional::BoundedSmooth { center } => {
                let g = self.eval_parts(x, y);
                Some(-T::of(2.0) * center_inner(center, x, y, h1, h2) * g * g)
            }
            TestFunctional::Quadratic { center } => {
                Some(T::of(2.0) * center_inner(center, x, y, h1, h2))
            }
            TestFunctional::IndicatorSmooth { .. } => None,
        }
    }

    /// `E g(Z_T)` under the linear-model Gaussian terminal law.
    pub fn gaussian_expectation(&self, law: &GaussianTerminal<T>, z0: &State<T>) -> Option<T> {
        match self {
            TestFunctional::ExpLinear { a1, a2, c } => {
                let (lm, lv) = exp_linear_moments(law, z0, a1, a2);
                Some((*c * lm + *c * *c / T::of(2.0) * lv).exp())
            }
            TestFunctional::Quadratic { center } => {
                let mut acc = T::zero();
                for j in 0..law.n_modes() {
                    let m = law.mean_of_mode(j, z0.x.coeffs()[j], z0.y.coeffs()[j]);
                    let dx = m[0] - center.x.coeffs()[j];
                    let dy = m[1] - center.y.coeffs()[j];
                    acc += dx * dx + dy * dy + law.cov[j][0][0] + law.cov[j][1][1];
                }
                Some(acc)
            }
            _ => None,
        }
    }

    /// `Var g(Z_T)` under the Gaussian terminal law.
    pub fn gaussian_variance(&self, law: &GaussianTerminal<T>, z0: &State<T>) -> Option<T> {
        match self {
            TestFunctional::ExpLinear { a1, a2, c } => {
                let (lm, lv) = exp_linear_moments(law, z0, a1, a2);
                let c2 = *c * *c;
                let mean_sq = (T::of(2.0) * *c * lm + c2 * lv).exp();
                Some(mean_sq * ((c2 * lv).exp() - T::one()))
            }
            TestFunctional::Quadratic { center } => {
                let mut acc = T::zero();
                for j in 0..law.n_modes() {
                    let m = law.mean_of_mode(j, z0.x.coeffs()[j], z0.y.coeffs()[j]);
                    let dx = m[0] - center.x.coeffs()[j];
                    let dy = m[1] - center.y.coeffs()[j];
                    let s = &law.cov[j];
                    acc += T::of(2.0) * s[0][0] * s[0][0]
                        + T::of(4.0) * s[0][0] * dx * dx
                        + T::of(2.0) * s[1][1] * s[1][1]
                        + T::of(4.0) * s[1][1] * dy * dy
                        + T::of(4.0) * s[0][1] * s[0][1]
                        + T::of(8.0) * s[0][1] * dx * dy;
                }
                Some(acc)
            }
            _ => None,
        }
    }

    /// `∇_{(h₁,h₂)} (z₀ ↦ E g(Z_T(z₀)))` under the Gaussian law.
    pub fn gaussian_directional_derivative(
        &self,
        law: &GaussianTerminal<T>,
        z0: &State<T>,
        h1: &Field<T>,
        h2: &Field<T>,
    ) -> Option<T> {
        let (ph1, ph2) = law.mean_push(h1, h2);
        match self {
            TestFunctional::ExpLinear { a1, a2, c } => {
                let mut lin = T::zero();
                for (j, &a) in a1.coeffs().iter().enumerate() {
                    lin += a * ph1.coeffs()[j];
                }
                for (j, &a) in a2.coeffs().iter().enumerate() {
                    lin += a * ph2.coeffs()[j];
                }
                Some(*c * lin * self.gaussian_expectation(law, z0)?)
            }
            TestFunctional::Quadratic { center } => {
                let mut acc = T::zero();
                for j in 0..law.n_modes() {
                    let m = law.mean_of_mode(j, z0.x.coeffs()[j], z0.y.coeffs()[j]);
                    acc += T::of(2.0) * (m[0] - center.x.coeffs()[j]) * ph1.coeffs()[j]
                        + T::of(2.0) * (m[1] - center.y.coeffs()[j]) * ph2.coeffs()[j];
                }
                Some(acc)
            }
            _ => None,
        }
    }

    /// `E[∇_{(h₁,h₂)} g(Z_T)]` under the Gaussian law (the IBP left side).
    pub fn gaussian_expected_gradient(
        &self,
        law: &GaussianTerminal<T>,
        z0: &State<T>,
        h1: &Field<T>,
        h2: &Field<T>,
    ) -> Option<T> {
        match self {
            TestFunctional::ExpLinear { a1, a2, c } => {
                let mut lin = T::zero();
                for (j, &a) in a1.coeffs().iter().enumerate() {
                    lin += a * h1.coeffs()[j];
                }
                for (j, &a) in a2.coeffs().iter().enumerate() {
                    lin += a * h2.coeffs()[j];
                }
                Some(*c * lin * self.gaussian_expectation(law, z0)?)
            }
            TestFunctional::Quadratic { center } => {
                let mean = law.mean_state(z0);
                let mut acc = T::zero();
                for j in 0..law.n_modes() {
                    acc += T::of(2.0)
                        * (mean.x.coeffs()[j] - center.x.coeffs()[j])
                        * h1.coeffs()[j]
                        + T::of(2.0)
                            * (mean.y.coeffs()[j] - center.y.coeffs()[j])
                            * h2.coeffs()[j];
                }
                Some(acc)
            }
            _ => None,
        }
    }
}

fn dist_sq<T: Real>(center: &State<T>, x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (j, &c) in center.x.coeffs().iter().enumerate() {
        let d = x[j] - c;
        acc += d * d;
    }
    for (j, &c) in center.y.coeffs().iter().enumerate() {
        let d = y[j] - c;
        acc += d * d;
    }
    acc
}

fn center_inner<T: Real>(
    center: &State<T>,
    x: &[T],
    y: &[T],
    h1: &Field<T>,
    h2: &Field<T>,
) -> T {
    let mut acc = T::zero();
    for (j, &c) in center.x.coeffs().iter().enumerate() {
        acc += (x[j] - c) * h1.coeffs()[j];
    }
    for (j, &c) in center.y.coeffs().iter().enumerate() {
        acc += (y[j] - c) * h2.coeffs()[j];
    }
    acc
}

fn exp_linear_moments<T: Real>(
    law: &GaussianTerminal<T>,
    z0: &State<T>,
    a1: &Field<T>,
    a2: &Field<T>,
) -> (T, T) {
    let mut lm = T::zero();
    let mut lv = T::zero();
    for j in 0..law.n_modes() {
        let m = law.mean_of_mode(j, z0.x.coeffs()[j], z0.y.coeffs()[j]);
        let a = [a1.coeffs()[j], a2.coeffs()[j]];
        lm += a[0] * m[0] + a[1] * m[1];
        let s = &law.cov[j];
        lv += a[0] * (s[0][0] * a[0] + s[0][1] * a[1])
            + a[1] * (s[1][0] * a[0] + s[1][1] * a[1]);
    }
    (lm, lv)
}

/// Gathers per-trajectory values in index order (deterministic reduction).
pub(crate) fn par_values<T, F>(n: usize, f: F) -> (Vec<T>, usize)
where
    T: Send,
    F: Fn(u64) -> Option<T> + Sync + Send,
{
    let raw: Vec<Option<T>> = (0..n as u64).into_par_iter().map(f).collect();
    let excluded = raw.iter().filter(|v| v.is_none()).count();
    (raw.into_iter().flatten().collect(), excluded)
}

/// Derivative-formula integrand tables: per step `k`,
/// `(φ + f)(t_k)/σ` and `ψ(t_k)` (with grid values when `l′` varies).
pub(crate) struct IntegrandTables<T> {
    base_over_sigma: Vec<Vec<T>>,
    psi: Vec<Vec<T>>,
    psi_grid: Vec<Vec<T>>,
    lp_const: Option<T>,
}

impl<T: Real> IntegrandTables<T> {
    pub fn build(
        model: &Model<T>,
        grid: &TimeGrid<T>,
        kind: ControlKind,
        h1: &Field<T>,
        h2: &Field<T>,
    ) -> Result<Self> {
        if model.noise.is_degenerate() {
            return Err(Error::HypothesisViolated(
                "derivative integrand needs nondegenerate noise".into(),
            ));
        }
        let lp_const = model.params.l_prime_constant();
        let controls =
            CouplingControls::new(kind, grid.horizon(), h1.clone(), h2.clone(), T::one())?;
        let tables = ControlTables::build(&controls, &model.space, grid, lp_const.is_none())?;
        let sigma = model.noise.sigma();
        let base_over_sigma = tables
            .phi
            .iter()
            .zip(&tables.f)
            .map(|(phi, f)| {
                (0..phi.len())
                    .map(|j| (phi[j] + f[j]) / sigma[j])
                    .collect()
            })
            .collect();
        Ok(Self {
            base_over_sigma,
            psi: tables.psi,
            psi_grid: tables.psi_grid,
            lp_const,
        })
    }
}

struct SingleOutcome<T> {
    x: Vec<T>,
    y: Vec<T>,
    ito: T,
}

/// One uncoupled trajectory, optionally accumulating the left-point Itô sum
/// `∫⟨(l′(X)ψ + φ + f)/σ, dW⟩`.
fn drive_single<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z0: &State<T>,
    trajectory_index: u64,
    integrand: Option<&IntegrandTables<T>>,
) -> Option<SingleOutcome<T>> {
    let space = &model.space;
    let n = space.n_modes();
    let dt = mc.grid.dt();
    let integ = Integrator::new(space, &model.params, &model.noise, mc.scheme, T::one(), dt);
    let rng = PathRng::new(mc.seed, trajectory_index);
    let sqrt_dt = dt.sqrt();

    let mut x: Vec<T> = z0.x.coeffs().to_vec();
    let mut y: Vec<T> = z0.y.coeffs().to_vec();
    {
        let g = space.sobolev_norm_unchecked(&x, T::one())
            + space.sobolev_norm_unchecked(&y, T::zero());
        if !(g < mc.guard) {
            return None;
        }
    }
    let want_grid = integrand.is_some_and(|t| t.lp_const.is_none());
    let mut scratch = Scratch::new(space);
    let mut dw = vec![T::zero(); n];
    let mut lp_psi = vec![T::zero(); n];
    let mut vals = vec![T::zero(); space.grid_size()];
    let mut ito = T::zero();
    let sigma = model.noise.sigma();

    for k in 0..mc.grid.n_steps() {
        rng.fill_increments(k, sqrt_dt, &mut dw);
        integ.prepare(&x, &mut scratch, want_grid);
        if let Some(tab) = integrand {
            match tab.lp_const {
                Some(c) => {
                    for j in 0..n {
                        let q = c * tab.psi[k][j] / sigma[j] + tab.base_over_sigma[k][j];
                        ito += q * dw[j];
                    }
                }
                None => {
                    let grid_psi = &tab.psi_grid[k];
                    for m in 0..vals.len() {
                        vals[m] = model.params.l_prime(scratch.grid_x[m]) * grid_psi[m];
                    }
                    space.from_grid_into(&vals, &mut lp_psi);
                    for j in 0..n {
                        let q = lp_psi[j] / sigma[j] + tab.base_over_sigma[k][j];
                        ito += q * dw[j];
                    }
                }
            }
        }
        let lx = std::mem::take(&mut scratch.lx);
        let ok = integ.advance(&mut x, &mut y, &lx, None, None, &dw);
        scratch.lx = lx;
        let g = space.sobolev_norm_unchecked(&x, T::one())
            + space.sobolev_norm_unchecked(&y, T::zero());
        if !ok || !(g < mc.guard) {
            return None;
        }
    }
    Some(SingleOutcome { x, y, ito })
}

/// `P_T g(z₀) = E g(Z_T)` by plain Monte Carlo.
pub fn estimate_pt<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
) -> Result<McEstimate<T>> {
    estimate_with(model, mc, z0, |x, y| g.eval_parts(x, y))
}

/// Monte-Carlo mean of an arbitrary terminal functional.
pub fn estimate_with<T: Real, F>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z0: &State<T>,
    f: F,
) -> Result<McEstimate<T>>
where
    F: Fn(&[T], &[T]) -> T + Sync,
{
    mc.validate(model)?;
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        drive_single(model, mc, z0, traj, None).map(|o| f(&o.x, &o.y))
    });
    McEstimate::from_values(&values, excluded)
}

/// Central finite difference `[P_T g(z₀+εh) − P_T g(z₀−εh)]/(2ε)` with
/// common random numbers across the two starts.
pub fn fd_gradient<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    fd_eps: Option<T>,
) -> Result<McEstimate<T>> {
    mc.validate(model)?;
    let eps = fd_eps.unwrap_or_else(|| default_fd_eps(model, h1, h2));
    let plus = z0.shifted(eps, h1, h2);
    let minus = z0.shifted(-eps, h1, h2);
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        let a = drive_single(model, mc, &plus, traj, None)?;
        let b = drive_single(model, mc, &minus, traj, None)?;
        Some((g.eval_parts(&a.x, &a.y) - g.eval_parts(&b.x, &b.y)) / (T::of(2.0) * eps))
    });
    McEstimate::from_values(&values, excluded)
}

fn default_fd_eps<T: Real>(model: &Model<T>, h1: &Field<T>, h2: &Field<T>) -> T {
    let norm = model.space.norm_h01(h1) + model.space.norm_l2(h2);
    let eps = T::of(1e-3) / norm.max(T::of(1e-6));
    eps.min(T::of(0.1))
}

/// How the integrand sign was fixed.
#[derive(Debug, Clone, Serialize)]
pub enum SignResolution<T> {
    /// Pilot comparison against a reference estimate.
    Pilot {
        reference_mean: T,
        reference_stderr: T,
        unsigned_mean: T,
        n_pilot: usize,
    },
    /// Pilot was inconclusive; the derivation default was kept.
    Defaulted { reason: String },
}

/// A gradient estimate together with its resolved integrand sign.
#[derive(Debug, Clone, Serialize)]
pub struct SignedGradient<T> {
    pub estimate: McEstimate<T>,
    pub sign: i8,
    pub resolution: SignResolution<T>,
}

fn check_rho_hypothesis<T: Real>(model: &Model<T>, allow_rho_gap: bool) -> Result<()> {
    let rho = model.params.rho;
    let in_range = rho == T::one() || rho >= T::of(2.0);
    if !in_range && !allow_rho_gap {
        return Err(Error::HypothesisViolated(format!(
            "derivative formula requires rho in {{1}} ∪ [2, ∞), got {rho} \
             (pass allow_rho_gap to override at finite mode count)"
        )));
    }
    Ok(())
}

/// Derivative estimator `∇_{(h₁,h₂)} P_T g(z₀) ≈ s·E[g(Z_T)·M]` with
/// `M = Σ_k ⟨(l′(X)ψ + φ + f)(t_k)/σ, ΔW_k⟩` along the uncoupled path and
/// `s` resolved against a finite-difference pilot.
pub fn bismut_gradient<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    allow_rho_gap: bool,
) -> Result<SignedGradient<T>> {
    mc.validate(model)?;
    check_rho_hypothesis(model, allow_rho_gap)?;
    let tables = IntegrandTables::build(model, &mc.grid, ControlKind::Forward, h1, h2)?;
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        drive_single(model, mc, z0, traj, Some(&tables))
            .map(|o| g.eval_parts(&o.x, &o.y) * o.ito)
    });
    if values.is_empty() {
        return Err(Error::EstimationFailure("all trajectories excluded".into()));
    }
    let (sign, resolution) = resolve_sign(model, mc, g, z0, h1, h2, &values, -1);
    let signed: Vec<T> = values.iter().map(|&v| T::of(sign as f64) * v).collect();
    Ok(SignedGradient {
        estimate: McEstimate::from_values(&signed, excluded)?,
        sign,
        resolution,
    })
}

#[allow(clippy::too_many_arguments)]
fn resolve_sign<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    raw_values: &[T],
    default_sign: i8,
) -> (i8, SignResolution<T>) {
    let n_pilot = raw_values.len().min(2000);
    let (raw_mean, raw_se) = mean_stderr(&raw_values[..n_pilot]);
    let pilot_mc = McConfig { n_traj: n_pilot.max(100), ..mc.clone() };
    let fd = match fd_gradient(model, &pilot_mc, g, z0, h1, h2, None) {
        Ok(est) => est,
        Err(e) => {
            return (
                default_sign,
                SignResolution::Defaulted { reason: format!("pilot failed: {e}") },
            )
        }
    };
    let decisive = raw_mean.abs() > T::of(2.0) * raw_se
        && fd.mean.abs() > T::of(2.0) * fd.stderr
        && fd.mean != T::zero();
    if !decisive {
        return (
            default_sign,
            SignResolution::Defaulted {
                reason: "pilot indistinguishable from zero".into(),
            },
        );
    }
    let sign = if (raw_mean - fd.mean).abs() <= (-raw_mean - fd.mean).abs() {
        1
    } else {
        -1
    };
    (
        sign,
        SignResolution::Pilot {
            reference_mean: fd.mean,
            reference_stderr: fd.stderr,
            unsigned_mean: raw_mean,
            n_pilot,
        },
    )
}

/// Both sides of the integration-by-parts identity
/// `E[∇_{(h₁,h₂)} g(Z_T)] = s·E[g(Z_T)·M̂]` with the shifted-control
/// integrand; the sign is resolved against the left side.
#[derive(Debug, Clone, Serialize)]
pub struct IbpResult<T> {
    pub lhs: McEstimate<T>,
    pub rhs: McEstimate<T>,
    /// Per-trajectory difference `lhs − rhs` (tightest comparison band).
    pub diff: McEstimate<T>,
    pub sign: i8,
    pub resolution: SignResolution<T>,
}

pub fn ibp_estimator<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
) -> Result<IbpResult<T>> {
    mc.validate(model)?;
    check_rho_hypothesis(model, false)?;
    {
        let probe = State::zeros(model.space.n_modes());
        if g.directional_gradient(&probe, h1, h2).is_none() {
            return Err(Error::UnsupportedFunctional(format!(
                "{} has no closed-form gradient",
                g.kind_name()
            )));
        }
    }
    let tables = IntegrandTables::build(model, &mc.grid, ControlKind::Shift, h1, h2)?;
    let (pairs, excluded) = par_values(mc.n_traj, |traj| {
        drive_single(model, mc, z0, traj, Some(&tables)).map(|o| {
            let z = State::new(
                Field::new(o.x.clone()).expect("finite by guard"),
                Field::new(o.y.clone()).expect("finite by guard"),
            );
            let lhs = g
                .directional_gradient(&z, h1, h2)
                .expect("gradient checked above");
            let rhs_raw = g.eval_parts(&o.x, &o.y) * o.ito;
            (lhs, rhs_raw)
        })
    });
    if pairs.is_empty() {
        return Err(Error::EstimationFailure("all trajectories excluded".into()));
    }
    let lhs_vals: Vec<T> = pairs.iter().map(|p| p.0).collect();
    let rhs_raw: Vec<T> = pairs.iter().map(|p| p.1).collect();

    // Resolve the sign against the left side itself.
    let n_pilot = pairs.len().min(2000);
    let (lhs_pilot, lhs_pilot_se) = mean_stderr(&lhs_vals[..n_pilot]);
    let (raw_pilot, raw_pilot_se) = mean_stderr(&rhs_raw[..n_pilot]);
    let decisive = raw_pilot.abs() > T::of(2.0) * raw_pilot_se
        && lhs_pilot.abs() > T::of(2.0) * lhs_pilot_se;
    let (sign, resolution) = if decisive {
        let s = if (raw_pilot - lhs_pilot).abs() <= (-raw_pilot - lhs_pilot).abs() {
            1i8
        } else {
            -1i8
        };
        (
            s,
            SignResolution::Pilot {
                reference_mean: lhs_pilot,
                reference_stderr: lhs_pilot_se,
                unsigned_mean: raw_pilot,
                n_pilot,
            },
        )
    } else {
        (
            1,
            SignResolution::Defaulted { reason: "pilot indistinguishable from zero".into() },
        )
    };

    let rhs_vals: Vec<T> = rhs_raw.iter().map(|&v| T::of(sign as f64) * v).collect();
    let diff_vals: Vec<T> = lhs_vals
        .iter()
        .zip(&rhs_vals)
        .map(|(&a, &b)| a - b)
        .collect();
    Ok(IbpResult {
        lhs: McEstimate::from_values(&lhs_vals, excluded)?,
        rhs: McEstimate::from_values(&rhs_vals, excluded)?,
        diff: McEstimate::from_values(&diff_vals, excluded)?,
        sign,
        resolution,
    })
}

/// Sample mean of the Girsanov weight `R_T` over the coupled pair; the
/// martingale property makes this exactly 1 in expectation at any step size.
pub fn weight_mean<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z0: &State<T>,
    controls: &CouplingControls<T>,
) -> Result<McEstimate<T>> {
    mc.validate(model)?;
    let tables = ControlTables::build(
        controls,
        &model.space,
        &mc.grid,
        model.params.linear_coefficient().is_none(),
    )?;
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        crate::coupling::drive_coupled(
            model,
            &mc.grid,
            mc.scheme,
            mc.guard,
            z0,
            &tables,
            mc.seed,
            traj,
            false,
            |_| {},
        )
        .map(|o| o.log_weight.exp())
    });
    McEstimate::from_values(&values, excluded)
}

/// `E[R_T · g(Z̃_T)]`: the weighted companion-terminal mean. Under the
/// change of measure this represents `P_T g` started from the displaced
/// point, which is what the Harnack machinery exploits.
pub fn weighted_terminal_mean<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z0: &State<T>,
    controls: &CouplingControls<T>,
    g: &TestFunctional<T>,
) -> Result<McEstimate<T>> {
    mc.validate(model)?;
    let tables = ControlTables::build(
        controls,
        &model.space,
        &mc.grid,
        model.params.linear_coefficient().is_none(),
    )?;
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        crate::coupling::drive_coupled(
            model,
            &mc.grid,
            mc.scheme,
            mc.guard,
            z0,
            &tables,
            mc.seed,
            traj,
            false,
            |_| {},
        )
        .map(|o| o.log_weight.exp() * g.eval(&o.companion))
    });
    McEstimate::from_values(&values, excluded)
}

/// `E[R log R]` over the coupled pair (relative entropy of the weighted
/// path measure); the Harnack coupling fixes `ε = 1`.
pub fn entropy_of_weight<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z0: &State<T>,
    controls: &CouplingControls<T>,
) -> Result<McEstimate<T>> {
    mc.validate(model)?;
    if (controls.epsilon - T::one()).abs() > T::of(1e-12) {
        return Err(Error::HypothesisViolated(
            "entropy of the Harnack coupling requires epsilon = 1".into(),
        ));
    }
    let tables = ControlTables::build(
        controls,
        &model.space,
        &mc.grid,
        model.params.linear_coefficient().is_none(),
    )?;
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        crate::coupling::drive_coupled(
            model,
            &mc.grid,
            mc.scheme,
            mc.guard,
            z0,
            &tables,
            mc.seed,
            traj,
            false,
            |_| {},
        )
        .map(|o| o.log_weight.exp() * o.log_weight)
    });
    McEstimate::from_values(&values, excluded)
}

/// Plug-in estimate of `(E R_T^{p/(p−1)})^{p−1}` with delta-method standard
/// error and a heavy-tail diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct PowerWeight<T> {
    /// Raw mean of `R^{p/(p−1)}`.
    pub raw: McEstimate<T>,
    /// `(raw mean)^{p−1}`.
    pub value: T,
    pub stderr: T,
    pub exponent: T,
    /// Excess kurtosis of the `R^{p/(p−1)}` sample.
    pub kurtosis: T,
}

pub fn power_of_weight<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z0: &State<T>,
    controls: &CouplingControls<T>,
    p: T,
) -> Result<PowerWeight<T>> {
    mc.validate(model)?;
    let rho = model.params.rho;
    if !(rho >= T::one() && rho <= T::of(2.0)) {
        return Err(Error::HypothesisViolated(format!(
            "weight power bound requires rho in [1, 2], got {rho}"
        )));
    }
    if !(p > T::one()) {
        return Err(Error::InvalidConfig(format!("p = {p} must exceed 1")));
    }
    let t0 = bounds::t_zero(model, &controls.h1, &controls.h2, p)?;
    if mc.grid.horizon() > t0 * (T::one() + T::of(1e-9)) {
        return Err(Error::HypothesisViolated(format!(
            "horizon {} exceeds the admissible cap T0 = {t0}",
            mc.grid.horizon()
        )));
    }
    let tables = ControlTables::build(
        controls,
        &model.space,
        &mc.grid,
        model.params.linear_coefficient().is_none(),
    )?;
    let q = p / (p - T::one());
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        crate::coupling::drive_coupled(
            model,
            &mc.grid,
            mc.scheme,
            mc.guard,
            z0,
            &tables,
            mc.seed,
            traj,
            false,
            |_| {},
        )
        .map(|o| (q * o.log_weight).exp())
    });
    let raw = McEstimate::from_values(&values, excluded)?;
    let exponent = p - T::one();
    let value = raw.mean.abs_powf(exponent);
    let stderr = exponent * raw.mean.abs_powf(exponent - T::one()) * raw.stderr;
    let kurtosis = excess_kurtosis(&values);
    Ok(PowerWeight { raw, value, stderr, exponent, kurtosis })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseModel;
    use crate::nonlinearity::NonlinearityParams;
    use crate::oracle;
    use crate::spectral::SpectralSpace;

    fn model(rho: Option<f64>) -> Model<f64> {
        let space = SpectralSpace::standard(8);
        let params = match rho {
            Some(r) => NonlinearityParams::klein_gordon(r).unwrap(),
            None => NonlinearityParams::linear_zero(),
        };
        let noise = NoiseModel::inv_sqrt_lambda(&space);
        Model::new(space, params, noise).unwrap()
    }

    fn mc(seed: u64, n: usize) -> McConfig<f64> {
        McConfig::new(
            TimeGrid::new(0.5, 250).unwrap(),
            Scheme::EulerMaruyama,
            1e8,
            seed,
            n,
        )
    }

    fn z0() -> State<f64> {
        State::new(Field::mode(8, 1, 0.6), Field::mode(8, 2, -0.2))
    }

    fn direction() -> (Field<f64>, Field<f64>) {
        let mut h1 = Field::zeros(8);
        let mut h2 = Field::zeros(8);
        h1.coeffs_mut()[0] = 0.5;
        h1.coeffs_mut()[2] = -0.2;
        h2.coeffs_mut()[1] = 0.3;
        (h1, h2)
    }

    fn exp_g() -> TestFunctional<f64> {
        let mut a1 = Field::zeros(8);
        let mut a2 = Field::zeros(8);
        a1.coeffs_mut()[0] = 1.0;
        a1.coeffs_mut()[1] = -0.5;
        a2.coeffs_mut()[0] = 0.4;
        TestFunctional::ExpLinear { a1, a2, c: 0.3 }
    }

    fn quad_g() -> TestFunctional<f64> {
        TestFunctional::Quadratic { center: State::zeros(8) }
    }

    #[test]
    fn constant_functional_estimates_exactly() {
        // g ≡ 1 realized as exp(0·⟨a,z⟩).
        let g = TestFunctional::ExpLinear {
            a1: Field::zeros(8),
            a2: Field::zeros(8),
            c: 0.0,
        };
        let m = model(Some(3.0));
        let est = estimate_pt(&m, &mc(1, 200), &g, &z0()).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.stderr, 0.0);
        // Sample-size precondition.
        assert!(matches!(
            estimate_pt(&m, &mc(1, 50), &g, &z0()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn deterministic_run_has_zero_stderr() {
        let mut m = model(Some(1.0));
        m.noise = NoiseModel::zero(&m.space);
        let g = quad_g();
        let est = estimate_pt(&m, &mc(1, 200), &g, &z0()).unwrap();
        assert_eq!(est.stderr, 0.0);
        assert_eq!(est.n_excluded, 0);
    }

    #[test]
    fn linear_pt_matches_gaussian_oracle() {
        let m = model(None);
        let cfg = mc(11, 4000);
        let g = quad_g();
        let est = estimate_pt(&m, &cfg, &g, &z0()).unwrap();
        let law = oracle::gaussian_terminal(&m.space, &m.noise, 0.0, 1.0, 0.5, 2000);
        let expect = g.gaussian_expectation(&law, &z0()).unwrap();
        // 4-sigma band plus an O(dt) discretization allowance.
        let band = 4.0 * est.stderr + 0.02 * expect;
        assert!(
            (est.mean - expect).abs() < band,
            "{} vs {expect} (band {band})",
            est.mean
        );
    }

    #[test]
    fn fd_gradient_of_constant_vanishes() {
        let g = TestFunctional::ExpLinear {
            a1: Field::zeros(8),
            a2: Field::zeros(8),
            c: 0.0,
        };
        let m = model(Some(3.0));
        let (h1, h2) = direction();
        let est = fd_gradient(&m, &mc(3, 200), &g, &z0(), &h1, &h2, None).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn deterministic_linear_fd_matches_resolvent_derivative() {
        // σ = 0, ρ = 1: P_T g(z₀) = g(e^{BT} z₀); the directional derivative
        // comes from pushing h through the per-mode matrix exponential.
        let mut m = model(Some(1.0));
        m.noise = NoiseModel::zero(&m.space);
        let cfg = mc(5, 200);
        let g = quad_g();
        let (h1, h2) = direction();
        let fd = fd_gradient(&m, &cfg, &g, &z0(), &h1, &h2, Some(1e-4)).unwrap();
        let law = oracle::gaussian_terminal(&m.space, &m.noise, 1.0, 1.0, 0.5, 2000);
        let exact = g
            .gaussian_directional_derivative(&law, &z0(), &h1, &h2)
            .unwrap();
        // Deterministic: only O(ε²) FD bias and O(dt) scheme bias remain.
        assert!(
            (fd.mean - exact).abs() < 5e-3 * (1.0 + exact.abs()),
            "{} vs {exact}",
            fd.mean
        );
    }

    #[test]
    fn bismut_zero_direction_gives_zero() {
        let m = model(Some(3.0));
        let out = bismut_gradient(
            &m,
            &mc(7, 200),
            &exp_g(),
            &z0(),
            &Field::zeros(8),
            &Field::zeros(8),
            false,
        )
        .unwrap();
        assert_eq!(out.estimate.mean, 0.0);
        assert!(matches!(out.resolution, SignResolution::Defaulted { .. }));
    }

    #[test]
    fn bismut_rejects_rho_gap_without_override() {
        let m = model(Some(1.5));
        let (h1, h2) = direction();
        let err = bismut_gradient(&m, &mc(7, 200), &exp_g(), &z0(), &h1, &h2, false);
        assert!(matches!(err, Err(Error::HypothesisViolated(_))));
        let ok = bismut_gradient(&m, &mc(7, 200), &exp_g(), &z0(), &h1, &h2, true);
        assert!(ok.is_ok());
    }

    #[test]
    fn bismut_matches_gaussian_gradient_for_linear_model() {
        let m = model(None);
        let cfg = mc(13, 6000);
        let g = exp_g();
        let (h1, h2) = direction();
        let out = bismut_gradient(&m, &cfg, &g, &z0(), &h1, &h2, false).unwrap();
        let law = oracle::gaussian_terminal(&m.space, &m.noise, 0.0, 1.0, 0.5, 2000);
        let exact = g
            .gaussian_directional_derivative(&law, &z0(), &h1, &h2)
            .unwrap();
        let band = 4.0 * out.estimate.stderr + 0.03 * exact.abs();
        assert!(
            (out.estimate.mean - exact).abs() < band,
            "bismut {} vs oracle {exact} (band {band}, sign {})",
            out.estimate.mean,
            out.sign
        );
    }

    #[test]
    fn bismut_agrees_with_fd_for_cubic_drift() {
        let m = model(Some(3.0));
        let cfg = mc(17, 6000);
        let g = exp_g();
        let (h1, h2) = direction();
        let b = bismut_gradient(&m, &cfg, &g, &z0(), &h1, &h2, false).unwrap();
        let fd = fd_gradient(&m, &cfg, &g, &z0(), &h1, &h2, None).unwrap();
        let band = 4.0 * b.estimate.combined_stderr(&fd) + 1e-3;
        assert!(
            (b.estimate.mean - fd.mean).abs() < band,
            "bismut {} vs fd {} (band {band})",
            b.estimate.mean,
            fd.mean
        );
    }

    #[test]
    fn ibp_sides_agree_and_match_gaussian_oracle() {
        let m = model(None);
        let cfg = mc(19, 6000);
        let g = quad_g();
        let (h1, h2) = direction();
        let out = ibp_estimator(&m, &cfg, &g, &z0(), &h1, &h2).unwrap();
        let band = 4.0 * out.diff.stderr + 1e-3;
        assert!(out.diff.mean.abs() < band, "diff {} band {band}", out.diff.mean);
        let law = oracle::gaussian_terminal(&m.space, &m.noise, 0.0, 1.0, 0.5, 2000);
        let exact = g.gaussian_expected_gradient(&law, &z0(), &h1, &h2).unwrap();
        let b2 = 4.0 * out.lhs.stderr + 0.02 * (1.0 + exact.abs());
        assert!((out.lhs.mean - exact).abs() < b2, "{} vs {exact}", out.lhs.mean);
    }

    #[test]
    fn ibp_rejects_functional_without_gradient() {
        let m = model(Some(2.0));
        let g = TestFunctional::IndicatorSmooth {
            center: State::zeros(8),
            radius: 1.0,
            sharpness: 4.0,
        };
        let (h1, h2) = direction();
        let err = ibp_estimator(&m, &mc(3, 200), &g, &z0(), &h1, &h2);
        assert!(matches!(err, Err(Error::UnsupportedFunctional(_))));
    }

    #[test]
    fn ibp_constant_functional_has_zero_both_sides() {
        let g = TestFunctional::ExpLinear {
            a1: Field::zeros(8),
            a2: Field::zeros(8),
            c: 0.0,
        };
        let m = model(Some(2.0));
        let (h1, h2) = direction();
        let out = ibp_estimator(&m, &mc(23, 400), &g, &z0(), &h1, &h2).unwrap();
        assert_eq!(out.lhs.mean, 0.0);
        assert!(out.rhs.mean.abs() < 4.0 * out.rhs.stderr + 1e-12);
    }

    #[test]
    fn entropy_zero_direction_is_exactly_zero() {
        let m = model(Some(3.0));
        let ctl = CouplingControls::forward(0.5, Field::zeros(8), Field::zeros(8), 1.0).unwrap();
        let est = entropy_of_weight(&m, &mc(29, 200), &z0(), &ctl).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn entropy_requires_unit_epsilon() {
        let m = model(Some(3.0));
        let (h1, h2) = direction();
        let ctl = CouplingControls::forward(0.5, h1, h2, 0.5).unwrap();
        assert!(matches!(
            entropy_of_weight(&m, &mc(29, 200), &z0(), &ctl),
            Err(Error::HypothesisViolated(_))
        ));
    }

    #[test]
    fn entropy_matches_deterministic_integrand_identity() {
        // Zero drift: η = φ + f is deterministic, so
        // E R log R = ½ ∫ ‖η‖²_σ dt exactly in the discrete model.
        let m = model(None);
        let cfg = mc(31, 8000);
        let (h1, h2) = direction();
        let (h1, h2) = (h1.scaled(0.1), h2.scaled(0.1));
        let ctl = CouplingControls::forward(0.5, h1.clone(), h2.clone(), 1.0).unwrap();
        let est = entropy_of_weight(&m, &cfg, &z0(), &ctl).unwrap();

        let tables = ControlTables::build(&ctl, &m.space, &cfg.grid, false).unwrap();
        let dt = cfg.grid.dt();
        let mut half_int = 0.0;
        for k in 0..cfg.grid.n_steps() {
            let mut sq = 0.0;
            for j in 0..8 {
                let r = tables.eps_phi_plus_f[k][j] / m.noise.sigma()[j];
                sq += r * r;
            }
            half_int += 0.5 * sq * dt;
        }
        assert!(
            (est.mean - half_int).abs() < 4.0 * est.stderr,
            "{} vs {half_int} ± {}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn weight_mean_is_one_within_band() {
        let m = model(Some(3.0));
        let cfg = mc(37, 8000);
        let (h1, h2) = direction();
        let ctl = CouplingControls::forward(0.5, h1.scaled(0.2), h2.scaled(0.2), 1.0).unwrap();
        let est = weight_mean(&m, &cfg, &z0(), &ctl).unwrap();
        assert!(
            (est.mean - 1.0).abs() < 4.0 * est.stderr,
            "E R = {} ± {}",
            est.mean,
            est.stderr
        );
    }

    #[test]
    fn power_weight_trivial_and_deterministic_cases() {
        let m = model(Some(1.5));
        let (h1, h2) = direction();
        // h = 0: R ≡ 1 exactly.
        let ctl0 = CouplingControls::forward(0.05, Field::zeros(8), Field::zeros(8), 1.0).unwrap();
        let cfg = McConfig::new(
            TimeGrid::new(0.05, 50).unwrap(),
            Scheme::EulerMaruyama,
            1e8,
            41,
            400,
        );
        let out = power_of_weight(&m, &cfg, &z0(), &ctl0, 2.0).unwrap();
        assert_eq!(out.value, 1.0);

        // Deterministic integrand (zero drift): closed-form Gaussian MGF.
        // The control cost scales like |h|²/T³, so the direction is shrunk
        // to keep the weight sample well conditioned.
        let mz = model(None);
        let (h1, h2) = (h1.scaled(0.002), h2.scaled(0.002));
        let t0 = bounds::t_zero(&mz, &h1, &h2, 2.0).unwrap();
        let horizon = (t0 / 2.0).min(0.2);
        let n = ((horizon / 1e-3).round() as usize).max(10);
        let grid = TimeGrid::new(horizon, n).unwrap();
        let cfg = McConfig::new(grid.clone(), Scheme::EulerMaruyama, 1e8, 43, 8000);
        let ctl = CouplingControls::forward(horizon, h1.clone(), h2.clone(), 1.0).unwrap();
        let out = power_of_weight(&mz, &cfg, &z0(), &ctl, 2.0).unwrap();
        // For deterministic η: E R^q = exp(q(q−1)/2 ∫‖η‖²_σ dt), q = p/(p−1).
        let tables = ControlTables::build(&ctl, &mz.space, &grid, false).unwrap();
        let mut int = 0.0;
        for k in 0..grid.n_steps() {
            let mut sq = 0.0;
            for j in 0..8 {
                let r = tables.eps_phi_plus_f[k][j] / mz.noise.sigma()[j];
                sq += r * r;
            }
            int += sq * grid.dt();
        }
        let q = 2.0;
        let expect_raw = (q * (q - 1.0) / 2.0 * int).exp();
        assert!(
            (out.raw.mean - expect_raw).abs() < 4.0 * out.raw.stderr,
            "{} vs {expect_raw} ± {}",
            out.raw.mean,
            out.raw.stderr
        );
        let expect_value = expect_raw.powf(out.exponent);
        assert!((out.value - expect_value).abs() < 8.0 * out.stderr + 1e-3);
    }

    #[test]
    fn power_weight_enforces_hypotheses() {
        let m = model(Some(3.0));
        let (h1, h2) = direction();
        let ctl = CouplingControls::forward(0.5, h1.clone(), h2.clone(), 1.0).unwrap();
        assert!(matches!(
            power_of_weight(&m, &mc(1, 200), &z0(), &ctl, 2.0),
            Err(Error::HypothesisViolated(_))
        ));
        // Horizon above T0 is rejected for admissible rho.
        let m15 = model(Some(1.5));
        let big = CouplingControls::forward(0.5, h1, h2, 1.0).unwrap();
        assert!(matches!(
            power_of_weight(&m15, &mc(1, 200), &z0(), &big, 2.0),
            Err(Error::HypothesisViolated(_))
        ));
    }

    #[test]
    fn estimators_are_deterministic() {
        let m = model(Some(3.0));
        let cfg = mc(101, 500);
        let g = exp_g();
        let a = estimate_pt(&m, &cfg, &g, &z0()).unwrap();
        let b = estimate_pt(&m, &cfg, &g, &z0()).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn monotone_functionals_give_ordered_estimates() {
        // g₁ ≤ g₂ pointwise ⇒ estimates ordered within combined CI.
        let m = model(Some(2.0));
        let cfg = mc(7, 2000);
        let center = State::zeros(8);
        let g1 = TestFunctional::BoundedSmooth { center: center.clone() };
        // g₂ = 1 ≥ g₁.
        let g2 = TestFunctional::ExpLinear {
            a1: Field::zeros(8),
            a2: Field::zeros(8),
            c: 0.0,
        };
        let e1 = estimate_pt(&m, &cfg, &g1, &z0()).unwrap();
        let e2 = estimate_pt(&m, &cfg, &g2, &z0()).unwrap();
        assert!(e1.mean <= e2.mean + 4.0 * e1.combined_stderr(&e2));
    }
}
