//! Closed-form constants of the Harnack-type inequalities and the
//! Monte-Carlo verifiers that pair estimates against them.
//!
//! Constant formulas are evaluated literally, branch by branch in
//! the growth exponent ρ, including the `T ∧ 1` normalizations and the
//! unspecified absolute constant `C`, which is exposed as the configurable
//! `c_abs` (default 16). Branch continuity across ρ = 2 is not asserted:
//! adjacent branches need not agree at the seam.
//!
//! Direction seminorms (all diagonal in the eigenbasis):
//!
//! ```text
//! |(h₁,h₂)|_{σ₀}     = ‖σ₀^{−1}h₁‖ + ‖A^{−1/2}σ₀^{−1}h₂‖
//! |(h₁,h₂)|_{σ₀+1/2} = ‖A^{1/2}σ₀^{−1}h₁‖ + ‖σ₀^{−1}h₂‖
//! |(h₁,h₂)|_{1/2}    = ‖A^{1/2}h₁‖ + ‖h₂‖      (adopted convention)
//! ```

use serde::Serialize;

use crate::coupling::{ControlKind, ControlTables, CouplingControls};
use crate::dynamics::{Model, NoiseModel};
use crate::error::{Error, Result};
use crate::estimators::{
    self, estimate_with, par_values, McConfig, TestFunctional,
};
use crate::nonlinearity::energy;
use crate::scalar::Real;
use crate::spectral::{Field, SpectralSpace, State};
use crate::stats::{excess_kurtosis, McEstimate};

/// The three direction seminorms entering the bounds.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionNorms<T> {
    /// `|(h₁,h₂)|_{σ₀}`.
    pub sigma0: T,
    /// `|(h₁,h₂)|_{σ₀+1/2}`.
    pub sigma0_half: T,
    /// `|(h₁,h₂)|_{1/2}`.
    pub half: T,
}

pub fn direction_norms<T: Real>(
    space: &SpectralSpace<T>,
    noise: &NoiseModel<T>,
    h1: &Field<T>,
    h2: &Field<T>,
) -> DirectionNorms<T> {
    let mut s0_a = T::zero();
    let mut s0_b = T::zero();
    let mut sh_a = T::zero();
    let mut sh_b = T::zero();
    let mut h_a = T::zero();
    let mut h_b = T::zero();
    for j in 0..space.n_modes() {
        let l = space.lambdas()[j];
        let s0 = noise.sigma0()[j];
        let a = h1.coeffs()[j];
        let b = h2.coeffs()[j];
        s0_a += a * a / (s0 * s0);
        s0_b += b * b / (l * s0 * s0);
        sh_a += l * a * a / (s0 * s0);
        sh_b += b * b / (s0 * s0);
        h_a += l * a * a;
        h_b += b * b;
    }
    DirectionNorms {
        sigma0: s0_a.sqrt() + s0_b.sqrt(),
        sigma0_half: sh_a.sqrt() + sh_b.sqrt(),
        half: h_a.sqrt() + h_b.sqrt(),
    }
}

/// `𝓔_σ(p) = ‖σ‖²_HS + 2(p−1)⁺‖σ‖²`.
pub fn e_sigma<T: Real>(noise: &NoiseModel<T>, p: T) -> T {
    let plus = (p - T::one()).max(T::zero());
    noise.hs_norm_sq() + T::of(2.0) * plus * noise.op_norm() * noise.op_norm()
}

/// `𝓔_T(p) = (e^{(p−1)⁺𝓔_σ(p)T} − 1)/((p−1)⁺𝓔_σ(p)T)`, with limit 1.
pub fn e_t<T: Real>(noise: &NoiseModel<T>, p: T, t: T) -> T {
    let a = (p - T::one()).max(T::zero()) * e_sigma(noise, p) * t;
    if a.abs() < T::of(1e-14) {
        T::one()
    } else {
        a.exp_m1() / a
    }
}

/// `expm1((p−1)·a·s)/((p−1)·a)` with limit `s`; the time-integrated Gronwall
/// factor of the energy-moment bound.
fn gronwall_factor<T: Real>(p_minus_one_a: T, s: T) -> T {
    if (p_minus_one_a * s).abs() < T::of(1e-14) {
        s
    } else {
        (p_minus_one_a * s).exp_m1() / p_minus_one_a
    }
}

/// Additive log-Harnack cost `Ψ_ρ` with full provenance.
#[derive(Debug, Clone, Serialize)]
pub struct PsiBound<T> {
    pub value: T,
    /// Drift-difference contribution `Φ_ρ`.
    pub phi: T,
    /// Control-cost remainder `C·K₁²·[…]`.
    pub remainder: T,
    pub branch: String,
    /// True when `K₁ = 0` and the remainder kept a unit factor instead of
    /// vanishing (the control cost does not scale with `K₁`).
    pub k1_guard_applied: bool,
    pub t_eff: T,
    pub c_abs: T,
    pub energy_tilde: T,
    pub norms: DirectionNorms<T>,
}

/// Evaluates `Ψ_ρ(z̃, h₁, h₂, T ∧ 1)`; `z_tilde` is the displaced starting
/// point whose energy enters the drift branch.
pub fn psi_bound<T: Real>(
    model: &Model<T>,
    z_tilde: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    t: T,
    c_abs: T,
) -> PsiBound<T> {
    let params = &model.params;
    let noise = &model.noise;
    let space = &model.space;
    let rho = params.rho;
    let tb = t.min(T::one());
    let norms = direction_norms(space, noise, h1, h2);
    let nh = norms.half;
    let en = energy(space, params, z_tilde);
    let lam = noise.lambda_const();
    let c_dom = space.embedding_const();
    let two = T::of(2.0);

    let (phi, branch) = if rho == T::one() {
        let modulus = (c_dom.abs_powf(two * params.gamma)
            * nh.abs_powf(two * params.gamma))
        .min(T::one());
        let v = lam
            * lam
            * tb
            * ((params.k3 + params.k4) * (params.k3 + params.k4) * nh * nh
                + params.c5
                    * params.c5
                    * modulus
                    * (nh * nh + en + e_sigma(noise, T::one()) * tb));
        (v, "rho = 1")
    } else if rho <= two {
        let c_pow = c_dom.abs_powf(two * rho - two);
        let inner = (en + e_sigma(noise, rho - T::one()) * tb).abs_powf(rho - T::one());
        let v = lam
            * lam
            * tb
            * (nh * nh * (params.k3 * params.k3 * c_pow * inner + params.k4 * params.k4)
                + c_pow
                    * params.c4
                    * params.c4
                    * (nh.abs_powf(two * rho)
                        + nh.abs_powf(two * rho - two)
                            * (en + e_sigma(noise, T::one()) * tb)));
        (v, "rho in (1,2]")
    } else {
        let c_pow = c_dom.abs_powf(two * rho - two);
        let lead = lam
            * lam
            * c_pow
            * (params.c1 * params.c1 + params.k3 * params.k3)
            * tb
            * nh
            * nh
            * (en + (e_sigma(noise, rho - T::one()) * tb).abs_powf(T::one() / (rho - T::one())))
                .abs_powf(rho - T::one())
            * e_t(noise, rho - T::one(), tb);
        let neg_part = (T::of(3.0) - rho).max(T::zero());
        let inner_exp = (T::one() - neg_part) / (rho - two);
        let mid = T::of(2.0).abs_powf((rho - T::one()).max(two))
            * lam
            * lam
            * c_pow
            * tb
            * (params.c3 * params.c3 * nh.abs_powf(two * params.w + two)
                + params.c1
                    * params.c1
                    * nh.abs_powf(two * rho - two)
                    * (en + e_sigma(noise, T::one()) * tb)
                + params.c1 * params.c1 * nh.abs_powf(two * rho)
                + params.c2
                    * params.c2
                    * nh.abs_powf(T::of(4.0))
                    * (en + (e_sigma(noise, rho - two) * tb).abs_powf(inner_exp))
                        .abs_powf(rho - two)
                    * e_t(noise, rho - two, tb));
        let tail = tb
            * (params.k4 * params.k4 * nh * nh
                + params.c3
                    * params.c3
                    * nh.abs_powf(two * params.w)
                    * (en + e_sigma(noise, T::one()) * tb));
        (lead + mid + tail, "rho > 2")
    };

    // The control cost is independent of the drift bound; a vanishing K₁
    // must not erase it.
    let k1_guard_applied = params.k1 == T::zero();
    let k1_sq = if k1_guard_applied { T::one() } else { params.k1 * params.k1 };
    let remainder = c_abs
        * k1_sq
        * ((T::one() + tb * tb) / (tb * tb * tb) * norms.sigma0 * norms.sigma0
            + (T::one() + tb) / tb * norms.sigma0_half * norms.sigma0_half);

    PsiBound {
        value: phi + remainder,
        phi,
        remainder,
        branch: branch.to_string(),
        k1_guard_applied,
        t_eff: tb,
        c_abs,
        energy_tilde: en,
        norms,
    }
}

/// `K(h₁,h₂) = K₃²(ρ−1)|h|²_{1/2} + C₄²|h|^{2ρ−2}_{1/2}`.
pub fn k_direction<T: Real>(model: &Model<T>, h1: &Field<T>, h2: &Field<T>) -> T {
    let norms = direction_norms(&model.space, &model.noise, h1, h2);
    let nh = norms.half;
    let rho = model.params.rho;
    let two = T::of(2.0);
    model.params.k3 * model.params.k3 * (rho - T::one()) * nh * nh
        + model.params.c4 * model.params.c4 * nh.abs_powf(two * rho - two)
}

/// Admissible horizon cap `T₀` for the weight power bound.
pub fn t_zero<T: Real>(model: &Model<T>, h1: &Field<T>, h2: &Field<T>, p: T) -> Result<T> {
    if model.noise.is_degenerate() {
        return Err(Error::HypothesisViolated(
            "horizon cap needs nondegenerate noise".into(),
        ));
    }
    let rho = model.params.rho;
    let op = model.noise.op_norm();
    if rho == T::one() {
        let c5sq = (model.params.c5 * model.params.c5).max(T::one());
        Ok((p - T::one()) / (T::of(4.0) * c5sq * (T::of(2.0) * p).sqrt() * op))
    } else if rho <= T::of(2.0) {
        let k = k_direction(model, h1, h2);
        let c_pow = model.space.embedding_const().abs_powf(rho - T::one());
        Ok((p.sqrt() - T::one())
            / (T::of(4.0)
                * T::of(3.0).sqrt()
                * op
                * model.noise.lambda_const()
                * c_pow
                * k.sqrt().max(T::one())))
    } else {
        Err(Error::HypothesisViolated(format!(
            "power-Harnack horizon cap requires rho in [1, 2], got {rho}"
        )))
    }
}

/// Multiplicative power-Harnack cost `Γ` with provenance.
#[derive(Debug, Clone, Serialize)]
pub struct GammaBound<T> {
    pub gamma: T,
    pub t0: T,
    /// Horizon the bound was evaluated at (`T ∧ T₀`).
    pub t_eff: T,
    pub k_dir: T,
    pub c_tilde_sq: Option<T>,
    pub branch: String,
    /// Individual exponential factors, in formula order.
    pub factors: Vec<T>,
    pub p: T,
    pub c_abs: T,
    pub energy_tilde: T,
    pub norms: DirectionNorms<T>,
}

/// Evaluates `Γ(z̃, h₁, h₂)` at `T ∧ T₀` for `ρ ∈ [1, 2]`, `p > 1`.
pub fn gamma_bound<T: Real>(
    model: &Model<T>,
    z_tilde: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    t: T,
    p: T,
    c_abs: T,
) -> Result<GammaBound<T>> {
    if !(p > T::one()) {
        return Err(Error::InvalidConfig(format!("p = {p} must exceed 1")));
    }
    let rho = model.params.rho;
    if !(rho >= T::one() && rho <= T::of(2.0)) {
        return Err(Error::HypothesisViolated(format!(
            "power-Harnack bound requires rho in [1, 2], got {rho}"
        )));
    }
    let t0 = t_zero(model, h1, h2, p)?;
    let te = t.min(t0);
    let norms = direction_norms(&model.space, &model.noise, h1, h2);
    let nh = norms.half;
    let en = energy(&model.space, &model.params, z_tilde);
    let op = model.noise.op_norm();
    let hs = model.noise.hs_norm_sq();
    let k = k_direction(model, h1, h2);
    let two = T::of(2.0);
    let one = T::one();
    let c_dom = model.space.embedding_const();

    let (factors, c_tilde_sq, branch): (Vec<T>, Option<T>, &str) = if rho == one {
        if model.params.c5 == T::zero() {
            let f1 = (c_abs * p / ((p - one) * (p - one))
                * ((one + (te * te).min(one)) / te.min(one)
                    * norms.sigma0_half
                    * norms.sigma0_half
                    + (one + (te * te).min(one)) / (te * te * te).min(one)
                        * norms.sigma0
                        * norms.sigma0))
                .exp();
            (vec![f1], None, "rho = 1, C5 = 0")
        } else {
            let f1 = (c_abs * p / ((p - one) * (p - one))
                * ((one + te * te) / te * norms.sigma0_half * norms.sigma0_half
                    + (one + te * te) / (te * te * te) * norms.sigma0 * norms.sigma0))
                .exp();
            let modulus = (model.params.c5
                * model.params.c5
                * c_dom.abs_powf(two * model.params.gamma)
                * nh.abs_powf(two * model.params.gamma))
            .min(one);
            let f2 = ((p - one)
                * modulus
                * (en / (two * op * op * te) + hs * T::of(2.0f64.ln()) / (op * op)))
                .exp();
            (vec![f1, f2], None, "rho = 1, C5 > 0")
        }
    } else {
        let c_pow = c_dom.abs_powf(two * rho - two);
        let c_tilde_sq =
            T::of(48.0) * op * op * te * te * model.noise.lambda_const()
                * model.noise.lambda_const()
                * c_pow
                * k.max(one);
        let budget = (p.sqrt() - one) * (p.sqrt() - one);
        if c_tilde_sq > budget * (one + T::of(1e-9)) {
            return Err(Error::HypothesisViolated(format!(
                "c_tilde^2 = {c_tilde_sq} exceeds (sqrt(p)-1)^2 = {budget}; shrink T"
            )));
        }
        let f1 = ((p - one)
            * (((two - rho) * model.params.k3 * model.params.k3
                + model.params.k4 * model.params.k4 / c_pow)
                * nh
                * nh
                + model.params.c4 * model.params.c4 * nh.abs_powf(two * rho))
            / (T::of(8.0) * op * op * te * k.max(one)))
        .exp();
        let f2 = (c_abs * p / (two * (p - one))
            * ((one + te * te) / te * norms.sigma0_half * norms.sigma0_half
                + (one + te * te) / (te * te * te) * norms.sigma0 * norms.sigma0))
            .exp();
        let f3 = (two * p.sqrt() * (p.sqrt() + one) * c_tilde_sq / (p.sqrt() - one)
            * k.min(one)
            * (en / (op * op * te) + hs * T::of(4.0f64.ln()) / (op * op)))
            .exp();
        (vec![f1, f2, f3], Some(c_tilde_sq), "rho in (1,2]")
    };

    let gamma = factors.iter().fold(one, |acc, &f| acc * f);
    Ok(GammaBound {
        gamma,
        t0,
        t_eff: te,
        k_dir: k,
        c_tilde_sq,
        branch: branch.to_string(),
        factors,
        p,
        c_abs,
        energy_tilde: en,
        norms,
    })
}

/// Aggregate of every bound constant for one configuration, for audit
/// output.
#[derive(Debug, Clone, Serialize)]
pub struct BoundConstants<T> {
    pub op_norm: T,
    pub hs_norm_sq: T,
    pub lambda: T,
    pub embedding_const: T,
    pub e_sigma_1: T,
    pub e_sigma_p: T,
    pub e_t_p: T,
    pub norms: DirectionNorms<T>,
    pub k_dir: T,
    pub t0: Option<T>,
    pub psi: PsiBound<T>,
    pub gamma: Option<GammaBound<T>>,
}

pub fn bound_constants<T: Real>(
    model: &Model<T>,
    z_tilde: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    t: T,
    p: T,
    c_abs: T,
) -> BoundConstants<T> {
    BoundConstants {
        op_norm: model.noise.op_norm(),
        hs_norm_sq: model.noise.hs_norm_sq(),
        lambda: model.noise.lambda_const(),
        embedding_const: model.space.embedding_const(),
        e_sigma_1: e_sigma(&model.noise, T::one()),
        e_sigma_p: e_sigma(&model.noise, p),
        e_t_p: e_t(&model.noise, p, t),
        norms: direction_norms(&model.space, &model.noise, h1, h2),
        k_dir: k_direction(model, h1, h2),
        t0: t_zero(model, h1, h2, p).ok(),
        psi: psi_bound(model, z_tilde, h1, h2, t, c_abs),
        gamma: gamma_bound(model, z_tilde, h1, h2, t, p, c_abs).ok(),
    }
}

fn rel_stderr<T: Real>(est: &McEstimate<T>) -> T {
    est.stderr / est.mean.abs().max(T::of(1e-300))
}

/// Log-Harnack verdict: `P_T log g(z̃) ≤ log P_T g(z₀) + cost`, with the
/// sampled-entropy route as the rigorous check and the closed-form `Ψ_ρ`
/// as the reported secondary bound.
#[derive(Debug, Clone, Serialize)]
pub struct LogHarnackVerdict<T> {
    pub lhs: McEstimate<T>,
    pub pt_base: McEstimate<T>,
    pub entropy: McEstimate<T>,
    pub rhs_entropy: T,
    pub rhs_closed_form: T,
    pub band_entropy: T,
    pub band_closed_form: T,
    pub pass_entropy: bool,
    pub pass_closed_form: bool,
    pub psi: PsiBound<T>,
}

pub fn check_log_harnack<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    c_abs: T,
) -> Result<LogHarnackVerdict<T>> {
    if !g.strictly_positive() {
        return Err(Error::UnsupportedFunctional(format!(
            "log-Harnack needs strictly positive g, got {}",
            g.kind_name()
        )));
    }
    let z_tilde = z0.shifted(T::one(), h1, h2);
    let lhs = estimate_with(model, mc, &z_tilde, |x, y| g.eval_parts(x, y).ln())?;
    let pt_base = estimators::estimate_pt(model, mc, g, z0)?;
    let controls = CouplingControls::forward(
        mc.grid.horizon(),
        h1.clone(),
        h2.clone(),
        T::one(),
    )?;
    let entropy = estimators::entropy_of_weight(model, mc, z0, &controls)?;
    let log_pt = pt_base.mean.ln();
    let rhs_entropy = log_pt + entropy.mean;
    let band_entropy = T::of(4.0)
        * (lhs.stderr * lhs.stderr
            + rel_stderr(&pt_base) * rel_stderr(&pt_base)
            + entropy.stderr * entropy.stderr)
            .sqrt();
    let psi = psi_bound(model, &z_tilde, h1, h2, mc.grid.horizon(), c_abs);
    let rhs_closed_form = log_pt + psi.value;
    let band_closed_form = T::of(4.0)
        * (lhs.stderr * lhs.stderr + rel_stderr(&pt_base) * rel_stderr(&pt_base)).sqrt();
    Ok(LogHarnackVerdict {
        pass_entropy: lhs.mean <= rhs_entropy + band_entropy,
        pass_closed_form: lhs.mean <= rhs_closed_form + band_closed_form,
        lhs,
        pt_base,
        entropy,
        rhs_entropy,
        rhs_closed_form,
        band_entropy,
        band_closed_form,
        psi,
    })
}

/// Power-Harnack verdict `(P_T g(z̃))^p ≤ P_T g^p(z₀) · Γ` at `T ∧ T₀`.
#[derive(Debug, Clone, Serialize)]
pub struct HarnackPowerVerdict<T> {
    pub lhs: T,
    pub rhs: T,
    pub pt_tilde: McEstimate<T>,
    pub pt_pow_base: McEstimate<T>,
    pub rel_band: T,
    pub pass: bool,
    pub p: T,
    pub horizon_used: T,
    pub bound: GammaBound<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn check_harnack_power<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    p: T,
    c_abs: T,
) -> Result<HarnackPowerVerdict<T>> {
    let t0 = t_zero(model, h1, h2, p)?;
    let mc_eff = mc.with_horizon_capped(t0)?;
    let z_tilde = z0.shifted(T::one(), h1, h2);
    let bound = gamma_bound(model, &z_tilde, h1, h2, mc_eff.grid.horizon(), p, c_abs)?;
    let pt_tilde = estimators::estimate_pt(model, &mc_eff, g, &z_tilde)?;
    let pt_pow_base = estimate_with(model, &mc_eff, z0, |x, y| {
        g.eval_parts(x, y).abs_powf(p)
    })?;
    let lhs = pt_tilde.mean.abs_powf(p);
    let rhs = pt_pow_base.mean * bound.gamma;
    let rel_band = T::of(4.0)
        * ((p * rel_stderr(&pt_tilde)) * (p * rel_stderr(&pt_tilde))
            + rel_stderr(&pt_pow_base) * rel_stderr(&pt_pow_base))
            .sqrt();
    Ok(HarnackPowerVerdict {
        lhs,
        rhs,
        pass: lhs <= rhs * (T::one() + rel_band),
        rel_band,
        pt_tilde,
        pt_pow_base,
        p,
        horizon_used: mc_eff.grid.horizon(),
        bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftHarnackMode {
    Log,
    Power,
}

/// Shift-Harnack verdict: the displacement acts on the test function,
/// `P_T log g(z₀) ≤ log P_T g(· + h)(z₀) + Ψ_ρ(z₀, h, T)` (log mode), or the
/// power form for ρ = 1, C₅ = 0.
#[derive(Debug, Clone, Serialize)]
pub struct ShiftHarnackVerdict<T> {
    pub mode: ShiftHarnackMode,
    pub lhs: T,
    pub rhs: T,
    pub band: T,
    pub pass: bool,
    pub base_estimate: McEstimate<T>,
    pub shifted_estimate: McEstimate<T>,
    pub psi: Option<PsiBound<T>>,
    pub gamma: Option<GammaBound<T>>,
    pub p: Option<T>,
    pub horizon_used: T,
}

#[allow(clippy::too_many_arguments)]
pub fn check_shift_harnack<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    h1: &Field<T>,
    h2: &Field<T>,
    mode: ShiftHarnackMode,
    p: T,
    c_abs: T,
) -> Result<ShiftHarnackVerdict<T>> {
    let shift_eval = |x: &[T], y: &[T]| {
        let xs: Vec<T> = x.iter().zip(h1.coeffs()).map(|(&v, &h)| v + h).collect();
        let ys: Vec<T> = y.iter().zip(h2.coeffs()).map(|(&v, &h)| v + h).collect();
        g.eval_parts(&xs, &ys)
    };
    match mode {
        ShiftHarnackMode::Log => {
            if !g.strictly_positive() {
                return Err(Error::UnsupportedFunctional(
                    "shift log-Harnack needs strictly positive g".into(),
                ));
            }
            let base = estimate_with(model, mc, z0, |x, y| g.eval_parts(x, y).ln())?;
            let shifted = estimate_with(model, mc, z0, |x, y| shift_eval(x, y))?;
            let psi = psi_bound(model, z0, h1, h2, mc.grid.horizon(), c_abs);
            let rhs = shifted.mean.ln() + psi.value;
            let band = T::of(4.0)
                * (base.stderr * base.stderr + rel_stderr(&shifted) * rel_stderr(&shifted))
                    .sqrt();
            Ok(ShiftHarnackVerdict {
                mode,
                lhs: base.mean,
                rhs,
                band,
                pass: base.mean <= rhs + band,
                base_estimate: base,
                shifted_estimate: shifted,
                psi: Some(psi),
                gamma: None,
                p: None,
                horizon_used: mc.grid.horizon(),
            })
        }
        ShiftHarnackMode::Power => {
            if !(model.params.rho == T::one() && model.params.c5 == T::zero()) {
                return Err(Error::HypothesisViolated(
                    "shift power-Harnack requires rho = 1 with C5 = 0".into(),
                ));
            }
            let t0 = t_zero(model, h1, h2, p)?;
            let mc_eff = mc.with_horizon_capped(t0)?;
            let gamma = gamma_bound(model, z0, h1, h2, mc_eff.grid.horizon(), p, c_abs)?;
            let base = estimators::estimate_pt(model, &mc_eff, g, z0)?;
            let shifted_pow = estimate_with(model, &mc_eff, z0, |x, y| {
                shift_eval(x, y).abs_powf(p)
            })?;
            let lhs = base.mean.abs_powf(p);
            let rhs = shifted_pow.mean * gamma.gamma;
            let band = T::of(4.0)
                * ((p * rel_stderr(&base)) * (p * rel_stderr(&base))
                    + rel_stderr(&shifted_pow) * rel_stderr(&shifted_pow))
                    .sqrt();
            Ok(ShiftHarnackVerdict {
                mode,
                lhs,
                rhs,
                band,
                pass: lhs <= rhs * (T::one() + band),
                base_estimate: base,
                shifted_estimate: shifted_pow,
                psi: None,
                gamma: Some(gamma),
                p: Some(p),
                horizon_used: mc_eff.grid.horizon(),
            })
        }
    }
}

/// Weighted time-integrated energy moment against its closed form:
/// `∫₀ˢ E[R_s 𝓔(Z̃(r))^p] dr ≤ (𝓔(z̃₀)^p + 𝓔_σ(p)s)·Gronwall(p, s)`.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyMomentVerdict<T> {
    pub lhs: McEstimate<T>,
    pub rhs: T,
    pub pass: bool,
    pub p: T,
    pub s: T,
    pub energy_tilde0: T,
}

pub fn check_energy_moment<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z_tilde0: &State<T>,
    controls: &CouplingControls<T>,
    p: T,
    s: T,
) -> Result<EnergyMomentVerdict<T>> {
    if !(p >= T::one()) {
        return Err(Error::InvalidConfig(format!("p = {p} must be at least 1")));
    }
    if s > mc.grid.horizon() * (T::one() + T::of(1e-9)) {
        return Err(Error::InvalidConfig(format!(
            "s = {s} exceeds the grid horizon"
        )));
    }
    if controls.kind() != ControlKind::Forward {
        return Err(Error::HypothesisViolated(
            "energy-moment bound is for the forward coupling".into(),
        ));
    }
    let z0 = z_tilde0.shifted(-controls.epsilon, &controls.h1, &controls.h2);
    let tables = ControlTables::build(
        controls,
        &model.space,
        &mc.grid,
        model.params.linear_coefficient().is_none(),
    )?;
    let dt = mc.grid.dt();
    let k_s = ((s / dt).to_f64_lossy().round() as usize)
        .clamp(1, mc.grid.n_steps());
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        let mut integral = T::zero();
        let mut lw_at_s = T::zero();
        let out = crate::coupling::drive_coupled(
            model,
            &mc.grid,
            mc.scheme,
            mc.guard,
            &z0,
            &tables,
            mc.seed,
            traj,
            true,
            |view| {
                if view.blown {
                    return;
                }
                if view.k <= k_s {
                    let w = if view.k == 0 || view.k == k_s {
                        T::of(0.5)
                    } else {
                        T::one()
                    };
                    if let Some(en) = view.energy_comp {
                        integral += w * en.abs_powf(p) * dt;
                    }
                }
                if view.k == k_s {
                    lw_at_s = view.log_weight;
                }
            },
        );
        out.map(|_| lw_at_s.exp() * integral)
    });
    let lhs = McEstimate::from_values(&values, excluded)?;
    let en0 = energy(&model.space, &model.params, z_tilde0);
    let es = e_sigma(&model.noise, p);
    let rhs = (en0.abs_powf(p) + es * s) * gronwall_factor((p - T::one()) * es, s);
    Ok(EnergyMomentVerdict {
        pass: lhs.mean <= rhs + T::of(4.0) * lhs.stderr,
        lhs,
        rhs,
        p,
        s,
        energy_tilde0: en0,
    })
}

/// Weighted exponential moment of the time-averaged energy against
/// `exp{𝓔(z̃₀)/(‖σ‖²T) + ‖σ‖²_HS log4/‖σ‖²}`.
#[derive(Debug, Clone, Serialize)]
pub struct ExpMomentVerdict<T> {
    pub lhs: McEstimate<T>,
    pub rhs: T,
    pub pass: bool,
    /// Exponent scale `1/(8‖σ‖²T²)`.
    pub exponent_scale: T,
    /// Excess kurtosis of the weighted sample (tail-heaviness diagnostic).
    pub tail_kurtosis: T,
    pub energy_tilde0: T,
}

pub fn check_exp_moment<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    z_tilde0: &State<T>,
    controls: &CouplingControls<T>,
) -> Result<ExpMomentVerdict<T>> {
    if model.noise.is_degenerate() {
        return Err(Error::HypothesisViolated(
            "exponential moment bound needs nondegenerate noise".into(),
        ));
    }
    if controls.kind() != ControlKind::Forward {
        return Err(Error::HypothesisViolated(
            "exponential moment bound is for the forward coupling".into(),
        ));
    }
    let t = mc.grid.horizon();
    let op = model.noise.op_norm();
    let scale = T::one() / (T::of(8.0) * op * op * t * t);
    let z0 = z_tilde0.shifted(-controls.epsilon, &controls.h1, &controls.h2);
    let tables = ControlTables::build(
        controls,
        &model.space,
        &mc.grid,
        model.params.linear_coefficient().is_none(),
    )?;
    let dt = mc.grid.dt();
    let (values, excluded) = par_values(mc.n_traj, |traj| {
        let mut integral = T::zero();
        let out = crate::coupling::drive_coupled(
            model,
            &mc.grid,
            mc.scheme,
            mc.guard,
            &z0,
            &tables,
            mc.seed,
            traj,
            true,
            |view| {
                if view.blown {
                    return;
                }
                let w = if view.k == 0 || view.terminal {
                    T::of(0.5)
                } else {
                    T::one()
                };
                if let Some(en) = view.energy_comp {
                    integral += w * en * dt;
                }
            },
        );
        out.map(|o| o.log_weight.exp() * (scale * integral).exp())
    });
    let lhs = McEstimate::from_values(&values, excluded)?;
    let en0 = energy(&model.space, &model.params, z_tilde0);
    let rhs = (en0 / (op * op * t)
        + model.noise.hs_norm_sq() * T::of(4.0f64.ln()) / (op * op))
        .exp();
    Ok(ExpMomentVerdict {
        pass: lhs.mean <= rhs + T::of(4.0) * lhs.stderr,
        tail_kurtosis: excess_kurtosis(&values),
        lhs,
        rhs,
        exponent_scale: scale,
        energy_tilde0: en0,
    })
}

/// One direction's contribution to the gradient-estimate report.
#[derive(Debug, Clone, Serialize)]
pub struct DirectionRatio<T> {
    pub label: String,
    pub gradient: T,
    pub gradient_stderr: T,
    pub ratio: T,
}

/// Empirical gradient-variance comparison: the max over unit directions
/// (in `|·|_{σ₀+1/2}`) of `(∇_z P_T g)² / ((1_{ρ≥2}𝓔 + 1)·Var g)`. Reported
/// as an empirical lower bound for the unspecified constant; no pass/fail.
#[derive(Debug, Clone, Serialize)]
pub struct GradientReport<T> {
    pub directions: Vec<DirectionRatio<T>>,
    pub max_ratio: T,
    pub variance: T,
    pub energy: T,
    pub energy_indicator_applied: bool,
}

pub fn gradient_estimate_report<T: Real>(
    model: &Model<T>,
    mc: &McConfig<T>,
    g: &TestFunctional<T>,
    z0: &State<T>,
    n_directions: usize,
) -> Result<GradientReport<T>> {
    let pt = estimators::estimate_pt(model, mc, g, z0)?;
    let pt_sq = estimate_with(model, mc, z0, |x, y| {
        let v = g.eval_parts(x, y);
        v * v
    })?;
    let variance = (pt_sq.mean - pt.mean * pt.mean).max(T::zero());
    let rho = model.params.rho;
    let indicator = rho >= T::of(2.0);
    let en = energy(&model.space, &model.params, z0);
    let denom_scale = if indicator { en + T::one() } else { T::one() };
    let n = model.space.n_modes();
    let mut directions = Vec::new();
    let mut max_ratio = T::zero();
    for j in 0..n_directions.min(n) {
        for (slot, label) in [(0usize, "position"), (1usize, "velocity")] {
            let mut h1 = Field::zeros(n);
            let mut h2 = Field::zeros(n);
            // Normalized to |(h1,h2)|_{σ0+1/2} = 1.
            if slot == 0 {
                h1.coeffs_mut()[j] =
                    model.noise.sigma0()[j] / model.space.sqrt_lambdas()[j];
            } else {
                h2.coeffs_mut()[j] = model.noise.sigma0()[j];
            }
            let grad = estimators::bismut_gradient(model, mc, g, z0, &h1, &h2, false)?;
            let ratio = if variance > T::zero() {
                grad.estimate.mean * grad.estimate.mean / (denom_scale * variance)
            } else {
                T::zero()
            };
            max_ratio = max_ratio.max(ratio);
            directions.push(DirectionRatio {
                label: format!("{label} mode {}", j + 1),
                gradient: grad.estimate.mean,
                gradient_stderr: grad.estimate.stderr,
                ratio,
            });
        }
    }
    Ok(GradientReport {
        directions,
        max_ratio,
        variance,
        energy: en,
        energy_indicator_applied: indicator,
    })
}
