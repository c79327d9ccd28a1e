//! Coupling by change of measure.
//!
//! A companion path is driven by the same noise as the base path plus a
//! deterministic drift `ε·f(t)`, chosen so that the difference solves the
//! controlled linear wave equation `δ″ = −Aδ + ε f` exactly:
//!
//! * forward kind: companion starts at `z₀ + ε(h₁, h₂)` and lands on the base
//!   path at time `T` (`ψ(0) = h₁, φ(0) = h₂, ψ(T) = φ(T) = 0`);
//! * shift kind: companion starts at `z₀` and ends displaced by `(h₁, h₂)`
//!   (`ψ(0) = φ(0) = 0, ψ(T) = h₁, φ(T) = h₂`).
//!
//! With `S(t)h = cos(√A t)h₁ + A^{−1/2} sin(√A t)h₂` and a scalar profile
//! `v`, the controls are `ψ = v·S`, `φ = ψ′ = v′S + vS′`, `f = v″S + 2v′S′`;
//! the shift kind replaces `S` by `Ŝ(t)h = cos(√A(T−t))h₁ − A^{−1/2}

//! sin(√A(T−t))h₂` and `v` by a profile with `u(0) = u′(0) = u′(T) = 0,
//! u(T) = 1`. (`φ = ψ′` is forced by the difference identity; the sign of
//! the `Ŝ` sine term is forced by the terminal displacement. Both are
//! checked by executable invariants rather than convention.)
//!
//! The induced Girsanov weight over `[0, s]` is
//!
//! ```text
//! R_s = exp{ −∫₀ˢ ⟨σ*(σσ*)^{−1} η, dW⟩ − ½∫₀ˢ ‖η‖²_σ dt },
//! η(t) = l(X̃(t)) − l(X(t)) + εφ(t) + εf(t),
//! ```
//!
//! accumulated with left-point Itô sums on the simulation grid.

use crate::dynamics::{guard_tripped, Integrator, Model, PathRecord, Scheme, Scratch, TimeGrid};
use crate::error::{Error, Result};
use crate::nonlinearity::{energy_with_grid, NonlinearityParams};
use crate::rng::PathRng;
use crate::scalar::Real;
use crate::spectral::{Field, SpectralSpace, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    /// Couples `z₀ + ε h` down onto the base path at time `T`.
    Forward,
    /// Displaces the companion by `h` at time `T` from the same start.
    Shift,
}

/// Scalar cubic profile with the boundary values of its kind.
#[derive(Debug, Clone)]
pub struct ControlProfile<T> {
    kind: ControlKind,
    horizon: T,
}

impl<T: Real> ControlProfile<T> {
    pub fn new(kind: ControlKind, horizon: T) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidConfig("control horizon must be positive".into()));
        }
        Ok(Self { kind, horizon })
    }

    pub fn kind(&self) -> ControlKind {
        self.kind
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    /// Profile value: `v(t) = 1 − 3s² + 2s³` (forward) or
    /// `u(t) = 3s² − 2s³` (shift), `s = t/T`.
    pub fn value(&self, t: T) -> T {
        let s = t / self.horizon;
        let forward = T::one() - T::of(3.0) * s * s + T::of(2.0) * s * s * s;
        match self.kind {
            ControlKind::Forward => forward,
            ControlKind::Shift => T::one() - forward,
        }
    }

    pub fn deriv(&self, t: T) -> T {
        let s = t / self.horizon;
        let d = (T::of(6.0) * s * s - T::of(6.0) * s) / self.horizon;
        match self.kind {
            ControlKind::Forward => d,
            ControlKind::Shift => -d,
        }
    }

    pub fn second_deriv(&self, t: T) -> T {
        let s = t / self.horizon;
        let d = (T::of(12.0) * s - T::of(6.0)) / (self.horizon * self.horizon);
        match self.kind {
            ControlKind::Forward => d,
            ControlKind::Shift => -d,
        }
    }
}

/// Deterministic control functions `(ψ, φ, f)` for a direction `(h₁, h₂)`.
#[derive(Debug, Clone)]
pub struct CouplingControls<T> {
    pub profile: ControlProfile<T>,
    pub h1: Field<T>,
    pub h2: Field<T>,
    pub epsilon: T,
    corrupt_phi_sign: bool,
}

impl<T: Real> CouplingControls<T> {
    pub fn new(
        kind: ControlKind,
        horizon: T,
        h1: Field<T>,
        h2: Field<T>,
        epsilon: T,
    ) -> Result<Self> {
        if h1.len() != h2.len() {
            return Err(Error::LengthMismatch { expected: h1.len(), got: h2.len() });
        }
        if !(epsilon > T::zero() && epsilon <= T::one()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon = {epsilon} outside (0, 1]"
            )));
        }
        if !h1.is_finite() || !h2.is_finite() {
            return Err(Error::InvalidField("non-finite direction".into()));
        }
        Ok(Self {
            profile: ControlProfile::new(kind, horizon)?,
            h1,
            h2,
            epsilon,
            corrupt_phi_sign: false,
        })
    }

    pub fn forward(horizon: T, h1: Field<T>, h2: Field<T>, epsilon: T) -> Result<Self> {
        Self::new(ControlKind::Forward, horizon, h1, h2, epsilon)
    }

    pub fn shift(horizon: T, h1: Field<T>, h2: Field<T>, epsilon: T) -> Result<Self> {
        Self::new(ControlKind::Shift, horizon, h1, h2, epsilon)
    }

    /// Mutation knob for self-tests: negates the `v′S` term of `φ`, which
    /// breaks the difference identity `X̃ − X = εψ`.
    pub fn with_corrupted_phi_sign(mut self) -> Self {
        self.corrupt_phi_sign = true;
        self
    }

    pub fn kind(&self) -> ControlKind {
        self.profile.kind()
    }

    pub fn horizon(&self) -> T {
        self.profile.horizon()
    }

    /// Initial companion offset scale: `ε` for forward coupling, 0 for shift.
    pub fn initial_offset(&self) -> T {
        match self.kind() {
            ControlKind::Forward => self.epsilon,
            ControlKind::Shift => T::zero(),
        }
    }

    /// Evaluates `(ψ(t), φ(t), f(t))`.
    pub fn eval(&self, space: &SpectralSpace<T>, t: T) -> Result<(Field<T>, Field<T>, Field<T>)> {
        let horizon = self.horizon();
        if t < -T::of(1e-12) || t > horizon * (T::one() + T::of(1e-12)) {
            return Err(Error::OutsideHorizon {
                t: t.to_f64_lossy(),
                horizon: horizon.to_f64_lossy(),
            });
        }
        let n = space.n_modes();
        assert_eq!(self.h1.len(), n, "direction length mismatch");
        let v = self.profile.value(t);
        let vp = self.profile.deriv(t);
        let vpp = self.profile.second_deriv(t);
        let phi_v = if self.corrupt_phi_sign { -vp } else { vp };

        let mut psi = Field::zeros(n);
        let mut phi = Field::zeros(n);
        let mut f = Field::zeros(n);
        for j in 0..n {
            let sq = space.sqrt_lambdas()[j];
            let (s_base, c_base) = match self.kind() {
                ControlKind::Forward => (sq * t).sin_cos(),
                ControlKind::Shift => (sq * (horizon - t)).sin_cos(),
            };
            let a = self.h1.coeffs()[j];
            let b = self.h2.coeffs()[j];
            // S(t)h and its time derivative, per kind.
            let (s_val, s_der) = match self.kind() {
                ControlKind::Forward => (
                    c_base * a + s_base / sq * b,
                    -sq * s_base * a + c_base * b,
                ),
                ControlKind::Shift => (
                    c_base * a - s_base / sq * b,
                    sq * s_base * a + c_base * b,
                ),
            };
            psi.coeffs_mut()[j] = v * s_val;
            phi.coeffs_mut()[j] = phi_v * s_val + v * s_der;
            f.coeffs_mut()[j] = vpp * s_val + T::of(2.0) * vp * s_der;
        }
        Ok((psi, phi, f))
    }
}

/// Running Girsanov data along one coupled trajectory.
#[derive(Debug, Clone)]
pub struct GirsanovAccumulator<T> {
    /// `−Σ⟨η/σ, ΔW⟩ − ½ Σ ‖η‖²_σ Δt` so far.
    pub log_weight: T,
    /// Left-point Itô sum of a derivative-formula integrand, when one is
    /// being accumulated alongside the weight.
    pub ito_integral: T,
}

impl<T: Real> GirsanovAccumulator<T> {
    pub fn zero() -> Self {
        Self { log_weight: T::zero(), ito_integral: T::zero() }
    }

    /// The weight `R = exp(log-weight)`.
    pub fn weight(&self) -> T {
        self.log_weight.exp()
    }
}

/// Control tables sampled on the simulation grid (index `k` ↦ `t_k`).
pub(crate) struct ControlTables<T> {
    pub psi: Vec<Vec<T>>,
    pub phi: Vec<Vec<T>>,
    pub f: Vec<Vec<T>>,
    /// Grid values of `ψ(t_k)`; filled only when the drift family needs
    /// pointwise evaluation.
    pub psi_grid: Vec<Vec<T>>,
    /// `ε·f(t_k)` (companion extra drift).
    pub eps_f: Vec<Vec<T>>,
    /// `ε·(φ + f)(t_k)` (deterministic part of `η`).
    pub eps_phi_plus_f: Vec<Vec<T>>,
    pub initial_offset: T,
}

impl<T: Real> ControlTables<T> {
    pub fn build(
        controls: &CouplingControls<T>,
        space: &SpectralSpace<T>,
        grid: &TimeGrid<T>,
        with_psi_grid: bool,
    ) -> Result<Self> {
        let rel = (controls.horizon() - grid.horizon()).abs()
            / controls.horizon().max(grid.horizon());
        if rel > T::of(1e-9) {
            return Err(Error::InvalidConfig(format!(
                "control horizon {} does not match grid horizon {}",
                controls.horizon(),
                grid.horizon()
            )));
        }
        let eps = controls.epsilon;
        let n_steps = grid.n_steps();
        let mut tables = Self {
            psi: Vec::with_capacity(n_steps + 1),
            phi: Vec::with_capacity(n_steps + 1),
            f: Vec::with_capacity(n_steps + 1),
            psi_grid: Vec::new(),
            eps_f: Vec::with_capacity(n_steps + 1),
            eps_phi_plus_f: Vec::with_capacity(n_steps + 1),
            initial_offset: controls.initial_offset(),
        };
        for k in 0..=n_steps {
            let t = grid.time(k).min(controls.horizon());
            let (psi, phi, f) = controls.eval(space, t)?;
            if with_psi_grid {
                tables.psi_grid.push(space.to_grid(&psi)?);
            }
            tables.eps_f.push(f.coeffs().iter().map(|&v| eps * v).collect());
            tables.eps_phi_plus_f.push(
                phi.coeffs()
                    .iter()
                    .zip(f.coeffs())
                    .map(|(&p, &q)| eps * (p + q))
                    .collect(),
            );
            tables.psi.push(psi.into());
            tables.phi.push(phi.into());
            tables.f.push(f.into());
        }
        Ok(tables)
    }
}

/// Everything an observer may inspect at one coupled step.
pub(crate) struct CoupledStepView<'a, T> {
    pub k: usize,
    pub t: T,
    pub base_x: &'a [T],
    pub base_y: &'a [T],
    pub comp_x: &'a [T],
    pub comp_y: &'a [T],
    pub dw: Option<&'a [T]>,
    /// `𝓔(X̃(t_k), Ỹ(t_k))` when energy tracking was requested.
    pub energy_comp: Option<T>,
    pub log_weight: T,
    pub terminal: bool,
    pub blown: bool,
}

pub(crate) struct CoupledOutcome<T> {
    pub base: State<T>,
    pub companion: State<T>,
    pub log_weight: T,
}

/// Drives the coupled pair under shared noise, accumulating the Girsanov
/// log-weight with left-point sums. Returns `None` when either path blows
/// up (after a final observer call flagged `blown`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn drive_coupled<T: Real, F: FnMut(&CoupledStepView<T>)>(
    model: &Model<T>,
    grid: &TimeGrid<T>,
    scheme: Scheme,
    guard: T,
    z0: &State<T>,
    tables: &ControlTables<T>,
    seed: u64,
    trajectory_index: u64,
    want_energy: bool,
    mut observe: F,
) -> Option<CoupledOutcome<T>> {
    let space = &model.space;
    let params = &model.params;
    let n = space.n_modes();
    let dt = grid.dt();
    let integ = Integrator::new(space, params, &model.noise, scheme, T::one(), dt);
    let rng = PathRng::new(seed, trajectory_index);
    let sqrt_dt = dt.sqrt();
    let lin = params.linear_coefficient();

    let mut bx: Vec<T> = z0.x.coeffs().to_vec();
    let mut by: Vec<T> = z0.y.coeffs().to_vec();
    let off = tables.initial_offset;
    let mut cx: Vec<T> = bx.clone();
    let mut cy: Vec<T> = by.clone();
    // Forward kind starts the companion at z0 + ε(h1, h2) = z0 + ε(ψ(0), φ(0)).
    for j in 0..n {
        cx[j] += off * tables.psi[0][j];
        cy[j] += off * tables.phi[0][j];
    }

    let mut scratch = Scratch::new(space);
    let mut grid_comp = vec![T::zero(); space.grid_size()];
    let mut vals = vec![T::zero(); space.grid_size()];
    let mut dl = vec![T::zero(); n];
    let mut dw = vec![T::zero(); n];
    let mut log_weight = T::zero();
    let sigma = model.noise.sigma().to_vec();

    let initial_guard = {
        let zb = State::new(Field::new(bx.clone()).ok()?, Field::new(by.clone()).ok()?);
        guard_tripped(space, &zb, guard)
    };
    if initial_guard {
        observe(&CoupledStepView {
            k: 0,
            t: T::zero(),
            base_x: &bx,
            base_y: &by,
            comp_x: &cx,
            comp_y: &cy,
            dw: None,
            energy_comp: None,
            log_weight,
            terminal: false,
            blown: true,
        });
        return None;
    }

    let comp_energy = |space: &SpectralSpace<T>,
                       params: &NonlinearityParams<T>,
                       cx: &[T],
                       cy: &[T],
                       grid_comp: &[T],
                       grid_ready: bool| {
        if !want_energy {
            return None;
        }
        Some(match lin {
            Some(c) => {
                let hx = space.sobolev_norm_unchecked(cx, T::one());
                let ny = space.sobolev_norm_unchecked(cy, T::zero());
                let l2 = space.sobolev_norm_unchecked(cx, T::zero());
                hx * hx + ny * ny + c * l2 * l2
            }
            None => {
                debug_assert!(grid_ready);
                energy_with_grid(space, params, cx, cy, grid_comp)
            }
        })
    };

    for k in 0..grid.n_steps() {
        rng.fill_increments(k, sqrt_dt, &mut dw);
        // Left-point base nonlinearity (and grid values when needed).
        integ.prepare(&bx, &mut scratch, lin.is_none());
        // η = l(X̃) − l(X) + ε(φ + f), in coefficients.
        match lin {
            Some(c) => {
                for j in 0..n {
                    dl[j] = c * (cx[j] - bx[j]);
                }
            }
            None => {
                space.to_grid_into(&cx, &mut grid_comp).expect("sized");
                for m in 0..vals.len() {
                    vals[m] = params.l(grid_comp[m]) - params.l(scratch.grid_x[m]);
                }
                space.from_grid_into(&vals, &mut dl);
            }
        }
        let mut lw_inc = T::zero();
        let mut degenerate_ok = true;
        for j in 0..n {
            let eta_j = dl[j] + tables.eps_phi_plus_f[k][j];
            if sigma[j] > T::zero() {
                let r = eta_j / sigma[j];
                lw_inc -= r * dw[j] + T::of(0.5) * r * r * dt;
            } else if eta_j != T::zero() {
                // Drift perturbation outside the noise range: weight undefined.
                degenerate_ok = false;
            }
        }
        let energy_comp = comp_energy(space, params, &cx, &cy, &grid_comp, lin.is_none());
        observe(&CoupledStepView {
            k,
            t: grid.time(k),
            base_x: &bx,
            base_y: &by,
            comp_x: &cx,
            comp_y: &cy,
            dw: Some(&dw),
            energy_comp,
            log_weight,
            terminal: false,
            blown: false,
        });
        if !degenerate_ok {
            return None;
        }
        log_weight += lw_inc;

        // Companion first: its drift uses the base path's left-point l(X)
        // and velocity, plus ε f(t_k).
        let ok_comp = integ.advance(
            &mut cx,
            &mut cy,
            &scratch.lx,
            Some(&by),
            Some(&tables.eps_f[k]),
            &dw,
        );
        let lx = std::mem::take(&mut scratch.lx);
        let ok_base = integ.advance(&mut bx, &mut by, &lx, None, None, &dw);
        scratch.lx = lx;

        let tripped = {
            let g = space.sobolev_norm_unchecked(&bx, T::one())
                + space.sobolev_norm_unchecked(&by, T::zero());
            !(g < guard)
        };
        let comp_finite = cx.iter().chain(cy.iter()).all(|v| v.is_finite());
        if !ok_comp || !ok_base || tripped || !comp_finite || !log_weight.is_finite() {
            observe(&CoupledStepView {
                k: k + 1,
                t: grid.time(k + 1),
                base_x: &bx,
                base_y: &by,
                comp_x: &cx,
                comp_y: &cy,
                dw: None,
                energy_comp: None,
                log_weight,
                terminal: false,
                blown: true,
            });
            return None;
        }
    }

    // Terminal view (left-point data no longer needed, energy still is).
    if lin.is_none() && want_energy {
        space.to_grid_into(&cx, &mut grid_comp).expect("sized");
    }
    let energy_comp = comp_energy(space, params, &cx, &cy, &grid_comp, true);
    observe(&CoupledStepView {
        k: grid.n_steps(),
        t: grid.horizon(),
        base_x: &bx,
        base_y: &by,
        comp_x: &cx,
        comp_y: &cy,
        dw: None,
        energy_comp,
        log_weight,
        terminal: true,
        blown: false,
    });

    Some(CoupledOutcome {
        base: State::new(Field::new(bx).ok()?, Field::new(by).ok()?),
        companion: State::new(Field::new(cx).ok()?, Field::new(cy).ok()?),
        log_weight,
    })
}

/// Simulates the coupled pair, recording both trajectories and the running
/// log-weight. The companion record carries the weight series.
#[allow(clippy::too_many_arguments)]
pub fn coupled_simulate<T: Real>(
    model: &Model<T>,
    grid: &TimeGrid<T>,
    scheme: Scheme,
    z0: &State<T>,
    controls: &CouplingControls<T>,
    seed: u64,
    trajectory_index: u64,
    guard: T,
) -> Result<(PathRecord<T>, PathRecord<T>, GirsanovAccumulator<T>)> {
    grid.validate_for(&model.space, scheme)?;
    if z0.n_modes() != model.space.n_modes() {
        return Err(Error::LengthMismatch {
            expected: model.space.n_modes(),
            got: z0.n_modes(),
        });
    }
    let tables = ControlTables::build(
        controls,
        &model.space,
        grid,
        model.params.linear_coefficient().is_none(),
    )?;
    let mut base = PathRecord {
        times: Vec::new(),
        states: Vec::new(),
        increments: Vec::new(),
        log_weight: Vec::new(),
        blown_up: false,
    };
    let mut comp = base.clone();
    let mut acc = GirsanovAccumulator::<T>::zero();
    let outcome = drive_coupled(
        model,
        grid,
        scheme,
        guard,
        z0,
        &tables,
        seed,
        trajectory_index,
        false,
        |view| {
            base.times.push(view.t);
            comp.times.push(view.t);
            base.states.push(State::new(
                Field::new(view.base_x.to_vec()).unwrap_or_else(|_| Field::zeros(0)),
                Field::new(view.base_y.to_vec()).unwrap_or_else(|_| Field::zeros(0)),
            ));
            comp.states.push(State::new(
                Field::new(view.comp_x.to_vec()).unwrap_or_else(|_| Field::zeros(0)),
                Field::new(view.comp_y.to_vec()).unwrap_or_else(|_| Field::zeros(0)),
            ));
            if let Some(dw) = view.dw {
                base.increments.push(dw.to_vec());
                comp.increments.push(dw.to_vec());
            }
            base.log_weight.push(T::zero());
            comp.log_weight.push(view.log_weight);
            acc.log_weight = view.log_weight;
        },
    );
    match outcome {
        Some(out) => {
            acc.log_weight = out.log_weight;
            acc.ito_integral = derivative_integrand_sum(model, grid, controls, &base)?;
            debug_assert_eq!(Some(&out.base), base.states.last());
            debug_assert_eq!(Some(&out.companion), comp.states.last());
        }
        None => {
            base.blown_up = true;
            comp.blown_up = true;
        }
    }
    Ok((base, comp, acc))
}

/// Left-point Itô sum of the derivative-formula integrand
/// `⟨(l′(X)ψ + φ + f)/σ, ΔW⟩` along a recorded base path.
fn derivative_integrand_sum<T: Real>(
    model: &Model<T>,
    grid: &TimeGrid<T>,
    controls: &CouplingControls<T>,
    record: &PathRecord<T>,
) -> Result<T> {
    if model.noise.is_degenerate() {
        return Ok(T::zero());
    }
    let space = &model.space;
    let n = space.n_modes();
    let sigma = model.noise.sigma();
    let mut total = T::zero();
    let mut lp_psi = vec![T::zero(); n];
    let mut vals = vec![T::zero(); space.grid_size()];
    for (k, dw) in record.increments.iter().enumerate() {
        let t = grid.time(k).min(controls.horizon());
        let (psi, phi, f) = controls.eval(space, t)?;
        match model.params.l_prime_constant() {
            Some(c) => {
                for j in 0..n {
                    lp_psi[j] = c * psi.coeffs()[j];
                }
            }
            None => {
                let grid_x = space.to_grid(&record.states[k].x)?;
                let grid_psi = space.to_grid(&psi)?;
                for m in 0..vals.len() {
                    vals[m] = model.params.l_prime(grid_x[m]) * grid_psi[m];
                }
                space.from_grid_into(&vals, &mut lp_psi);
            }
        }
        for j in 0..n {
            total += (lp_psi[j] + phi.coeffs()[j] + f.coeffs()[j]) / sigma[j] * dw[j];
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseModel;
    use crate::nonlinearity::NonlinearityParams;

    fn space() -> SpectralSpace<f64> {
        SpectralSpace::standard(8)
    }

    fn direction(space: &SpectralSpace<f64>) -> (Field<f64>, Field<f64>) {
        let n = space.n_modes();
        let mut h1 = Field::zeros(n);
        let mut h2 = Field::zeros(n);
        for j in 0..n {
            h1.coeffs_mut()[j] = 0.4 / ((j + 1) as f64 * (j + 1) as f64);
            h2.coeffs_mut()[j] = if j % 2 == 0 { 0.2 } else { -0.1 } / (j + 1) as f64;
        }
        (h1, h2)
    }

    #[test]
    fn profile_boundary_values() {
        let t_end = 0.7f64;
        let fwd = ControlProfile::new(ControlKind::Forward, t_end).unwrap();
        assert!((fwd.value(0.0) - 1.0).abs() < 1e-12);
        assert!(fwd.deriv(0.0).abs() < 1e-12);
        assert!(fwd.value(t_end).abs() < 1e-12);
        assert!(fwd.deriv(t_end).abs() < 1e-12);

        let shift = ControlProfile::new(ControlKind::Shift, t_end).unwrap();
        assert!(shift.value(0.0).abs() < 1e-12);
        assert!(shift.deriv(0.0).abs() < 1e-12);
        assert!((shift.value(t_end) - 1.0).abs() < 1e-12);
        assert!(shift.deriv(t_end).abs() < 1e-12);
    }

    #[test]
    fn forward_controls_boundary_fields() {
        let s = space();
        let (h1, h2) = direction(&s);
        let t_end = 1.3;
        let ctl = CouplingControls::forward(t_end, h1.clone(), h2.clone(), 1.0).unwrap();

        let (psi0, phi0, f0) = ctl.eval(&s, 0.0).unwrap();
        for j in 0..s.n_modes() {
            assert!((psi0.coeffs()[j] - h1.coeffs()[j]).abs() < 1e-12);
            assert!((phi0.coeffs()[j] - h2.coeffs()[j]).abs() < 1e-12);
            // f(0) = v″(0)·h1 = (−6/T²)·h1 since v′(0) = 0.
            let expect = -6.0 / (t_end * t_end) * h1.coeffs()[j];
            assert!((f0.coeffs()[j] - expect).abs() < 1e-12);
        }
        let (psi_t, phi_t, _) = ctl.eval(&s, t_end).unwrap();
        assert!(psi_t.coeffs().iter().all(|v| v.abs() < 1e-12));
        assert!(phi_t.coeffs().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shift_controls_boundary_fields() {
        let s = space();
        let (h1, h2) = direction(&s);
        let t_end = 0.9;
        let ctl = CouplingControls::shift(t_end, h1.clone(), h2.clone(), 1.0).unwrap();
        let (psi0, phi0, _) = ctl.eval(&s, 0.0).unwrap();
        assert!(psi0.coeffs().iter().all(|v| v.abs() < 1e-12));
        assert!(phi0.coeffs().iter().all(|v| v.abs() < 1e-12));
        let (psi_t, phi_t, _) = ctl.eval(&s, t_end).unwrap();
        for j in 0..s.n_modes() {
            assert!((psi_t.coeffs()[j] - h1.coeffs()[j]).abs() < 1e-12);
            assert!((phi_t.coeffs()[j] - h2.coeffs()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn controls_satisfy_their_ode() {
        // φ = ψ′ and ψ″ + Aψ = f, mode by mode, by central differences.
        let s = space();
        let (h1, h2) = direction(&s);
        for kind in [ControlKind::Forward, ControlKind::Shift] {
            let t_end = 1.1;
            let ctl = CouplingControls::new(kind, t_end, h1.clone(), h2.clone(), 0.7).unwrap();
            let dt = 1e-5;
            for &t in &[0.2, 0.55, 0.9] {
                let (psi_m, _, _) = ctl.eval(&s, t - dt).unwrap();
                let (psi, phi, f) = ctl.eval(&s, t).unwrap();
                let (psi_p, _, _) = ctl.eval(&s, t + dt).unwrap();
                for j in 0..s.n_modes() {
                    let scale = 1.0 + psi.coeffs()[j].abs().max(phi.coeffs()[j].abs());
                    let dpsi = (psi_p.coeffs()[j] - psi_m.coeffs()[j]) / (2.0 * dt);
                    assert!(
                        (dpsi - phi.coeffs()[j]).abs() < 1e-6 * scale,
                        "{kind:?} φ ≠ ψ′ at t={t}, mode {j}"
                    );
                    let d2psi = (psi_p.coeffs()[j] - 2.0 * psi.coeffs()[j]
                        + psi_m.coeffs()[j])
                        / (dt * dt);
                    let lhs = d2psi + s.lambdas()[j] * psi.coeffs()[j];
                    let scale_f = 1.0 + f.coeffs()[j].abs() + d2psi.abs();
                    assert!(
                        (lhs - f.coeffs()[j]).abs() < 1e-4 * scale_f,
                        "{kind:?} ψ″ + λψ ≠ f at t={t}, mode {j}: {lhs} vs {}",
                        f.coeffs()[j]
                    );
                }
            }
        }
    }

    #[test]
    fn eval_outside_horizon_errors() {
        let s = space();
        let (h1, h2) = direction(&s);
        let ctl = CouplingControls::forward(1.0, h1, h2, 1.0).unwrap();
        assert!(ctl.eval(&s, -0.1).is_err());
        assert!(ctl.eval(&s, 1.1).is_err());
    }

    fn model(rho: Option<f64>) -> Model<f64> {
        let s = space();
        let params = match rho {
            Some(r) => NonlinearityParams::klein_gordon(r).unwrap(),
            None => NonlinearityParams::linear_zero(),
        };
        let noise = NoiseModel::inv_sqrt_lambda(&s);
        Model::new(s, params, noise).unwrap()
    }

    #[test]
    fn zero_epsilon_limit_degenerates_to_identical_paths() {
        // ε must be in (0, 1]; the ε → 0 behaviour is realized with zero
        // directions instead.
        let m = model(Some(3.0));
        let grid = TimeGrid::new(0.5, 500).unwrap();
        let z0 = State::new(Field::mode(8, 1, 0.4), Field::zeros(8));
        let ctl =
            CouplingControls::forward(0.5, Field::zeros(8), Field::zeros(8), 1.0).unwrap();
        let (base, comp, acc) =
            coupled_simulate(&m, &grid, Scheme::EulerMaruyama, &z0, &ctl, 7, 0, 1e8).unwrap();
        assert!(!base.blown_up);
        for (zb, zc) in base.states.iter().zip(&comp.states) {
            assert_eq!(zb, zc);
        }
        assert_eq!(acc.log_weight, 0.0);
        assert_eq!(acc.weight(), 1.0);
    }

    #[test]
    fn difference_identity_tracks_controls() {
        // ‖X̃(t_k) − X(t_k) − εψ(t_k)‖_{1/2} + ‖Ỹ − Y − εφ‖ stays O(dt) and
        // roughly halves when dt halves.
        let m = model(Some(3.0));
        let z0 = State::new(Field::mode(8, 1, 0.5), Field::mode(8, 2, -0.3));
        let (h1, h2) = direction(&m.space);
        let eps = 0.8;
        let sup_err = |n_steps: usize| -> f64 {
            let grid = TimeGrid::new(1.0, n_steps).unwrap();
            let ctl = CouplingControls::forward(1.0, h1.clone(), h2.clone(), eps).unwrap();
            let (base, comp, _) =
                coupled_simulate(&m, &grid, Scheme::EulerMaruyama, &z0, &ctl, 11, 0, 1e8)
                    .unwrap();
            assert!(!base.blown_up);
            let mut worst: f64 = 0.0;
            for (k, t) in base.times.iter().enumerate() {
                let (psi, phi, _) = ctl.eval(&m.space, (*t).min(1.0)).unwrap();
                let dx = comp.states[k].x.axpy(-1.0, &base.states[k].x).axpy(-eps, &psi);
                let dy = comp.states[k].y.axpy(-1.0, &base.states[k].y).axpy(-eps, &phi);
                worst = worst.max(m.space.norm_h01(&dx) + m.space.norm_l2(&dy));
            }
            worst
        };
        let e_coarse = sup_err(500);
        let e_fine = sup_err(1000);
        assert!(e_coarse < 0.05, "identity error too large: {e_coarse}");
        let ratio = e_coarse / e_fine;
        assert!(ratio > 1.5 && ratio < 2.6, "order-1 halving expected: {ratio}");
    }

    #[test]
    fn forward_coupling_meets_at_horizon() {
        let m = model(Some(2.0));
        let z0 = State::new(Field::mode(8, 1, 0.5), Field::zeros(8));
        let (h1, h2) = direction(&m.space);
        let gap = |n_steps: usize| -> f64 {
            let grid = TimeGrid::new(1.0, n_steps).unwrap();
            let ctl = CouplingControls::forward(1.0, h1.clone(), h2.clone(), 1.0).unwrap();
            let (base, comp, _) =
                coupled_simulate(&m, &grid, Scheme::EulerMaruyama, &z0, &ctl, 3, 0, 1e8)
                    .unwrap();
            let zb = base.states.last().unwrap();
            let zc = comp.states.last().unwrap();
            m.space.norm_h01(&zc.x.axpy(-1.0, &zb.x)) + m.space.norm_l2(&zc.y.axpy(-1.0, &zb.y))
        };
        let g_coarse = gap(500);
        let g_fine = gap(1000);
        assert!(g_coarse < 0.05, "terminal gap {g_coarse}");
        let ratio = g_coarse / g_fine;
        assert!(ratio > 1.5 && ratio < 2.6, "order-1 halving expected: {ratio}");
    }

    #[test]
    fn shift_coupling_lands_on_displacement() {
        let m = model(Some(3.0));
        let z0 = State::new(Field::mode(8, 2, 0.4), Field::mode(8, 1, 0.1));
        let (h1, h2) = direction(&m.space);
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let ctl = CouplingControls::shift(1.0, h1.clone(), h2.clone(), 1.0).unwrap();
        let (base, comp, _) =
            coupled_simulate(&m, &grid, Scheme::EulerMaruyama, &z0, &ctl, 23, 0, 1e8).unwrap();
        let zb = base.states.last().unwrap();
        let zc = comp.states.last().unwrap();
        // Companion should end at base + (h1, h2), up to O(dt).
        let dx = zc.x.axpy(-1.0, &zb.x).axpy(-1.0, &h1);
        let dy = zc.y.axpy(-1.0, &zb.y).axpy(-1.0, &h2);
        let gap = m.space.norm_h01(&dx) + m.space.norm_l2(&dy);
        assert!(gap < 0.02, "terminal displacement gap {gap}");
    }

    #[test]
    fn corrupted_phi_sign_breaks_difference_identity() {
        let m = model(Some(3.0));
        let z0 = State::new(Field::mode(8, 1, 0.5), Field::zeros(8));
        let (h1, h2) = direction(&m.space);
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let ctl = CouplingControls::forward(1.0, h1.clone(), h2.clone(), 1.0)
            .unwrap()
            .with_corrupted_phi_sign();
        let (base, comp, _) =
            coupled_simulate(&m, &grid, Scheme::EulerMaruyama, &z0, &ctl, 3, 0, 1e8).unwrap();
        let mut worst: f64 = 0.0;
        for (k, t) in base.times.iter().enumerate() {
            let (psi, phi, _) = ctl.eval(&m.space, (*t).min(1.0)).unwrap();
            let dx = comp.states[k].x.axpy(-1.0, &base.states[k].x).axpy(-1.0, &psi);
            let dy = comp.states[k].y.axpy(-1.0, &base.states[k].y).axpy(-1.0, &phi);
            worst = worst.max(m.space.norm_h01(&dx) + m.space.norm_l2(&dy));
        }
        assert!(worst > 0.05, "corruption went undetected: {worst}");
    }

    #[test]
    fn weight_is_one_for_zero_direction_and_positive_generally() {
        let m = model(Some(3.0));
        let grid = TimeGrid::new(0.5, 500).unwrap();
        let z0 = State::new(Field::mode(8, 1, 0.3), Field::zeros(8));
        let (h1, h2) = direction(&m.space);
        let ctl = CouplingControls::forward(0.5, h1, h2, 1.0).unwrap();
        let (_, _, acc) =
            coupled_simulate(&m, &grid, Scheme::EulerMaruyama, &z0, &ctl, 99, 4, 1e8).unwrap();
        assert!(acc.weight() > 0.0);
        assert!(acc.log_weight.is_finite());
        assert!(acc.ito_integral.is_finite() && acc.ito_integral != 0.0);
    }
}
