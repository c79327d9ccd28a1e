//! Time integration of the truncated damped stochastic wave equation
//!
//! ```text
//! dX = Y dt,
//! dY = (−A X − l(X) − Y + extra) dt + σ dW,
//! ```
//!
//! in the eigenbasis, where the modes couple only through the pointwise
//! nonlinearity `l`. Two schemes are provided: left-point Euler–Maruyama
//! (the default; its raw increments make the Itô sums of the weight and
//! derivative estimators unambiguous) and an exponential variant that
//! applies the exact wave rotation per step and treats damping, drift and
//! noise as an Euler correction.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nonlinearity::NonlinearityParams;
use crate::rng::PathRng;
use crate::scalar::Real;
use crate::spectral::{Field, SpectralSpace, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    ExpEuler,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::EulerMaruyama => "euler_maruyama",
            Scheme::ExpEuler => "exp_euler",
        }
    }
}

/// Diagonal noise covariance `σ` with minorant `σ₀` and derived constants.
#[derive(Debug, Clone)]
pub struct NoiseModel<T> {
    sigma: Vec<T>,
    sigma0: Vec<T>,
    op_norm: T,
    hs_norm_sq: T,
    lambda_const: T,
    degenerate: bool,
}

impl<T: Real> NoiseModel<T> {
    /// Diagonal model with separate minorant; validates `σ_j ≥ σ₀_j > 0` and
    /// computes `‖σ‖`, `‖σ‖²_HS` and the smallest admissible `λ` with
    /// `σ₀_j √λ_j ≥ 1/λ`.
    pub fn new(space: &SpectralSpace<T>, sigma: Vec<T>, sigma0: Vec<T>) -> Result<Self> {
        let n = space.n_modes();
        if sigma.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: sigma.len() });
        }
        if sigma0.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: sigma0.len() });
        }
        let mut op_norm = T::zero();
        let mut hs = T::zero();
        let mut lambda = T::zero();
        for j in 0..n {
            if !(sigma0[j] > T::zero()) || !sigma0[j].is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "sigma0[{}] must be positive and finite",
                    j + 1
                )));
            }
            if sigma[j] < sigma0[j] - T::of(1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "sigma[{}] < sigma0[{}] violates the minorant",
                    j + 1,
                    j + 1
                )));
            }
            op_norm = op_norm.max(sigma[j]);
            hs += sigma[j] * sigma[j];
            lambda = lambda.max(T::one() / (sigma0[j] * space.sqrt_lambdas()[j]));
        }
        Ok(Self {
            sigma,
            sigma0,
            op_norm,
            hs_norm_sq: hs,
            lambda_const: lambda,
            degenerate: false,
        })
    }

    /// `σ₀ = σ`.
    pub fn same_minorant(space: &SpectralSpace<T>, sigma: Vec<T>) -> Result<Self> {
        let s0 = sigma.clone();
        Self::new(space, sigma, s0)
    }

    /// Default model `σ_j = λ_j^{−1/2}` (`= 1/j` at `L = π`), giving `λ = 1`.
    pub fn inv_sqrt_lambda(space: &SpectralSpace<T>) -> Self {
        let sigma: Vec<T> = space.sqrt_lambdas().iter().map(|&s| T::one() / s).collect();
        Self::same_minorant(space, sigma).expect("positive by construction")
    }

    /// `σ_j = j^{−alpha}`.
    pub fn power_decay(space: &SpectralSpace<T>, alpha: T) -> Self {
        let sigma: Vec<T> = (1..=space.n_modes())
            .map(|j| T::of_usize(j).powf(-alpha))
            .collect();
        Self::same_minorant(space, sigma).expect("positive by construction")
    }

    /// Zero noise for deterministic runs. The Girsanov machinery requires a
    /// nondegenerate `σ`; this model is only valid where the drift
    /// perturbation vanishes mode-by-mode.
    pub fn zero(space: &SpectralSpace<T>) -> Self {
        let n = space.n_modes();
        Self {
            sigma: vec![T::zero(); n],
            sigma0: vec![T::zero(); n],
            op_norm: T::zero(),
            hs_norm_sq: T::zero(),
            lambda_const: T::infinity(),
            degenerate: true,
        }
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn sigma0(&self) -> &[T] {
        &self.sigma0
    }

    /// `‖σ‖ = max_j σ_j`.
    pub fn op_norm(&self) -> T {
        self.op_norm
    }

    /// `‖σ‖²_HS = Σ_j σ_j²`.
    pub fn hs_norm_sq(&self) -> T {
        self.hs_norm_sq
    }

    /// Smallest `λ` with `σ₀_j √λ_j ≥ 1/λ`.
    pub fn lambda_const(&self) -> T {
        self.lambda_const
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// Uniform time grid on `[0, T]`.
#[derive(Debug, Clone, Serialize)]
pub struct TimeGrid<T> {
    horizon: T,
    n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(horizon: T, n_steps: usize) -> Result<Self> {
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if n_steps == 0 {
            return Err(Error::InvalidConfig("need at least one step".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> T {
        self.horizon / T::of_usize(self.n_steps)
    }

    pub fn time(&self, k: usize) -> T {
        self.dt() * T::of_usize(k)
    }

    /// Euler–Maruyama needs `dt·√λ_N ≤ 1/2`; the exponential scheme is
    /// unconditionally stable in the wave part.
    pub fn validate_for(&self, space: &SpectralSpace<T>, scheme: Scheme) -> Result<()> {
        if scheme == Scheme::EulerMaruyama {
            let top = *space.sqrt_lambdas().last().expect("nonempty");
            if self.dt() * top > T::of(0.5 + 1e-12) {
                return Err(Error::InvalidConfig(format!(
                    "dt·√λ_N = {} exceeds the Euler stability bound 0.5",
                    self.dt() * top
                )));
            }
        }
        Ok(())
    }
}

/// Model bundle: discretization, drift family and noise.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub space: SpectralSpace<T>,
    pub params: NonlinearityParams<T>,
    pub noise: NoiseModel<T>,
}

impl<T: Real> Model<T> {
    pub fn new(
        space: SpectralSpace<T>,
        params: NonlinearityParams<T>,
        noise: NoiseModel<T>,
    ) -> Result<Self> {
        if noise.sigma().len() != space.n_modes() {
            return Err(Error::LengthMismatch {
                expected: space.n_modes(),
                got: noise.sigma().len(),
            });
        }
        Ok(Self { space, params, noise })
    }
}

/// One recorded trajectory.
#[derive(Debug, Clone)]
pub struct PathRecord<T> {
    pub times: Vec<T>,
    pub states: Vec<State<T>>,
    pub increments: Vec<Vec<T>>,
    /// Running Girsanov log-weight; all zero for an uncoupled path.
    pub log_weight: Vec<T>,
    pub blown_up: bool,
}

pub(crate) struct Scratch<T> {
    pub grid_x: Vec<T>,
    pub lx: Vec<T>,
    pub vals: Vec<T>,
    pub grid_valid: bool,
}

impl<T: Real> Scratch<T> {
    pub fn new(space: &SpectralSpace<T>) -> Self {
        Self {
            grid_x: vec![T::zero(); space.grid_size()],
            lx: vec![T::zero(); space.n_modes()],
            vals: vec![T::zero(); space.grid_size()],
            grid_valid: false,
        }
    }
}

struct Rot<T> {
    c: T,
    s_over: T,
    s_times: T,
}

/// Single-step engine bound to one model, scheme and step size.
pub(crate) struct Integrator<'a, T> {
    space: &'a SpectralSpace<T>,
    params: &'a NonlinearityParams<T>,
    noise: &'a NoiseModel<T>,
    scheme: Scheme,
    damping: T,
    dt: T,
    lin_coeff: Option<T>,
    rot: Vec<Rot<T>>,
}

impl<'a, T: Real> Integrator<'a, T> {
    pub fn new(
        space: &'a SpectralSpace<T>,
        params: &'a NonlinearityParams<T>,
        noise: &'a NoiseModel<T>,
        scheme: Scheme,
        damping: T,
        dt: T,
    ) -> Self {
        let rot = if scheme == Scheme::ExpEuler {
            space
                .sqrt_lambdas()
                .iter()
                .map(|&sq| {
                    let (s, c) = (sq * dt).sin_cos();
                    Rot { c, s_over: s / sq, s_times: s * sq }
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            space,
            params,
            noise,
            scheme,
            damping,
            dt,
            lin_coeff: params.linear_coefficient(),
            rot,
        }
    }

    /// Computes left-point nonlinearity data for `x` into `scratch`:
    /// `scratch.lx` holds the eigen-coefficients of `l(X)`; `scratch.grid_x`
    /// holds grid values when `want_grid` (or whenever the transform route
    /// had to be taken anyway).
    pub fn prepare(&self, x: &[T], scratch: &mut Scratch<T>, want_grid: bool) {
        match self.lin_coeff {
            Some(c) if !want_grid => {
                scratch.grid_valid = false;
                for (o, &xi) in scratch.lx.iter_mut().zip(x) {
                    *o = c * xi;
                }
            }
            Some(c) => {
                self.space
                    .to_grid_into(x, &mut scratch.grid_x)
                    .expect("mode count fixed");
                scratch.grid_valid = true;
                for (o, &xi) in scratch.lx.iter_mut().zip(x) {
                    *o = c * xi;
                }
            }
            None => {
                self.space
                    .to_grid_into(x, &mut scratch.grid_x)
                    .expect("mode count fixed");
                scratch.grid_valid = true;
                // Pointwise l on the grid, then project back.
                for (v, &g) in scratch.vals.iter_mut().zip(scratch.grid_x.iter()) {
                    *v = self.params.l(g);
                }
                self.space.from_grid_into(&scratch.vals, &mut scratch.lx);
            }
        }
    }

    /// Advances `(x, y)` by one step. `lx` must hold the left-point `l(X)`
    /// coefficients for this path's own position; `damp_other` substitutes a
    /// companion path's left-point velocity in the damping term; `extra` is
    /// an additional Y-drift. Returns `false` on NaN/overflow.
    pub fn advance(
        &self,
        x: &mut [T],
        y: &mut [T],
        lx: &[T],
        damp_other: Option<&[T]>,
        extra: Option<&[T]>,
        dw: &[T],
    ) -> bool {
        let dt = self.dt;
        let lambdas = self.space.lambdas();
        let sigma = self.noise.sigma();
        let mut ok = true;
        match self.scheme {
            Scheme::EulerMaruyama => {
                for j in 0..x.len() {
                    let xo = x[j];
                    let yo = y[j];
                    let damp = match damp_other {
                        Some(d) => d[j],
                        None => yo,
                    };
                    let mut drift = -lambdas[j] * xo - lx[j] - self.damping * damp;
                    if let Some(e) = extra {
                        drift += e[j];
                    }
                    x[j] = xo + dt * yo;
                    y[j] = yo + dt * drift + sigma[j] * dw[j];
                    ok &= x[j].is_finite() && y[j].is_finite();
                }
            }
            Scheme::ExpEuler => {
                for j in 0..x.len() {
                    let xo = x[j];
                    let yo = y[j];
                    let damp = match damp_other {
                        Some(d) => d[j],
                        None => yo,
                    };
                    let r = &self.rot[j];
                    let xr = r.c * xo + r.s_over * yo;
                    let yr = -r.s_times * xo + r.c * yo;
                    let mut drift = -lx[j] - self.damping * damp;
                    if let Some(e) = extra {
                        drift += e[j];
                    }
                    x[j] = xr;
                    y[j] = yr + dt * drift + sigma[j] * dw[j];
                    ok &= x[j].is_finite() && y[j].is_finite();
                }
            }
        }
        ok
    }
}

/// Outcome of a single step.
#[derive(Debug, Clone)]
pub enum StepOutcome<T> {
    Next(State<T>),
    BlowUp,
}

/// One integration step of the damped wave dynamics (damping coefficient 1).
pub fn step<T: Real>(
    model: &Model<T>,
    scheme: Scheme,
    z: &State<T>,
    dw: &[T],
    dt: T,
    extra_drift: Option<&Field<T>>,
) -> Result<StepOutcome<T>> {
    if dw.len() != model.space.n_modes() {
        return Err(Error::LengthMismatch {
            expected: model.space.n_modes(),
            got: dw.len(),
        });
    }
    let integ = Integrator::new(
        &model.space,
        &model.params,
        &model.noise,
        scheme,
        T::one(),
        dt,
    );
    let mut scratch = Scratch::new(&model.space);
    let mut next = z.clone();
    integ.prepare(next.x.coeffs(), &mut scratch, false);
    let lx = scratch.lx.clone();
    let ok = integ.advance(
        next.x.coeffs_mut(),
        next.y.coeffs_mut(),
        &lx,
        None,
        extra_drift.map(|f| f.coeffs()),
        dw,
    );
    Ok(if ok { StepOutcome::Next(next) } else { StepOutcome::BlowUp })
}

/// Blow-up test: true when the guard functional is NaN or at/above `guard`.
pub(crate) fn guard_tripped<T: Real>(space: &SpectralSpace<T>, z: &State<T>, guard: T) -> bool {
    let g = space.sobolev_norm_unchecked(z.x.coeffs(), T::one())
        + space.sobolev_norm_unchecked(z.y.coeffs(), T::zero());
    !(g < guard)
}

/// Integrates one trajectory, recording states, increments and the discrete
/// stopping rule: the path is cut at the first grid time where
/// `‖X‖_{1/2} + ‖Y‖ ≥ guard` (or any non-finite value appears) and flagged
/// `blown_up` instead of crashing.
#[allow(clippy::too_many_arguments)]
pub fn simulate<T: Real>(
    model: &Model<T>,
    grid: &TimeGrid<T>,
    scheme: Scheme,
    z0: &State<T>,
    seed: u64,
    trajectory_index: u64,
    guard: T,
    extra_drift: Option<&dyn Fn(T) -> Field<T>>,
) -> Result<PathRecord<T>> {
    grid.validate_for(&model.space, scheme)?;
    let n_modes = model.space.n_modes();
    if z0.n_modes() != n_modes {
        return Err(Error::LengthMismatch { expected: n_modes, got: z0.n_modes() });
    }
    let integ = Integrator::new(
        &model.space,
        &model.params,
        &model.noise,
        scheme,
        T::one(),
        grid.dt(),
    );
    let rng = PathRng::new(seed, trajectory_index);
    let sqrt_dt = grid.dt().sqrt();
    let mut scratch = Scratch::new(&model.space);
    let mut z = z0.clone();
    let mut rec = PathRecord {
        times: vec![T::zero()],
        states: vec![z.clone()],
        increments: Vec::new(),
        log_weight: vec![T::zero()],
        blown_up: false,
    };
    if guard_tripped(&model.space, &z, guard) {
        rec.blown_up = true;
        return Ok(rec);
    }
    let mut dw = vec![T::zero(); n_modes];
    for k in 0..grid.n_steps() {
        rng.fill_increments(k, sqrt_dt, &mut dw);
        let extra = extra_drift.map(|f| f(grid.time(k)));
        integ.prepare(z.x.coeffs(), &mut scratch, false);
        let lx = std::mem::take(&mut scratch.lx);
        let ok = integ.advance(
            z.x.coeffs_mut(),
            z.y.coeffs_mut(),
            &lx,
            None,
            extra.as_ref().map(|f| f.coeffs()),
            &dw,
        );
        scratch.lx = lx;
        rec.increments.push(dw.clone());
        rec.times.push(grid.time(k + 1));
        rec.states.push(z.clone());
        rec.log_weight.push(T::zero());
        if !ok || guard_tripped(&model.space, &z, guard) {
            rec.blown_up = true;
            break;
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn standard_model(rho: Option<f64>) -> Model<f64> {
        let space = SpectralSpace::standard(8);
        let params = match rho {
            Some(r) => NonlinearityParams::klein_gordon(r).unwrap(),
            None => NonlinearityParams::linear_zero(),
        };
        let noise = NoiseModel::inv_sqrt_lambda(&space);
        Model::new(space, params, noise).unwrap()
    }

    #[test]
    fn noise_model_constants() {
        let space = SpectralSpace::<f64>::standard(3);
        let noise = NoiseModel::inv_sqrt_lambda(&space);
        assert!((noise.op_norm() - 1.0).abs() < 1e-12);
        let expect_hs = 1.0 + 0.25 + 1.0 / 9.0;
        assert!((noise.hs_norm_sq() - expect_hs).abs() < 1e-12);
        assert!((noise.lambda_const() - 1.0).abs() < 1e-12);

        assert!(NoiseModel::new(&space, vec![1.0, 1.0, 1.0], vec![2.0, 1.0, 1.0]).is_err());
        assert!(NoiseModel::new(&space, vec![1.0; 3], vec![0.0; 3]).is_err());
    }

    #[test]
    fn time_grid_stability_guard() {
        let space = SpectralSpace::<f64>::standard(16);
        let ok = TimeGrid::new(1.0, 1000).unwrap();
        assert!(ok.validate_for(&space, Scheme::EulerMaruyama).is_ok());
        let coarse = TimeGrid::new(1.0, 10).unwrap();
        assert!(coarse.validate_for(&space, Scheme::EulerMaruyama).is_err());
        assert!(coarse.validate_for(&space, Scheme::ExpEuler).is_ok());
    }

    #[test]
    fn undamped_rotation_is_exact() {
        // l = 0, σ = 0, damping 0: the exponential scheme reproduces the
        // wave group exactly; one period of mode 1 flips the sign.
        let space = SpectralSpace::<f64>::standard(8);
        let params = NonlinearityParams::linear_zero();
        let noise = NoiseModel::zero(&space);
        let n_steps = 1000;
        let dt = std::f64::consts::PI / n_steps as f64;
        let integ = Integrator::new(&space, &params, &noise, Scheme::ExpEuler, 0.0, dt);
        let mut scratch = Scratch::new(&space);
        let mut x: Vec<f64> = Field::mode(8, 1, 1.0).coeffs().to_vec();
        let mut y = vec![0.0; 8];
        let dw = vec![0.0; 8];
        for _ in 0..n_steps {
            integ.prepare(&x, &mut scratch, false);
            let lx = scratch.lx.clone();
            assert!(integ.advance(&mut x, &mut y, &lx, None, None, &dw));
        }
        assert!((x[0] + 1.0).abs() < 1e-10, "X₁(π) = {}", x[0]);
        assert!(x[1..].iter().all(|&v| v.abs() < 1e-10));
        assert!(y.iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn damped_noiseless_energy_decays() {
        let model = standard_model(None);
        let mut m = model.clone();
        m.noise = NoiseModel::zero(&model.space);
        let grid = TimeGrid::new(2.0, 2000).unwrap();
        let z0 = State::new(Field::mode(8, 2, 0.7), Field::mode(8, 1, -0.4));
        let rec = simulate(&m, &grid, Scheme::EulerMaruyama, &z0, 1, 0, 1e8, None).unwrap();
        assert!(!rec.blown_up);
        let energy = |z: &State<f64>| {
            m.space.norm_h01(&z.x).powi(2) + m.space.norm_l2(&z.y).powi(2)
        };
        let mut prev = energy(&rec.states[0]);
        for s in &rec.states[1..] {
            let e = energy(s);
            assert!(e <= prev + 1e-9, "energy grew: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn simulate_zero_everything_stays_zero() {
        let mut model = standard_model(None);
        model.noise = NoiseModel::zero(&model.space);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let z0 = State::zeros(8);
        let rec = simulate(&model, &grid, Scheme::EulerMaruyama, &z0, 5, 3, 1e8, None).unwrap();
        assert!(!rec.blown_up);
        for s in &rec.states {
            assert!(s.x.is_zero() && s.y.is_zero());
        }
    }

    #[test]
    fn zero_guard_trips_immediately() {
        let model = standard_model(Some(3.0));
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let z0 = State::new(Field::mode(8, 1, 1.0), Field::zeros(8));
        let rec = simulate(&model, &grid, Scheme::EulerMaruyama, &z0, 5, 3, 0.0, None).unwrap();
        assert!(rec.blown_up);
        assert_eq!(rec.states.len(), 1);
    }

    #[test]
    fn extra_drift_converges_to_forced_equilibrium() {
        // Constant forcing c·e1 with zero noise: the damped dynamics settle
        // at A X = c·e1, Y = 0.
        let mut model = standard_model(None);
        model.noise = NoiseModel::zero(&model.space);
        let c = 0.7;
        let forcing = move |_t: f64| Field::mode(8, 1, c);
        let grid = TimeGrid::new(30.0, 30_000).unwrap();
        let rec = simulate(
            &model,
            &grid,
            Scheme::EulerMaruyama,
            &State::zeros(8),
            0,
            0,
            1e8,
            Some(&forcing),
        )
        .unwrap();
        assert!(!rec.blown_up);
        let z = rec.states.last().unwrap();
        let lambda1 = model.space.lambdas()[0];
        assert!((z.x.coeffs()[0] - c / lambda1).abs() < 1e-6);
        assert!(model.space.norm_l2(&z.y) < 1e-6);
    }

    #[test]
    fn determinism_across_calls() {
        let model = standard_model(Some(3.0));
        let grid = TimeGrid::new(0.5, 500).unwrap();
        let z0 = State::new(Field::mode(8, 1, 0.3), Field::zeros(8));
        let a = simulate(&model, &grid, Scheme::EulerMaruyama, &z0, 42, 17, 1e8, None).unwrap();
        let b = simulate(&model, &grid, Scheme::EulerMaruyama, &z0, 42, 17, 1e8, None).unwrap();
        assert_eq!(a.states.last().unwrap(), b.states.last().unwrap());
        assert_eq!(a.increments, b.increments);
    }

    #[test]
    fn euler_self_convergence_is_first_order() {
        // Strong self-convergence: error vs a dt-halved reference run on the
        // same Brownian path should drop by about half when dt halves.
        let model = standard_model(Some(3.0));
        let z0 = State::new(Field::mode(8, 1, 0.5), Field::mode(8, 2, 0.2));
        let t_end = 0.5;

        // Reference at very fine resolution, then coarse runs that consume
        // the same increments by summing fine ones.
        let fine_steps = 8192usize;
        let fine = TimeGrid::new(t_end, fine_steps).unwrap();
        let incs = crate::rng::draw_increments::<f64>(99, 0, &fine, 8);

        let run_with = |factor: usize| -> State<f64> {
            let n = fine_steps / factor;
            let dt = t_end / n as f64;
            let integ = Integrator::new(
                &model.space,
                &model.params,
                &model.noise,
                Scheme::EulerMaruyama,
                1.0,
                dt,
            );
            let mut scratch = Scratch::new(&model.space);
            let mut z = z0.clone();
            for k in 0..n {
                let mut dw = vec![0.0; 8];
                for f in 0..factor {
                    for j in 0..8 {
                        dw[j] += incs[k * factor + f][j];
                    }
                }
                integ.prepare(z.x.coeffs(), &mut scratch, false);
                let lx = scratch.lx.clone();
                assert!(integ.advance(z.x.coeffs_mut(), z.y.coeffs_mut(), &lx, None, None, &dw));
            }
            z
        };

        let reference = run_with(1);
        let err = |z: &State<f64>| {
            model.space.norm_h01(&z.x.axpy(-1.0, &reference.x))
                + model.space.norm_l2(&z.y.axpy(-1.0, &reference.y))
        };
        let e_coarse = err(&run_with(16));
        let e_fine = err(&run_with(8));
        let ratio = e_coarse / e_fine;
        assert!(
            ratio > 1.5 && ratio < 2.6,
            "order-1 halving expected, got ratio {ratio} ({e_coarse} / {e_fine})"
        );
    }

    #[test]
    fn linear_terminal_law_matches_gaussian_oracle() {
        // For l ≡ 0 each mode is a 2-d linear SDE; compare empirical mean and
        // covariance of (X_j, Y_j)(T) against the matrix-exponential oracle.
        let model = standard_model(None);
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let z0 = State::new(Field::mode(8, 1, 0.8), Field::mode(8, 3, -0.5));
        let n_traj = 20_000usize;

        let integ = Integrator::new(
            &model.space,
            &model.params,
            &model.noise,
            Scheme::EulerMaruyama,
            1.0,
            grid.dt(),
        );
        let mut sums = vec![[0.0f64; 2]; 8];
        let mut sums_sq = vec![[0.0f64; 3]; 8];
        let mut scratch = Scratch::new(&model.space);
        let sqrt_dt = grid.dt().sqrt();
        for traj in 0..n_traj {
            let rng = PathRng::new(2024, traj as u64);
            let mut z = z0.clone();
            let mut dw = vec![0.0; 8];
            for k in 0..grid.n_steps() {
                rng.fill_increments(k, sqrt_dt, &mut dw);
                integ.prepare(z.x.coeffs(), &mut scratch, false);
                let lx = scratch.lx.clone();
                integ.advance(z.x.coeffs_mut(), z.y.coeffs_mut(), &lx, None, None, &dw);
            }
            for j in 0..8 {
                let (xj, yj) = (z.x.coeffs()[j], z.y.coeffs()[j]);
                sums[j][0] += xj;
                sums[j][1] += yj;
                sums_sq[j][0] += xj * xj;
                sums_sq[j][1] += yj * yj;
                sums_sq[j][2] += xj * yj;
            }
        }

        let law = oracle::gaussian_terminal(&model.space, &model.noise, 0.0, 1.0, 1.0, 4000);
        let n = n_traj as f64;
        for j in 0..8 {
            let m = law.mean_of_mode(j, z0.x.coeffs()[j], z0.y.coeffs()[j]);
            let cov = law.cov[j];
            let mean_x = sums[j][0] / n;
            let mean_y = sums[j][1] / n;
            // 4-sigma bands, plus an O(dt) discretization allowance.
            let band_x = 4.0 * (cov[0][0] / n).sqrt() + 0.02;
            let band_y = 4.0 * (cov[1][1] / n).sqrt() + 0.02;
            assert!((mean_x - m[0]).abs() < band_x, "mode {j} mean_x {mean_x} vs {}", m[0]);
            assert!((mean_y - m[1]).abs() < band_y, "mode {j} mean_y {mean_y} vs {}", m[1]);
            let var_x = sums_sq[j][0] / n - mean_x * mean_x;
            let var_y = sums_sq[j][1] / n - mean_y * mean_y;
            let cov_xy = sums_sq[j][2] / n - mean_x * mean_y;
            let tol = |v: f64| 4.0 * v * (2.0 / n).sqrt() + 0.02;
            assert!((var_x - cov[0][0]).abs() < tol(cov[0][0]).max(0.01), "mode {j} var_x");
            assert!((var_y - cov[1][1]).abs() < tol(cov[1][1]).max(0.01), "mode {j} var_y");
            assert!((cov_xy - cov[0][1]).abs() < 0.02, "mode {j} cov_xy");
        }
    }
}
