//! Line-based experiment configuration.
//!
//! The format is deliberately flat and diffable: one `key = value` per line,
//! `#` starts a comment. Unknown keys are rejected. Every key has a default,
//! so an empty (or absent) file is a valid preset; `--set key=value` applies
//! overrides after the file.
//!
//! Keys:
//!
//! ```text
//! space.length        interval length L ("pi" allowed)        (pi)
//! space.modes         retained modes N                        (16)
//! space.grid          physical grid size M                    (4·modes)
//! nonlinearity.family klein_gordon | linear_zero              (klein_gordon)
//! nonlinearity.rho    growth exponent ρ ≥ 1                   (3.0)
//! nonlinearity.k1 … nonlinearity.k5                           (family defaults)
//! nonlinearity.c1 … nonlinearity.c5                           (family defaults)
//! nonlinearity.w      Hölder exponent in (0,1)                (family default)
//! nonlinearity.gamma  Hölder exponent in (0,1]                (family default)
//! noise.kind          inv_sqrt_lambda | power_decay | explicit | zero
//!                                                             (inv_sqrt_lambda)
//! noise.alpha         decay exponent for power_decay          (1.0)
//! noise.sigma         comma list for explicit                 ()
//! noise.sigma0        same | comma list                       (same)
//! grid.horizon        time horizon T                          (1.0)
//! grid.steps          number of steps                         (1000)
//! grid.scheme         euler_maruyama | exp_euler              (euler_maruyama)
//! initial.x, initial.y        vector spec (see below)         (zero)
//! direction.h1, direction.h2  vector spec                     (mode:1:0.2 / mode:2:0.1)
//! mc.trajectories     Monte-Carlo sample count                (10000)
//! mc.seed             base seed                               (42)
//! mc.guard            blow-up guard level                     (1e8)
//! bounds.c_abs        absolute constant C in the bounds       (16)
//! bounds.p            Harnack power p > 1                     (2)
//! functional.kind     exp_linear | bounded_smooth | quadratic | indicator_smooth
//!                                                             (bounded_smooth)
//! functional.c        exp_linear scale                        (0.3)
//! functional.a1, functional.a2   exp_linear form (vector)     (mode:1:1 / zero)
//! functional.center_x, functional.center_y   vector spec      (zero)
//! functional.radius   indicator radius                        (1.0)
//! functional.sharpness indicator sharpness                    (4.0)
//! estimator.fd_eps    finite-difference step (empty = auto)   ()
//! estimator.allow_rho_gap   true | false                      (false)
//! estimator.epsilon   coupling ε in (0,1]                     (1.0)
//! harnack.mode        log | power (shift-harnack command)     (log)
//! energy.p            moment order for the energy command     (1.0)
//! energy.s            integration time (empty = horizon)      ()
//! gradient.directions directions per slot in the report      (4)
//! debug.corrupt_phi_sign    true | false (self-test mutation) (false)
//! ```
//!
//! Vector spec: `zero`, `mode:J:AMP[;J:AMP…]` (1-based mode indices), or
//! `coeffs:v1,v2,…` (padded with zeros).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use wavecouple::coupling::CouplingControls;
use wavecouple::dynamics::{Model, NoiseModel, Scheme, TimeGrid};
use wavecouple::estimators::{McConfig, TestFunctional};
use wavecouple::nonlinearity::NonlinearityParams;
use wavecouple::spectral::{Field, SpectralSpace, State};
use wavecouple::Error as CoreError;

use crate::CliError;

const DEFAULTS: &[(&str, &str)] = &[
    ("space.length", "pi"),
    ("space.modes", "16"),
    ("space.grid", ""),
    ("nonlinearity.family", "klein_gordon"),
    ("nonlinearity.rho", "3.0"),
    ("nonlinearity.k1", ""),
    ("nonlinearity.k2", ""),
    ("nonlinearity.k3", ""),
    ("nonlinearity.k4", ""),
    ("nonlinearity.k5", ""),
    ("nonlinearity.c1", ""),
    ("nonlinearity.c2", ""),
    ("nonlinearity.c3", ""),
    ("nonlinearity.c4", ""),
    ("nonlinearity.c5", ""),
    ("nonlinearity.w", ""),
    ("nonlinearity.gamma", ""),
    ("noise.kind", "inv_sqrt_lambda"),
    ("noise.alpha", "1.0"),
    ("noise.sigma", ""),
    ("noise.sigma0", "same"),
    ("grid.horizon", "1.0"),
    ("grid.steps", "1000"),
    ("grid.scheme", "euler_maruyama"),
    ("initial.x", "zero"),
    ("initial.y", "zero"),
    ("direction.h1", "mode:1:0.2"),
    ("direction.h2", "mode:2:0.1"),
    ("mc.trajectories", "10000"),
    ("mc.seed", "42"),
    ("mc.guard", "1e8"),
    ("bounds.c_abs", "16"),
    ("bounds.p", "2"),
    ("functional.kind", "bounded_smooth"),
    ("functional.c", "0.3"),
    ("functional.a1", "mode:1:1"),
    ("functional.a2", "zero"),
    ("functional.center_x", "zero"),
    ("functional.center_y", "zero"),
    ("functional.radius", "1.0"),
    ("functional.sharpness", "4.0"),
    ("estimator.fd_eps", ""),
    ("estimator.allow_rho_gap", "false"),
    ("estimator.epsilon", "1.0"),
    ("harnack.mode", "log"),
    ("energy.p", "1.0"),
    ("energy.s", ""),
    ("gradient.directions", "4"),
    ("debug.corrupt_phi_sign", "false"),
];

/// Resolved key-value configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::config(msg.into())
}

impl ExperimentConfig {
    pub fn defaults() -> Self {
        let values = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { values }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::defaults();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !self.values.contains_key(key) {
            return Err(config_err(format!("unknown configuration key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects key=value, got `{item}`")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// FNV-1a over the sorted `key=value` lines.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(text, "{k}={v}");
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }

    fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_default()
    }

    fn f64_of(&self, key: &str) -> Result<f64, CliError> {
        let raw = self.get(key);
        if raw.eq_ignore_ascii_case("pi") {
            return Ok(std::f64::consts::PI);
        }
        raw.parse::<f64>()
            .map_err(|_| config_err(format!("{key}: `{raw}` is not a number")))
    }

    fn f64_opt(&self, key: &str) -> Result<Option<f64>, CliError> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.f64_of(key).map(Some)
        }
    }

    fn usize_of(&self, key: &str) -> Result<usize, CliError> {
        let raw = self.get(key);
        raw.parse::<usize>()
            .map_err(|_| config_err(format!("{key}: `{raw}` is not a count")))
    }

    fn bool_of(&self, key: &str) -> Result<bool, CliError> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            raw => Err(config_err(format!("{key}: `{raw}` is not a boolean"))),
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        let raw = self.get("mc.seed");
        raw.parse::<u64>()
            .map_err(|_| config_err(format!("mc.seed: `{raw}` is not a seed")))
    }

    pub fn space(&self) -> Result<SpectralSpace<f64>, CliError> {
        let length = self.f64_of("space.length")?;
        let n = self.usize_of("space.modes")?;
        let m = match self.get("space.grid") {
            "" => 4 * n,
            _ => self.usize_of("space.grid")?,
        };
        SpectralSpace::new(length, n, m).map_err(core_config_err)
    }

    pub fn nonlinearity(&self) -> Result<NonlinearityParams<f64>, CliError> {
        let rho = self.f64_of("nonlinearity.rho")?;
        let mut params = match self.get("nonlinearity.family") {
            "klein_gordon" => NonlinearityParams::klein_gordon(rho).map_err(core_config_err)?,
            "linear_zero" => NonlinearityParams::linear_zero(),
            other => {
                return Err(config_err(format!(
                    "nonlinearity.family: unknown family `{other}`"
                )))
            }
        };
        type FieldRef = fn(&mut NonlinearityParams<f64>) -> &mut f64;
        let slots: [(&str, FieldRef); 12] = [
            ("nonlinearity.k1", |p| &mut p.k1),
            ("nonlinearity.k2", |p| &mut p.k2),
            ("nonlinearity.k3", |p| &mut p.k3),
            ("nonlinearity.k4", |p| &mut p.k4),
            ("nonlinearity.k5", |p| &mut p.k5),
            ("nonlinearity.c1", |p| &mut p.c1),
            ("nonlinearity.c2", |p| &mut p.c2),
            ("nonlinearity.c3", |p| &mut p.c3),
            ("nonlinearity.c4", |p| &mut p.c4),
            ("nonlinearity.c5", |p| &mut p.c5),
            ("nonlinearity.w", |p| &mut p.w),
            ("nonlinearity.gamma", |p| &mut p.gamma),
        ];
        for (key, field) in slots {
            if let Some(v) = self.f64_opt(key)? {
                *field(&mut params) = v;
            }
        }
        Ok(params)
    }

    pub fn noise(&self, space: &SpectralSpace<f64>) -> Result<NoiseModel<f64>, CliError> {
        let kind = self.get("noise.kind");
        let base = match kind {
            "inv_sqrt_lambda" => NoiseModel::inv_sqrt_lambda(space),
            "power_decay" => NoiseModel::power_decay(space, self.f64_of("noise.alpha")?),
            "zero" => NoiseModel::zero(space),
            "explicit" => {
                let sigma = parse_list(self.get("noise.sigma"))
                    .map_err(|e| config_err(format!("noise.sigma: {e}")))?;
                if sigma.windows(2).any(|w| w[1] > w[0]) {
                    eprintln!(
                        "warning: noise.sigma does not decay; the Hilbert-Schmidt norm \
                         grows with the mode count"
                    );
                }
                NoiseModel::same_minorant(space, sigma).map_err(core_config_err)?
            }
            other => return Err(config_err(format!("noise.kind: unknown kind `{other}`"))),
        };
        match self.get("noise.sigma0") {
            "same" | "" => Ok(base),
            spec => {
                let sigma0 = parse_list(spec)
                    .map_err(|e| config_err(format!("noise.sigma0: {e}")))?;
                NoiseModel::new(space, base.sigma().to_vec(), sigma0).map_err(core_config_err)
            }
        }
    }

    pub fn model(&self) -> Result<Model<f64>, CliError> {
        let space = self.space()?;
        let params = self.nonlinearity()?;
        let noise = self.noise(&space)?;
        Model::new(space, params, noise).map_err(core_config_err)
    }

    pub fn grid(&self) -> Result<TimeGrid<f64>, CliError> {
        TimeGrid::new(self.f64_of("grid.horizon")?, self.usize_of("grid.steps")?)
            .map_err(core_config_err)
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        match self.get("grid.scheme") {
            "euler_maruyama" => Ok(Scheme::EulerMaruyama),
            "exp_euler" => Ok(Scheme::ExpEuler),
            other => Err(config_err(format!("grid.scheme: unknown scheme `{other}`"))),
        }
    }

    pub fn mc(&self, model: &Model<f64>) -> Result<McConfig<f64>, CliError> {
        let grid = self.grid()?;
        let scheme = self.scheme()?;
        grid.validate_for(&model.space, scheme).map_err(core_config_err)?;
        Ok(McConfig::new(
            grid,
            scheme,
            self.f64_of("mc.guard")?,
            self.seed()?,
            self.usize_of("mc.trajectories")?,
        ))
    }

    pub fn vector(&self, key: &str, n: usize) -> Result<Field<f64>, CliError> {
        parse_vector(self.get(key), n).map_err(|e| config_err(format!("{key}: {e}")))
    }

    pub fn initial_state(&self, n: usize) -> Result<State<f64>, CliError> {
        Ok(State::new(
            self.vector("initial.x", n)?,
            self.vector("initial.y", n)?,
        ))
    }

    pub fn direction(&self, n: usize) -> Result<(Field<f64>, Field<f64>), CliError> {
        Ok((
            self.vector("direction.h1", n)?,
            self.vector("direction.h2", n)?,
        ))
    }

    pub fn forward_controls(&self, n: usize) -> Result<CouplingControls<f64>, CliError> {
        let (h1, h2) = self.direction(n)?;
        let horizon = self.f64_of("grid.horizon")?;
        let eps = self.f64_of("estimator.epsilon")?;
        let ctl = CouplingControls::forward(horizon, h1, h2, eps).map_err(core_config_err)?;
        Ok(if self.bool_of("debug.corrupt_phi_sign")? {
            ctl.with_corrupted_phi_sign()
        } else {
            ctl
        })
    }

    pub fn functional(&self, n: usize) -> Result<TestFunctional<f64>, CliError> {
        let center = State::new(
            self.vector("functional.center_x", n)?,
            self.vector("functional.center_y", n)?,
        );
        match self.get("functional.kind") {
            "exp_linear" => Ok(TestFunctional::ExpLinear {
                a1: self.vector("functional.a1", n)?,
                a2: self.vector("functional.a2", n)?,
                c: self.f64_of("functional.c")?,
            }),
            "bounded_smooth" => Ok(TestFunctional::BoundedSmooth { center }),
            "quadratic" => Ok(TestFunctional::Quadratic { center }),
            "indicator_smooth" => Ok(TestFunctional::IndicatorSmooth {
                center,
                radius: self.f64_of("functional.radius")?,
                sharpness: self.f64_of("functional.sharpness")?,
            }),
            other => Err(config_err(format!(
                "functional.kind: unknown kind `{other}`"
            ))),
        }
    }

    pub fn c_abs(&self) -> Result<f64, CliError> {
        self.f64_of("bounds.c_abs")
    }

    pub fn harnack_p(&self) -> Result<f64, CliError> {
        self.f64_of("bounds.p")
    }

    pub fn fd_eps(&self) -> Result<Option<f64>, CliError> {
        self.f64_opt("estimator.fd_eps")
    }

    pub fn allow_rho_gap(&self) -> Result<bool, CliError> {
        self.bool_of("estimator.allow_rho_gap")
    }

    pub fn harnack_mode(&self) -> Result<&str, CliError> {
        match self.get("harnack.mode") {
            m @ ("log" | "power") => Ok(m),
            other => Err(config_err(format!("harnack.mode: unknown mode `{other}`"))),
        }
    }

    pub fn energy_p(&self) -> Result<f64, CliError> {
        self.f64_of("energy.p")
    }

    pub fn energy_s(&self) -> Result<Option<f64>, CliError> {
        self.f64_opt("energy.s")
    }

    pub fn gradient_directions(&self) -> Result<usize, CliError> {
        self.usize_of("gradient.directions")
    }

    pub fn corrupt_phi_sign(&self) -> Result<bool, CliError> {
        self.bool_of("debug.corrupt_phi_sign")
    }

    pub fn guard(&self) -> Result<f64, CliError> {
        self.f64_of("mc.guard")
    }
}

fn core_config_err(e: CoreError) -> CliError {
    config_err(e.to_string())
}

fn parse_list(raw: &str) -> Result<Vec<f64>, String> {
    if raw.is_empty() {
        return Err("empty list".into());
    }
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{tok}` is not a number"))
        })
        .collect()
}

fn parse_vector(raw: &str, n: usize) -> Result<Field<f64>, String> {
    if raw.is_empty() || raw == "zero" {
        return Ok(Field::zeros(n));
    }
    if let Some(spec) = raw.strip_prefix("mode:") {
        let mut coeffs = vec![0.0; n];
        for part in spec.split(';') {
            let mut it = part.split(':');
            let j: usize = it
                .next()
                .ok_or("missing mode index")?
                .trim()
                .parse()
                .map_err(|_| "bad mode index".to_string())?;
            let amp: f64 = it
                .next()
                .ok_or("missing amplitude")?
                .trim()
                .parse()
                .map_err(|_| "bad amplitude".to_string())?;
            if j == 0 || j > n {
                return Err(format!("mode {j} out of range 1..={n}"));
            }
            coeffs[j - 1] = amp;
        }
        return Field::new(coeffs).map_err(|e| e.to_string());
    }
    if let Some(list) = raw.strip_prefix("coeffs:") {
        let vals = parse_list(list)?;
        if vals.len() > n {
            return Err(format!("{} coefficients exceed {n} modes", vals.len()));
        }
        let mut coeffs = vals;
        coeffs.resize(n, 0.0);
        return Field::new(coeffs).map_err(|e| e.to_string());
    }
    Err(format!("`{raw}` is not a vector spec (zero | mode:J:AMP | coeffs:…)"))
}
