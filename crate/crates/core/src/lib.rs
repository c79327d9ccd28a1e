//! Spectral-Galerkin simulation and Monte-Carlo estimation for the damped
//! stochastic wave equation
//!
//! ```text
//! dẊ = ΔX dt − l(X) dt − Ẋ dt + σ dW
//! ```
//!
//! on an interval with Dirichlet boundary, truncated to the first `N` sine
//! modes. On top of the simulator sit a coupling construction with explicit
//! control functions, the Girsanov path weight it induces, derivative and
//! integration-by-parts estimators, and closed-form evaluation of the
//! log/power/shift Harnack costs together with Monte-Carlo verifiers for
//! the supporting moment, entropy and exponential bounds.
//!
//! Everything is generic over the scalar type through [`Real`]; `f64`
//! aliases are provided at the crate root. All estimators are deterministic
//! functions of `(seed, configuration)` regardless of thread count.

// Negated comparisons are used where NaN must take the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod coupling;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod nonlinearity;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Real;

pub use dynamics::{Model, NoiseModel, PathRecord, Scheme, TimeGrid};
pub use nonlinearity::{Family, NonlinearityParams};
pub use spectral::{Field, SpectralSpace, State};
pub use stats::McEstimate;

/// `f64` aliases for the common concrete instantiation.
pub type Space64 = SpectralSpace<f64>;
pub type Field64 = Field<f64>;
pub type State64 = State<f64>;
pub type Model64 = Model<f64>;
pub type NoiseModel64 = NoiseModel<f64>;
pub type NonlinearityParams64 = NonlinearityParams<f64>;
pub type TimeGrid64 = TimeGrid<f64>;
pub type McEstimate64 = McEstimate<f64>;
