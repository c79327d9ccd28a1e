//! Independent small-matrix oracles for the linear (`l(r) = c·r`) dynamics.
//!
//! Each eigenmode of the linear model is the 2-d SDE
//! `dZ_j = B_j Z_j dt + (0, σ_j)ᵀ dW_j` with
//! `B_j = [[0, 1], [−λ_j − c, −damping]]`, so the terminal state is Gaussian
//! with mean `e^{B T} z₀` and covariance `∫₀ᵀ e^{B s} N e^{Bᵀ s} ds`.
//!
//! These routines deliberately avoid the spectral stepper: the matrix
//! exponential is computed by scaling-and-squaring, the covariance by an
//! RK4 Lyapunov integration, and exponential quadratic functionals by a
//! backward matrix Riccati equation. They exist to check the Monte-Carlo
//! path, not to share code with it.

use crate::dynamics::NoiseModel;
use crate::scalar::Real;
use crate::spectral::{Field, SpectralSpace, State};

pub type Mat2<T> = [[T; 2]; 2];

pub fn mat_mul<T: Real>(a: &Mat2<T>, b: &Mat2<T>) -> Mat2<T> {
    let mut out = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn mat_vec<T: Real>(a: &Mat2<T>, v: [T; 2]) -> [T; 2] {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

fn mat_add_scaled<T: Real>(a: &Mat2<T>, s: T, b: &Mat2<T>) -> Mat2<T> {
    let mut out = *a;
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] += s * b[i][j];
        }
    }
    out
}

fn transpose<T: Real>(a: &Mat2<T>) -> Mat2<T> {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Drift matrix of one mode: `[[0, 1], [−λ − lin_coeff, −damping]]`.
pub fn mode_matrix<T: Real>(lambda: T, lin_coeff: T, damping: T) -> Mat2<T> {
    [
        [T::zero(), T::one()],
        [-(lambda + lin_coeff), -damping],
    ]
}

/// `e^{B t}` by scaling-and-squaring with a Taylor series.
pub fn expm2<T: Real>(b: &Mat2<T>, t: T) -> Mat2<T> {
    let norm = b
        .iter()
        .flatten()
        .fold(T::zero(), |m, &v| m.max(v.abs()))
        * t.abs();
    let mut squarings = 0u32;
    let mut scale = T::one();
    while norm * scale > T::of(0.5) && squarings < 40 {
        scale /= T::of(2.0);
        squarings += 1;
    }
    let mut term = [[T::one(), T::zero()], [T::zero(), T::one()]];
    let mut sum = term;
    let ts = t * scale;
    for k in 1..24 {
        let mut next = mat_mul(&term, b);
        for row in next.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * ts / T::of_usize(k);
            }
        }
        term = next;
        sum = mat_add_scaled(&sum, T::one(), &term);
    }
    for _ in 0..squarings {
        sum = mat_mul(&sum, &sum);
    }
    sum
}

/// `Σ(t) = ∫₀ᵗ e^{B s} N e^{Bᵀ s} ds` via RK4 on `Σ′ = BΣ + ΣBᵀ + N`.
pub fn lyapunov_cov2<T: Real>(b: &Mat2<T>, n: &Mat2<T>, t: T, substeps: usize) -> Mat2<T> {
    let h = t / T::of_usize(substeps.max(1));
    let rhs = |s: &Mat2<T>| -> Mat2<T> {
        let bs = mat_mul(b, s);
        let sbt = mat_mul(s, &transpose(b));
        let mut out = *n;
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] += bs[i][j] + sbt[i][j];
            }
        }
        out
    };
    let mut sigma = [[T::zero(); 2]; 2];
    for _ in 0..substeps.max(1) {
        let k1 = rhs(&sigma);
        let k2 = rhs(&mat_add_scaled(&sigma, h / T::of(2.0), &k1));
        let k3 = rhs(&mat_add_scaled(&sigma, h / T::of(2.0), &k2));
        let k4 = rhs(&mat_add_scaled(&sigma, h, &k3));
        for i in 0..2 {
            for j in 0..2 {
                sigma[i][j] += h / T::of(6.0)
                    * (k1[i][j] + T::of(2.0) * (k2[i][j] + k3[i][j]) + k4[i][j]);
            }
        }
    }
    sigma
}

/// Terminal Gaussian law of the linear model: per-mode mean map `e^{B_j T}`
/// and covariance.
#[derive(Debug, Clone)]
pub struct GaussianTerminal<T> {
    pub mean_map: Vec<Mat2<T>>,
    pub cov: Vec<Mat2<T>>,
}

pub fn gaussian_terminal<T: Real>(
    space: &SpectralSpace<T>,
    noise: &NoiseModel<T>,
    lin_coeff: T,
    damping: T,
    t: T,
    substeps: usize,
) -> GaussianTerminal<T> {
    let mut mean_map = Vec::with_capacity(space.n_modes());
    let mut cov = Vec::with_capacity(space.n_modes());
    for j in 0..space.n_modes() {
        let b = mode_matrix(space.lambdas()[j], lin_coeff, damping);
        mean_map.push(expm2(&b, t));
        let s = noise.sigma()[j];
        let n = [[T::zero(), T::zero()], [T::zero(), s * s]];
        cov.push(lyapunov_cov2(&b, &n, t, substeps));
    }
    GaussianTerminal { mean_map, cov }
}

impl<T: Real> GaussianTerminal<T> {
    pub fn n_modes(&self) -> usize {
        self.mean_map.len()
    }

    pub fn mean_of_mode(&self, j: usize, x0: T, y0: T) -> [T; 2] {
        mat_vec(&self.mean_map[j], [x0, y0])
    }

    pub fn mean_state(&self, z0: &State<T>) -> State<T> {
        let n = self.n_modes();
        let mut x = Field::zeros(n);
        let mut y = Field::zeros(n);
        for j in 0..n {
            let m = self.mean_of_mode(j, z0.x.coeffs()[j], z0.y.coeffs()[j]);
            x.coeffs_mut()[j] = m[0];
            y.coeffs_mut()[j] = m[1];
        }
        State::new(x, y)
    }

    /// Pushes a direction through the mean map: `h ↦ e^{BT} h` per mode.
    pub fn mean_push(&self, h1: &Field<T>, h2: &Field<T>) -> (Field<T>, Field<T>) {
        let n = self.n_modes();
        let mut o1 = Field::zeros(n);
        let mut o2 = Field::zeros(n);
        for j in 0..n {
            let m = mat_vec(&self.mean_map[j], [h1.coeffs()[j], h2.coeffs()[j]]);
            o1.coeffs_mut()[j] = m[0];
            o2.coeffs_mut()[j] = m[1];
        }
        (o1, o2)
    }
}

/// `E exp{ c ∫₀ᵀ Z_sᵀ Q Z_s ds }` for `dZ = BZ dt + dξ` with covariance rate
/// `N`, started at `z0`, via the backward Riccati equation
/// `P′ = −BᵀP − PB − 2PNP − cQ, P(T) = 0` and `q′ = −tr(NP), q(T) = 0`;
/// the value is `exp(z0ᵀ P(0) z0 + q(0))`.
pub fn exp_quadratic_mgf<T: Real>(
    b: &Mat2<T>,
    n: &Mat2<T>,
    q: &Mat2<T>,
    c: T,
    t: T,
    substeps: usize,
    z0: [T; 2],
) -> T {
    // Integrate forward in τ = T − t.
    let h = t / T::of_usize(substeps.max(1));
    let bt = transpose(b);
    let rhs = |p: &Mat2<T>| -> Mat2<T> {
        let mut out = mat_add_scaled(&mat_mul(&bt, p), T::one(), &mat_mul(p, b));
        let pnp = mat_mul(&mat_mul(p, n), p);
        out = mat_add_scaled(&out, T::of(2.0), &pnp);
        mat_add_scaled(&out, c, q)
    };
    let mut p = [[T::zero(); 2]; 2];
    let mut q_acc = T::zero();
    for _ in 0..substeps.max(1) {
        let k1 = rhs(&p);
        let k2 = rhs(&mat_add_scaled(&p, h / T::of(2.0), &k1));
        let k3 = rhs(&mat_add_scaled(&p, h / T::of(2.0), &k2));
        let k4 = rhs(&mat_add_scaled(&p, h, &k3));
        // Trapezoid-consistent accumulation of q along the RK4 nodes.
        let tr = |m: &Mat2<T>| n[0][0] * m[0][0] + n[0][1] * m[1][0] + n[1][0] * m[0][1] + n[1][1] * m[1][1];
        let p_mid1 = mat_add_scaled(&p, h / T::of(2.0), &k1);
        let p_mid2 = mat_add_scaled(&p, h / T::of(2.0), &k2);
        let p_end = mat_add_scaled(&p, h, &k3);
        q_acc += h / T::of(6.0)
            * (tr(&p) + T::of(2.0) * (tr(&p_mid1) + tr(&p_mid2)) + tr(&p_end));
        for i in 0..2 {
            for j in 0..2 {
                p[i][j] += h / T::of(6.0)
                    * (k1[i][j] + T::of(2.0) * (k2[i][j] + k3[i][j]) + k4[i][j]);
            }
        }
    }
    let quad = z0[0] * (p[0][0] * z0[0] + p[0][1] * z0[1])
        + z0[1] * (p[1][0] * z0[0] + p[1][1] * z0[1]);
    (quad + q_acc).exp()
}
