//! Mean-field SDE problems of the form
//!
//! ```text
//! dX = f(t, X) dt + ∫ K(t, X, y) μ_t(dy) dt + σ(t, X) dW,   μ_t = Law(X_t)
//! ```
//!
//! A [`Problem`] bundles the coefficient callbacks together with the initial
//! density and an exact sampler for `X_0`. Callbacks must be reentrant: the
//! solvers call them concurrently from worker threads.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
pub type KernelFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// Writes `σ(t, x)` as a row-major `d × m` matrix.
pub type DiffusionFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
pub type DensityFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type SamplerFn = dyn Fn(&mut dyn RngCore, &mut [f64]) + Send + Sync;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown example id {0} (expected 1, 2 or 3)")]
    UnknownExample(u32),
    #[error("problem is missing its {0}")]
    Missing(&'static str),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Structural information about the interaction kernel that the solvers may
/// exploit. It is declared by the problem author, never inferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelForm {
    /// `K(t, x, y)` depends on all arguments.
    #[default]
    General,
    /// `K ≡ 0`.
    Zero,
    /// `K(t, x, y) = g(t, y)`: the interaction integral is the same at every `x`.
    StateIndependent,
}

#[derive(Clone)]
pub struct Problem {
    name: String,
    dim: usize,
    noise_dim: usize,
    horizon: f64,
    drift: Arc<DriftFn>,
    kernel: Arc<KernelFn>,
    diffusion: Arc<DiffusionFn>,
    initial_density: Arc<DensityFn>,
    sampler: Arc<SamplerFn>,
    constant_diffusion: bool,
    kernel_form: KernelForm,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("horizon", &self.horizon)
            .field("constant_diffusion", &self.constant_diffusion)
            .field("kernel_form", &self.kernel_form)
            .finish_non_exhaustive()
    }
}

impl Problem {
    pub fn builder(dim: usize, noise_dim: usize, horizon: f64) -> ProblemBuilder {
        ProblemBuilder {
            name: String::from("custom"),
            dim,
            noise_dim,
            horizon,
            drift: None,
            kernel: None,
            diffusion: None,
            initial_density: None,
            sampler: None,
            constant_diffusion: false,
            kernel_form: KernelForm::General,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    /// Set when `σ` does not depend on `(t, x)`.
    pub fn constant_diffusion(&self) -> bool {
        self.constant_diffusion
    }
    pub fn kernel_form(&self) -> KernelForm {
        self.kernel_form
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    #[inline]
    pub fn kernel(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.kernel)(t, x, y, out)
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    #[inline]
    pub fn initial_density(&self, x: &[f64]) -> f64 {
        (self.initial_density)(x)
    }

    pub fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        (self.sampler)(rng, out)
    }

    /// Copy of this problem with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Result<Problem, ModelError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ModelError::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        let mut p = self.clone();
        p.horizon = horizon;
        Ok(p)
    }

    /// Copy of this problem with the interaction switched off.
    pub fn without_interaction(&self) -> Problem {
        let mut p = self.clone();
        let d = p.dim;
        p.kernel = Arc::new(move |_, _, _, out: &mut [f64]| out[..d].fill(0.0));
        p.kernel_form = KernelForm::Zero;
        p.name = format!("{} (K=0)", self.name);
        p
    }

    /// Copy of this problem whose kernel is declared [`KernelForm::General`],
    /// forcing the solvers onto the exact per-node sums.
    pub fn with_general_kernel(&self) -> Problem {
        let mut p = self.clone();
        p.kernel_form = KernelForm::General;
        p
    }

    /// `A = σ σᵀ` at `(t, x)`, returned row-major `d × d`.
    pub fn diffusion_matrix(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut sigma = vec![0.0; self.dim * self.noise_dim];
        let mut a = vec![0.0; self.dim * self.dim];
        self.diffusion_matrix_into(t, x, &mut sigma, &mut a);
        a
    }

    pub(crate) fn diffusion_matrix_into(&self, t: f64, x: &[f64], sigma: &mut [f64], a: &mut [f64]) {
        let (d, m) = (self.dim, self.noise_dim);
        self.diffusion(t, x, sigma);
        for i in 0..d {
            for j in i..d {
                let mut s = 0.0;
                for l in 0..m {
                    s += sigma[i * m + l] * sigma[j * m + l];
                }
                a[i * d + j] = s;
                a[j * d + i] = s;
            }
        }
    }

    /// Probes `A(t, x)` at random `(t, x) ∈ [0, T] × (-alpha, alpha)^d` and
    /// reports the extreme eigenvalues.
    pub fn check_ellipticity(&self, alpha: f64, probes: usize, seed: u64) -> Result<EllipticityReport, ModelError> {
        if probes == 0 {
            return Err(ModelError::Invalid("probes must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim;
        let mut x = vec![0.0; d];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..probes {
            let t = rng.random::<f64>() * self.horizon;
            for xi in x.iter_mut() {
                *xi = alpha * (2.0 * rng.random::<f64>() - 1.0);
            }
            let a = DMatrix::from_row_slice(d, d, &self.diffusion_matrix(t, &x));
            for ev in a.symmetric_eigenvalues().iter() {
                lo = lo.min(*ev);
                hi = hi.max(*ev);
            }
        }
        let gamma1 = lo.max(0.0);
        let gamma2 = hi.max(gamma1);
        Ok(EllipticityReport {
            gamma1_est: gamma1,
            gamma2_est: gamma2,
            degenerate: gamma1 < DEGENERACY_THRESHOLD,
        })
    }
}

/// Smallest eigenvalue below which `A` is reported as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticityReport {
    pub gamma1_est: f64,
    pub gamma2_est: f64,
    pub degenerate: bool,
}

pub struct ProblemBuilder {
    name: String,
    dim: usize,
    noise_dim: usize,
    horizon: f64,
    drift: Option<Arc<DriftFn>>,
    kernel: Option<Arc<KernelFn>>,
    diffusion: Option<Arc<DiffusionFn>>,
    initial_density: Option<Arc<DensityFn>>,
    sampler: Option<Arc<SamplerFn>>,
    constant_diffusion: bool,
    kernel_form: KernelForm,
}

impl ProblemBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn kernel(mut self, form: KernelForm, k: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.kernel = Some(Arc::new(k));
        self.kernel_form = form;
        self
    }

    pub fn zero_kernel(mut self) -> Self {
        let d = self.dim;
        self.kernel = Some(Arc::new(move |_, _, _, out: &mut [f64]| out[..d].fill(0.0)));
        self.kernel_form = KernelForm::Zero;
        self
    }

    pub fn diffusion(mut self, sigma: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(sigma));
        self.constant_diffusion = false;
        self
    }

    /// Constant `σ`, row-major `d × m`. Marks the problem as having
    /// time- and space-independent diffusion.
    pub fn constant_diffusion(mut self, sigma: Vec<f64>) -> Self {
        self.diffusion = Some(Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&sigma)));
        self.constant_diffusion = true;
        self
    }

    pub fn initial_density(mut self, p0: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.initial_density = Some(Arc::new(p0));
        self
    }

    pub fn sampler(mut self, s: impl Fn(&mut dyn RngCore, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sampler = Some(Arc::new(s));
        self
    }

    /// Independent `N(mean_i, var_i)` initial law: sets both the density and the sampler.
    pub fn gaussian_initial(self, mean: Vec<f64>, var: Vec<f64>) -> Self {
        let (m2, v2) = (mean.clone(), var.clone());
        self.initial_density(move |x| {
            x.iter()
                .zip(mean.iter().zip(&var))
                .map(|(&xi, (&mu, &v))| (-(xi - mu) * (xi - mu) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
                .product()
        })
        .sampler(move |rng, out| {
            for (o, (&mu, &v)) in out.iter_mut().zip(m2.iter().zip(&v2)) {
                let z: f64 = rng.sample(StandardNormal);
                *o = mu + v.sqrt() * z;
            }
        })
    }

    pub fn build(self) -> Result<Problem, ModelError> {
        if self.dim == 0 || self.noise_dim == 0 {
            return Err(ModelError::Invalid("d and m must be >= 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ModelError::Invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(Problem {
            name: self.name,
            dim: self.dim,
            noise_dim: self.noise_dim,
            horizon: self.horizon,
            drift: self.drift.ok_or(ModelError::Missing("drift"))?,
            kernel: self.kernel.ok_or(ModelError::Missing("kernel"))?,
            diffusion: self.diffusion.ok_or(ModelError::Missing("diffusion"))?,
            initial_density: self.initial_density.ok_or(ModelError::Missing("initial density"))?,
            sampler: self.sampler.ok_or(ModelError::Missing("initial sampler"))?,
            constant_diffusion: self.constant_diffusion,
            kernel_form: self.kernel_form,
        })
    }
}

#[inline]
fn damped_sine(y: f64) -> f64 {
    y.sin() / (1.0 + y * y)
}

/// The three reference problems, all on `[0, 1]`.
///
/// 1. Scalar, multiplicative noise `σ = x/√10`, `X_0 ~ N(0, 1)`.
/// 2. Planar, additive correlated noise, `X_0 ~ N(0, 0.04)⊗²`.
/// 3. Planar, rank-one additive noise `σ = (0.1, 0.1)ᵀ`, `X_0 ~ N(0, 0.01)⊗²`.
pub fn builtin_example(id: u32) -> Result<Problem, ModelError> {
    match id {
        1 => Problem::builder(1, 1, 1.0)
            .name("example-1")
            .drift(|t, x, out| out[0] = 0.1 * (x[0] + t.sin()))
            .kernel(KernelForm::StateIndependent, |_, _, y, out| out[0] = 0.1 * damped_sine(y[0]))
            .diffusion(|_, x, out| out[0] = x[0] / 10f64.sqrt())
            .gaussian_initial(vec![0.0], vec![1.0])
            .build(),
        2 => {
            let s = 10f64.sqrt();
            Problem::builder(2, 2, 1.0)
                .name("example-2")
                .drift(|_, x, out| {
                    let v = 0.1 * (x[0] * x[0] + x[1] * x[1] + 0.4).sqrt();
                    out[0] = v;
                    out[1] = v;
                })
                .kernel(KernelForm::StateIndependent, |_, _, y, out| {
                    let v = 0.1 * damped_sine(y[0]) * damped_sine(y[1]);
                    out[0] = v;
                    out[1] = v;
                })
                .constant_diffusion(vec![2.0 / s, 1.0 / s, 1.0 / s, 2.0 / s])
                .gaussian_initial(vec![0.0, 0.0], vec![0.04, 0.04])
                .build()
        }
        3 => Problem::builder(2, 1, 1.0)
            .name("example-3")
            .drift(|t, x, out| {
                out[0] = 0.1 * (-1.5 * x[0] + 0.5 * x[1] + (2.0 * PI * t).sin());
                out[1] = 0.1 * (x[0] / 3.0 - 4.0 * x[1] / 3.0 + (2.0 * PI * t).cos());
            })
            .kernel(KernelForm::StateIndependent, |_, _, y, out| {
                let v = 0.1 * damped_sine(y[0]) * damped_sine(y[1]);
                out[0] = v;
                out[1] = v;
            })
            .constant_diffusion(vec![0.1, 0.1])
            .gaussian_initial(vec![0.0, 0.0], vec![0.01, 0.01])
            .build(),
        other => Err(ModelError::UnknownExample(other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn diffusion_matrix_examples() {
        let p1 = builtin_example(1).unwrap();
        assert_close(p1.diffusion_matrix(0.3, &[1.0])[0], 0.1, 1e-15);

        let a = builtin_example(2).unwrap().diffusion_matrix(0.0, &[0.0, 0.0]);
        for (got, want) in a.iter().zip([0.5, 0.4, 0.4, 0.5]) {
            assert_close(*got, want, 1e-15);
        }

        let a3 = builtin_example(3).unwrap().diffusion_matrix(0.0, &[0.2, -0.1]);
        for got in &a3 {
            assert_close(*got, 0.01, 1e-17);
        }
        let det = a3[0] * a3[3] - a3[1] * a3[2];
        assert_close(det, 0.0, 1e-20);
    }

    #[test]
    fn diffusion_matrix_is_symmetric_at_random_probes() {
        let p = Problem::builder(3, 2, 1.0)
            .drift(|_, _, out| out.fill(0.0))
            .zero_kernel()
            .diffusion(|t, x, out| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (i as f64 + 1.0) * (x[i % 3] + t).sin() + 0.3 * x[(i + 1) % 3];
                }
            })
            .gaussian_initial(vec![0.0; 3], vec![1.0; 3])
            .build()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = rng.random::<f64>();
            let x: Vec<f64> = (0..3).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let a = p.diffusion_matrix(t, &x);
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let asym = (0..3)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| (a[i * 3 + j] - a[j * 3 + i]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(asym <= 1e-14 * norm);
        }
    }

    #[test]
    fn ellipticity_of_examples() {
        let r1 = builtin_example(1).unwrap().check_ellipticity(6.0, 200, 1).unwrap();
        assert!(r1.gamma1_est > 0.0 && !r1.degenerate);

        let r2 = builtin_example(2).unwrap().check_ellipticity(1.0, 50, 2).unwrap();
        assert_close(r2.gamma1_est, 0.1, 1e-12);
        assert_close(r2.gamma2_est, 0.9, 1e-12);
        assert!(!r2.degenerate);

        let r3 = builtin_example(3).unwrap().check_ellipticity(1.0, 50, 3).unwrap();
        assert!(r3.degenerate);
        assert!(r3.gamma1_est <= r3.gamma2_est);
        assert_close(r3.gamma2_est, 0.02, 1e-12);

        assert!(builtin_example(1).unwrap().check_ellipticity(1.0, 0, 0).is_err());
    }

    #[test]
    fn builtin_coefficients() {
        let mut out1 = [f64::NAN];
        builtin_example(1).unwrap().drift(0.0, &[0.0], &mut out1);
        assert_eq!(out1[0], 0.0);

        let mut out = [f64::NAN; 2];
        builtin_example(3).unwrap().drift(0.25, &[0.0, 0.0], &mut out);
        assert_close(out[0], 0.1, 1e-15);
        assert_close(out[1], 0.0, 1e-15);

        let p2 = builtin_example(2).unwrap();
        for (t, x) in [(0.0, [0.3, -2.0]), (0.7, [5.0, 1.0])] {
            p2.kernel(t, &x, &[0.0, 0.0], &mut out);
            assert_eq!(out, [0.0, 0.0]);
        }

        assert_eq!(builtin_example(4).unwrap_err(), ModelError::UnknownExample(4));
    }

    #[test]
    fn kernels_are_odd_in_y() {
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        let p1 = builtin_example(1).unwrap();
        p1.kernel(0.2, &[0.1], &[1.3], &mut a[..1]);
        p1.kernel(0.2, &[0.1], &[-1.3], &mut b[..1]);
        assert_eq!(a[0], -b[0]);
        let p3 = builtin_example(3).unwrap();
        p3.kernel(0.2, &[0.1, 0.0], &[1.3, 0.4], &mut a);
        p3.kernel(0.2, &[0.1, 0.0], &[-1.3, 0.4], &mut b);
        assert_eq!(a[0], -b[0]);
    }

    #[test]
    fn initial_densities_are_normalized() {
        // Midpoint rule on the truncated cube used for each example.
        for (id, alpha, n) in [(1u32, 6.0, 4000usize), (2, 4.0, 800), (3, 4.0, 800)] {
            let p = builtin_example(id).unwrap();
            let h = 2.0 * alpha / n as f64;
            let mass: f64 = if p.dim() == 1 {
                (0..n).map(|i| p.initial_density(&[-alpha + (i as f64 + 0.5) * h]) * h).sum()
            } else {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let x = [-alpha + (i as f64 + 0.5) * h, -alpha + (j as f64 + 0.5) * h];
                        s += p.initial_density(&x) * h * h;
                    }
                }
                s
            };
            assert!((mass - 1.0).abs() <= 1e-6, "example {id}: mass {mass}");
        }
    }

    #[test]
    fn sampler_matches_initial_variance() {
        let p = builtin_example(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mut x = [0.0; 2];
        let mut s2 = 0.0;
        for _ in 0..n {
            p.sample_initial(&mut rng, &mut x);
            s2 += x[0] * x[0];
        }
        let var = s2 / n as f64;
        // Standard error of the sample variance is 0.04·√(2/n) ≈ 4e-4.
        assert_close(var, 0.04, 2e-3);
    }

    #[test]
    fn builder_reports_missing_parts() {
        let err = Problem::builder(1, 1, 1.0).zero_kernel().build().unwrap_err();
        assert_eq!(err, ModelError::Missing("drift"));
        assert!(Problem::builder(1, 1, -1.0).build().is_err());
    }
}
