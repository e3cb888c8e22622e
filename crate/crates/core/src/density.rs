//! Piecewise-constant space-time density built from a [`DensityField`], plus
//! moment functionals and the interaction integral used by the SDE drift.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::fpsolve::{self, DensityField};
use crate::grid::Grid;
use crate::model::{KernelForm, Problem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("level {level} out of range (N = {n_steps})")]
    LevelOutOfRange { level: usize, n_steps: usize },
    #[error("density has non-positive mass {0}")]
    NonPositiveMass(f64),
    #[error("point has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("problem dimension {problem} does not match density dimension {density}")]
    Incompatible { problem: usize, density: usize },
}

/// `p_{κ,h}(t, x) = p^{n,k}` on `[t_n, t_{n+1}) × D_k`, zero outside `D`.
#[derive(Debug, Clone)]
pub struct PiecewiseDensity {
    field: Arc<DensityField>,
}

/// Mean vector and covariance (row-major `d × d`) of a density or sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
}

impl Moments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.covariance[i * self.dim() + i]
    }

    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.dim() + j]
    }
}

impl PiecewiseDensity {
    pub fn new(field: DensityField) -> Self {
        PiecewiseDensity { field: Arc::new(field) }
    }

    pub fn from_shared(field: Arc<DensityField>) -> Self {
        PiecewiseDensity { field }
    }

    pub fn field(&self) -> &DensityField {
        &self.field
    }

    pub fn grid(&self) -> &Grid {
        self.field.grid()
    }

    /// `floor(t / κ)`, clamped to `N`.
    pub fn level_at(&self, t: f64) -> Result<usize, DensityError> {
        let g = self.grid();
        if !(t >= 0.0 && t <= g.horizon()) {
            return Err(DensityError::TimeOutOfRange { t, horizon: g.horizon() });
        }
        Ok(((t / g.kappa()).floor() as usize).min(g.n_steps()))
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, DensityError> {
        let n = self.level_at(t)?;
        self.check_point(x)?;
        Ok(self.eval_level(n, x))
    }

    pub(crate) fn eval_level(&self, n: usize, x: &[f64]) -> f64 {
        match self.grid().locate_cell_flat(x) {
            Some(k) => self.field.level(n)[k],
            None => 0.0,
        }
    }

    fn check_level(&self, n: usize) -> Result<(), DensityError> {
        let n_steps = self.grid().n_steps();
        if n > n_steps {
            return Err(DensityError::LevelOutOfRange { level: n, n_steps });
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<(), DensityError> {
        if x.len() != self.grid().dim() {
            return Err(DensityError::DimensionMismatch { expected: self.grid().dim(), got: x.len() });
        }
        Ok(())
    }

    /// `Σ_k p^{n,k} h^d`.
    pub fn total_mass(&self, n: usize) -> Result<f64, DensityError> {
        self.check_level(n)?;
        Ok(self.field.level(n).iter().sum::<f64>() * self.grid().cell_volume())
    }

    /// Quadrature mean and covariance at level `n`, normalized by the computed mass.
    pub fn density_moments(&self, n: usize) -> Result<Moments, DensityError> {
        let mass = self.total_mass(n)?;
        if !(mass > 0.0) {
            return Err(DensityError::NonPositiveMass(mass));
        }
        let g = self.grid();
        let d = g.dim();
        let hd = g.cell_volume();
        let level = self.field.level(n);
        let mut x = vec![0.0; d];
        let mut mean = vec![0.0; d];
        for (k, &p) in level.iter().enumerate() {
            g.position_into(k, &mut x);
            for i in 0..d {
                mean[i] += x[i] * p * hd;
            }
        }
        for m in mean.iter_mut() {
            *m /= mass;
        }
        let mut cov = vec![0.0; d * d];
        for (k, &p) in level.iter().enumerate() {
            g.position_into(k, &mut x);
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (x[i] - mean[i]) * (x[j] - mean[j]) * p * hd;
                }
            }
        }
        for c in cov.iter_mut() {
            *c /= mass;
        }
        Ok(Moments { mean, covariance: cov })
    }
}

/// How the SDE evaluates `∫ K(t, x, y) p_{κ,h}(t, y) dy` at an off-grid `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionMode {
    /// Node-point quadrature evaluated at `x` itself.
    Exact,
    /// Multilinear interpolation of the precomputed node values.
    #[default]
    Interpolate,
}

#[derive(Debug, Clone)]
enum Storage {
    /// One `d`-vector per level, shared by every node.
    Uniform(Vec<f64>),
    /// `levels × nodes × d`.
    PerNode(Vec<f64>),
}

/// `G_i(t_n, x^k) = Σ_s K_i(t_n, x^k, x^s) p^{n,s} h^d` at every level and node.
#[derive(Debug, Clone)]
pub struct InteractionField {
    grid: Grid,
    storage: Storage,
}

pub fn interaction_precompute(pd: &PiecewiseDensity, problem: &Problem) -> Result<InteractionField, DensityError> {
    let g = pd.grid().clone();
    if problem.dim() != g.dim() {
        return Err(DensityError::Incompatible { problem: problem.dim(), density: g.dim() });
    }
    let d = g.dim();
    let levels = g.n_steps() + 1;
    let positions = g.positions();
    let storage = match problem.kernel_form() {
        KernelForm::Zero => Storage::Uniform(vec![0.0; levels * d]),
        KernelForm::StateIndependent => {
            let per_level: Vec<Vec<f64>> = (0..levels)
                .into_par_iter()
                .map(|n| fpsolve::interaction_sum(pd.field().level(n), &g, &positions, problem, g.time(n), &positions[..d]))
                .collect();
            Storage::Uniform(per_level.concat())
        }
        KernelForm::General => {
            let mut all = Vec::with_capacity(levels * g.node_count() * d);
            for n in 0..levels {
                all.extend(fpsolve::kernel_sum_with(pd.field().level(n), &g, &positions, problem, g.time(n)));
            }
            Storage::PerNode(all)
        }
    };
    Ok(InteractionField { grid: g, storage })
}

impl InteractionField {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `G` at node `k` of level `n`.
    pub fn node_value(&self, n: usize, k: usize) -> &[f64] {
        let d = self.grid.dim();
        match &self.storage {
            Storage::Uniform(v) => &v[n * d..(n + 1) * d],
            Storage::PerNode(v) => {
                let base = (n * self.grid.node_count() + k) * d;
                &v[base..base + d]
            }
        }
    }

    /// Multilinear interpolation at `x`, coordinates clamped into `[-alpha, alpha]`.
    pub(crate) fn interpolate_into(&self, n: usize, x: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let v = match &self.storage {
            Storage::Uniform(v) => {
                out.copy_from_slice(&v[n * d..(n + 1) * d]);
                return;
            }
            Storage::PerNode(v) => v,
        };
        let g = &self.grid;
        let m = g.m() as i64;
        let side = g.side();
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        debug_assert!(d <= 8);
        for i in 0..d {
            let u = (x[i].clamp(-g.alpha(), g.alpha()) / g.h()).clamp(-(m as f64), m as f64);
            let k0 = (u.floor() as i64).clamp(-m, m - 1);
            base[i] = (k0 + m) as usize;
            frac[i] = u - k0 as f64;
        }
        out.fill(0.0);
        let level_base = n * g.node_count() * d;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for i in 0..d {
                let bit = (corner >> i) & 1;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
                flat = flat * side + base[i] + bit;
            }
            if w == 0.0 {
                continue;
            }
            let off = level_base + flat * d;
            for c in 0..d {
                out[c] += w * v[off + c];
            }
        }
    }
}

/// The interaction drift at `(t, x)` under the given evaluation mode.
pub fn interaction_at(
    field: &InteractionField,
    pd: &PiecewiseDensity,
    problem: &Problem,
    t: f64,
    x: &[f64],
    mode: InteractionMode,
) -> Result<Vec<f64>, DensityError> {
    let n = pd.level_at(t)?;
    pd.check_point(x)?;
    let mut out = vec![0.0; x.len()];
    let coupling = DensityCoupling::new(problem, pd, field, mode)?;
    coupling.at_level(n, x, &mut out);
    Ok(out)
}

/// Everything the SDE drift needs to evaluate the interaction term.
#[derive(Clone)]
pub struct DensityCoupling<'a> {
    problem: &'a Problem,
    density: &'a PiecewiseDensity,
    field: &'a InteractionField,
    mode: InteractionMode,
    positions: Arc<Vec<f64>>,
}

impl<'a> DensityCoupling<'a> {
    pub fn new(problem: &'a Problem, density: &'a PiecewiseDensity, field: &'a InteractionField, mode: InteractionMode) -> Result<Self, DensityError> {
        if problem.dim() != density.grid().dim() {
            return Err(DensityError::Incompatible { problem: problem.dim(), density: density.grid().dim() });
        }
        let positions = match (mode, problem.kernel_form()) {
            (InteractionMode::Exact, KernelForm::General) => Arc::new(density.grid().positions()),
            _ => Arc::new(Vec::new()),
        };
        Ok(DensityCoupling { problem, density, field, mode, positions })
    }

    pub fn density(&self) -> &PiecewiseDensity {
        self.density
    }

    pub fn mode(&self) -> InteractionMode {
        self.mode
    }

    /// Interaction drift at density level `n` and position `x`.
    pub fn at_level(&self, n: usize, x: &[f64], out: &mut [f64]) {
        match (self.mode, self.problem.kernel_form()) {
            (InteractionMode::Exact, KernelForm::General) => {
                let g = self.density.grid();
                let s = fpsolve::interaction_sum(self.density.field().level(n), g, &self.positions, self.problem, g.time(n), x);
                out.copy_from_slice(&s);
            }
            _ => self.field.interpolate_into(n, x, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpsolve::{initial_level, solve_fp, FpOptions};
    use crate::model::builtin_example;

    fn field_from_fn(grid: &Grid, f: impl Fn(usize, &[f64]) -> f64) -> DensityField {
        let d = grid.dim();
        let pos = grid.positions();
        let mut values = Vec::new();
        for n in 0..=grid.n_steps() {
            for k in 0..grid.node_count() {
                values.push(if grid.is_boundary_flat(k) { 0.0 } else { f(n, &pos[k * d..(k + 1) * d]) });
            }
        }
        DensityField::from_values(grid.clone(), values).unwrap()
    }

    #[test]
    fn eval_is_piecewise_constant_with_zero_extension() {
        let g = Grid::new(1, 2.0, 8, 1.0, 4).unwrap();
        let pd = PiecewiseDensity::new(field_from_fn(&g, |n, x| (n as f64 + 1.0) * (1.0 + x[0] * x[0])));
        assert_eq!(pd.eval(0.5, &[10.0]).unwrap(), 0.0);
        assert_eq!(pd.eval(0.5, &[2.0]).unwrap(), 0.0);
        assert_eq!(pd.eval(0.5, &[-2.5]).unwrap(), 0.0);
        let x = 0.75;
        assert_eq!(pd.eval(0.0, &[x]).unwrap(), 1.0 + x * x);
        let just_below = 0.25 * (1.0 - 1e-12);
        assert_eq!(pd.eval(just_below, &[x]).unwrap(), 1.0 + x * x);
        assert_eq!(pd.eval(0.25, &[x]).unwrap(), 2.0 * (1.0 + x * x));
        assert_eq!(pd.eval(1.0, &[x]).unwrap(), 5.0 * (1.0 + x * x));
        assert!(matches!(pd.eval(1.5, &[x]), Err(DensityError::TimeOutOfRange { .. })));
        assert!(matches!(pd.eval(-0.1, &[x]), Err(DensityError::TimeOutOfRange { .. })));
    }

    #[test]
    fn mass_examples() {
        let g = Grid::new(2, 1.0, 5, 1.0, 1).unwrap();
        let zero = PiecewiseDensity::new(field_from_fn(&g, |_, _| 0.0));
        assert_eq!(zero.total_mass(0).unwrap(), 0.0);
        assert!(matches!(zero.density_moments(0), Err(DensityError::NonPositiveMass(_))));
        let c = 0.37;
        let uniform = PiecewiseDensity::new(field_from_fn(&g, |_, _| c));
        let want = c * 81.0 * g.cell_volume();
        assert!((uniform.total_mass(1).unwrap() - want).abs() < 1e-14);
        assert!(uniform.total_mass(2).is_err());

        let ex1 = builtin_example(1).unwrap();
        let g1 = Grid::new(1, 6.0, 512, 1.0, 1).unwrap();
        let p0 = initial_level(&g1, &ex1);
        let mut values = p0.clone();
        values.extend(p0);
        let pd = PiecewiseDensity::new(DensityField::from_values(g1, values).unwrap());
        assert!((pd.total_mass(0).unwrap() - 1.0).abs() < 1e-6);
        let m = pd.density_moments(0).unwrap();
        assert!(m.mean[0].abs() < 1e-15);
        assert!((m.variance(0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn moments_of_symmetric_density_have_zero_mean() {
        let g = Grid::new(2, 1.5, 6, 1.0, 1).unwrap();
        let pd = PiecewiseDensity::new(field_from_fn(&g, |_, x| (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp()));
        let m = pd.density_moments(0).unwrap();
        assert!(m.mean[0].abs() < 1e-15 && m.mean[1].abs() < 1e-15);
        assert!(m.covariance(0, 0) > m.covariance(1, 1));
    }

    #[test]
    fn interaction_field_examples() {
        let ex1 = builtin_example(1).unwrap();
        let g = Grid::new(1, 6.0, 32, 1.0, 2).unwrap();
        let sol = solve_fp(&ex1, &g, &FpOptions::default()).unwrap();
        let pd = PiecewiseDensity::new(sol.field);

        let zero = ex1.without_interaction();
        let gz = interaction_precompute(&pd, &zero).unwrap();
        for mode in [InteractionMode::Exact, InteractionMode::Interpolate] {
            assert_eq!(interaction_at(&gz, &pd, &zero, 0.3, &[0.4], mode).unwrap(), vec![0.0]);
        }

        let general = ex1.with_general_kernel();
        let gg = interaction_precompute(&pd, &general).unwrap();
        for k in 0..g.node_count() {
            assert!(gg.node_value(0, k)[0].abs() <= 1e-17);
        }
    }

    #[test]
    fn delta_density_collapses_the_sum() {
        let general = Problem::builder(2, 1, 1.0)
            .drift(|_, _, o| o.fill(0.0))
            .kernel(KernelForm::General, |t, x, y, o| {
                o[0] = (x[0] - y[0]).sin() + t;
                o[1] = x[1] * y[0] - y[1];
            })
            .constant_diffusion(vec![1.0, 0.0])
            .gaussian_initial(vec![0.0, 0.0], vec![1.0, 1.0])
            .build()
            .unwrap();
        let g = Grid::new(2, 1.0, 4, 1.0, 1).unwrap();
        let s0 = g.flat_index(&crate::grid::NodeIndex::new([1, -2])).unwrap();
        let hd = g.cell_volume();
        let mut values = vec![0.0; 2 * g.node_count()];
        values[s0] = 1.0 / hd;
        values[g.node_count() + s0] = 1.0 / hd;
        let pd = PiecewiseDensity::new(DensityField::from_values(g.clone(), values).unwrap());
        let field = interaction_precompute(&pd, &general).unwrap();
        let pos = g.positions();
        let mut want = [0.0; 2];
        for k in 0..g.node_count() {
            general.kernel(0.0, &pos[2 * k..2 * k + 2], &pos[2 * s0..2 * s0 + 2], &mut want);
            let got = field.node_value(0, k);
            assert!((got[0] - want[0]).abs() < 1e-14 && (got[1] - want[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_mode_at_nodes_equals_kernel_sum() {
        let ex2 = builtin_example(2).unwrap().with_general_kernel();
        let g = Grid::new(2, 1.0, 6, 1.0, 2).unwrap();
        let sol = solve_fp(&ex2, &g, &FpOptions::default()).unwrap();
        let pd = PiecewiseDensity::new(sol.field);
        let field = interaction_precompute(&pd, &ex2).unwrap();
        let s = fpsolve::kernel_sum(pd.field().level(1), &g, &ex2, g.time(1)).unwrap();
        let pos = g.positions();
        for k in 0..g.node_count() {
            let x = &pos[2 * k..2 * k + 2];
            let exact = interaction_at(&field, &pd, &ex2, g.time(1), x, InteractionMode::Exact).unwrap();
            let interp = interaction_at(&field, &pd, &ex2, g.time(1), x, InteractionMode::Interpolate).unwrap();
            for i in 0..2 {
                assert!((exact[i] - s[2 * k + i]).abs() <= 1e-14);
                assert!((interp[i] - s[2 * k + i]).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn interpolation_converges_at_second_order() {
        // A kernel that genuinely depends on x, against a fixed smooth density.
        let problem = Problem::builder(1, 1, 1.0)
            .drift(|_, _, o| o[0] = 0.0)
            .kernel(KernelForm::General, |_, x, y, o| o[0] = 0.1 * (x[0] - y[0]).sin() / (1.0 + y[0] * y[0]))
            .constant_diffusion(vec![1.0])
            .gaussian_initial(vec![0.3], vec![1.0])
            .build()
            .unwrap();
        let probes = [-2.71, -0.93, 0.123, 1.618, 3.3];
        let mut errs = Vec::new();
        for m in [16usize, 32, 64] {
            let g = Grid::new(1, 6.0, m, 1.0, 1).unwrap();
            let p0 = initial_level(&g, &problem);
            let mut values = p0.clone();
            values.extend(p0);
            let pd = PiecewiseDensity::new(DensityField::from_values(g, values).unwrap());
            let field = interaction_precompute(&pd, &problem).unwrap();
            let e = probes
                .iter()
                .map(|&x| {
                    let a = interaction_at(&field, &pd, &problem, 0.0, &[x], InteractionMode::Exact).unwrap()[0];
                    let b = interaction_at(&field, &pd, &problem, 0.0, &[x], InteractionMode::Interpolate).unwrap()[0];
                    (a - b).abs()
                })
                .fold(0.0, f64::max);
            errs.push(e);
        }
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!(r1 > 3.0 && r2 > 3.0, "errors {errs:?}");
    }

    #[test]
    fn interpolation_clamps_outside_domain() {
        let problem = Problem::builder(1, 1, 1.0)
            .drift(|_, _, o| o[0] = 0.0)
            .kernel(KernelForm::General, |_, x, _, o| o[0] = x[0])
            .constant_diffusion(vec![1.0])
            .gaussian_initial(vec![0.0], vec![0.5])
            .build()
            .unwrap();
        let g = Grid::new(1, 2.0, 8, 1.0, 1).unwrap();
        let pd = PiecewiseDensity::new(field_from_fn(&g, |_, _| 1.0));
        let field = interaction_precompute(&pd, &problem).unwrap();
        let at_face = interaction_at(&field, &pd, &problem, 0.0, &[2.0], InteractionMode::Interpolate).unwrap();
        let beyond = interaction_at(&field, &pd, &problem, 0.0, &[7.0], InteractionMode::Interpolate).unwrap();
        assert_eq!(at_face, beyond);
    }
}
