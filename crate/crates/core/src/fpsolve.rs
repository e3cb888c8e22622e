//! Explicit-implicit finite differences for the truncated nonlinear
//! Fokker-Planck equation
//!
//! ```text
//! ∂p/∂t = -Σ_i ∂_i[(f_i + ∫_D K_i(·,·,y) p(·,y) dy) p] + ½ Σ_ij ∂_i ∂_j[a_ij p]
//! ```
//!
//! on `(-alpha, alpha)^d` with homogeneous Dirichlet data. Each step treats
//! the advective flux explicitly at level `n` (including the interaction
//! quadrature `S^{n,k}`) and the diffusion implicitly at level `n + 1`:
//!
//! ```text
//! (I - κ B(t_{n+1})) p^{n+1} = p^n + κ drift(p^n, t_n)
//! ```
//!
//! so every step is a single linear solve.

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{Grid, GridError};
use crate::linalg::{self, FactorizedSystem, LinalgError, SolverKind, SparseMatrix, TripletBuilder};
use crate::model::{KernelForm, Problem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("linear solve failed at step {step}: {source}")]
    Linear { step: usize, source: LinalgError },
    #[error("size mismatch: expected {expected} values, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("problem and grid disagree: {0}")]
    Incompatible(String),
    #[error("level {level} out of range (N = {n_steps})")]
    LevelOutOfRange { level: usize, n_steps: usize },
}

/// Node values `p^{n,k}` at every time level, flattened level-major in the
/// grid's node order.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Grid,
    values: Vec<f64>,
}

impl DensityField {
    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self, FpError> {
        let expected = (grid.n_steps() + 1) * grid.node_count();
        if values.len() != expected {
            return Err(FpError::SizeMismatch { expected, got: values.len() });
        }
        Ok(DensityField { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_levels(&self) -> usize {
        self.grid.n_steps() + 1
    }

    pub fn level(&self, n: usize) -> &[f64] {
        let len = self.grid.node_count();
        &self.values[n * len..(n + 1) * len]
    }

    pub fn try_level(&self, n: usize) -> Result<&[f64], FpError> {
        if n > self.grid.n_steps() {
            return Err(FpError::LevelOutOfRange { level: n, n_steps: self.grid.n_steps() });
        }
        Ok(self.level(n))
    }

    pub fn final_level(&self) -> &[f64] {
        self.level(self.grid.n_steps())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub n: usize,
    pub mass: f64,
    pub min_value: f64,
    pub max_value: f64,
    /// Relative residual of the linear solve producing this level (NaN at level 0).
    pub solver_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverWarning {
    LossOfPositivity { n: usize, min_value: f64, max_value: f64 },
    MassDrift { n: usize, mass: f64, initial_mass: f64 },
    /// Explicit advection Courant number `κ max|f + S| / h` above one.
    Courant { n: usize, courant: f64 },
}

#[derive(Debug, Clone)]
pub struct FpOptions {
    pub diagnostics: bool,
    pub solver: SolverKind,
}

impl Default for FpOptions {
    fn default() -> Self {
        FpOptions { diagnostics: false, solver: SolverKind::Auto }
    }
}

#[derive(Debug, Clone)]
pub struct FpSolution {
    pub field: DensityField,
    pub diagnostics: Vec<StepDiagnostics>,
    pub warnings: Vec<SolverWarning>,
}

/// `S_i^{n,k} = Σ_s K_i(t, x^k, x^s) p^s h^d` at every node, node-major
/// (`out[k * d + i]`). Boundary nodes take part with their (zero) values.
pub fn kernel_sum(p_level: &[f64], grid: &Grid, problem: &Problem, t: f64) -> Result<Vec<f64>, FpError> {
    check_level(p_level, grid)?;
    let positions = grid.positions();
    Ok(kernel_sum_with(p_level, grid, &positions, problem, t))
}

pub(crate) fn kernel_sum_with(p_level: &[f64], grid: &Grid, positions: &[f64], problem: &Problem, t: f64) -> Vec<f64> {
    let d = grid.dim();
    let n = grid.node_count();
    match problem.kernel_form() {
        KernelForm::Zero => vec![0.0; n * d],
        KernelForm::StateIndependent => {
            let s = interaction_sum(p_level, grid, positions, problem, t, &positions[..d]);
            let mut out = Vec::with_capacity(n * d);
            for _ in 0..n {
                out.extend_from_slice(&s);
            }
            out
        }
        KernelForm::General => {
            let mut out = vec![0.0; n * d];
            out.par_chunks_mut(d).enumerate().for_each(|(k, o)| {
                let s = interaction_sum(p_level, grid, positions, problem, t, &positions[k * d..(k + 1) * d]);
                o.copy_from_slice(&s);
            });
            out
        }
    }
}

/// `Σ_s K(t, x, x^s) p^s h^d` at an arbitrary point `x`.
///
/// Node `s` is summed together with its mirror node `N - 1 - s` (position
/// `-x^s`), so an odd kernel against an even density cancels exactly.
pub(crate) fn interaction_sum(p_level: &[f64], grid: &Grid, positions: &[f64], problem: &Problem, t: f64, x: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let hd = grid.cell_volume();
    let n = p_level.len();
    let mut acc = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    let term = |s: usize, out: &mut [f64]| {
        let ps = p_level[s];
        if ps == 0.0 {
            out.fill(0.0);
            return;
        }
        problem.kernel(t, x, &positions[s * d..(s + 1) * d], out);
        for v in out.iter_mut() {
            *v = *v * ps * hd;
        }
    };
    for s in 0..n / 2 {
        term(s, &mut a);
        term(n - 1 - s, &mut b);
        for i in 0..d {
            acc[i] += a[i] + b[i];
        }
    }
    if n % 2 == 1 {
        term(n / 2, &mut a);
        for i in 0..d {
            acc[i] += a[i];
        }
    }
    acc
}

/// Central-difference divergence of the lagged flux `(f + S) p`, negated.
/// Zero at boundary nodes.
pub fn explicit_drift(p_level: &[f64], grid: &Grid, problem: &Problem, t: f64) -> Result<Vec<f64>, FpError> {
    check_level(p_level, grid)?;
    let positions = grid.positions();
    let s = kernel_sum_with(p_level, grid, &positions, problem, t);
    let velocity = advection_velocity(grid, &positions, problem, t, &s);
    Ok(drift_from_velocity(p_level, grid, &velocity))
}

/// `f_i(t, x^k) + S_i^{n,k}` at every node, node-major.
fn advection_velocity(grid: &Grid, positions: &[f64], problem: &Problem, t: f64, s: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let mut v = vec![0.0; grid.node_count() * d];
    for (k, vk) in v.chunks_exact_mut(d).enumerate() {
        problem.drift(t, &positions[k * d..(k + 1) * d], vk);
        for i in 0..d {
            vk[i] += s[k * d + i];
        }
    }
    v
}

fn drift_from_velocity(p_level: &[f64], grid: &Grid, velocity: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let two_h = 2.0 * grid.h();
    let mut out = vec![0.0; grid.node_count()];
    for (k, o) in out.iter_mut().enumerate() {
        if grid.is_boundary_flat(k) {
            continue;
        }
        let mut acc = 0.0;
        for i in 0..d {
            let st = grid.stride(i);
            let (kp, km) = (k + st, k - st);
            acc += (velocity[kp * d + i] * p_level[kp] - velocity[km * d + i] * p_level[km]) / two_h;
        }
        *o = -acc;
    }
    out
}

/// `a_ij(t, x^k)` at every node, `out[k * d * d + i * d + j]`.
fn diffusion_at_nodes(grid: &Grid, positions: &[f64], problem: &Problem, t: f64) -> Vec<f64> {
    let d = grid.dim();
    let mut sigma = vec![0.0; d * problem.noise_dim()];
    let mut a = vec![0.0; grid.node_count() * d * d];
    for (k, ak) in a.chunks_exact_mut(d * d).enumerate() {
        problem.diffusion_matrix_into(t, &positions[k * d..(k + 1) * d], &mut sigma, ak);
    }
    a
}

/// The diffusion operator `B(t)` with
///
/// ```text
/// (B p)^k = Σ_i (a_ii^{k+η_i} p^{k+η_i} - 2 a_ii^k p^k + a_ii^{k-η_i} p^{k-η_i}) / (2h²)
///         + Σ_{i≠j} (a_ij^{k+η_i+η_j} p^{k+η_i+η_j} - a_ij^{k+η_i-η_j} p^{k+η_i-η_j}
///                    - a_ij^{k-η_i+η_j} p^{k-η_i+η_j} + a_ij^{k-η_i-η_j} p^{k-η_i-η_j}) / (8h²)
/// ```
///
/// on interior rows and zero rows on the boundary.
pub fn assemble_implicit(grid: &Grid, problem: &Problem, t_next: f64) -> Result<SparseMatrix, FpError> {
    let positions = grid.positions();
    let a = diffusion_at_nodes(grid, &positions, problem, t_next);
    let mut b = TripletBuilder::with_capacity(grid.node_count(), grid.node_count(), grid.node_count() * stencil_size(grid.dim()));
    push_stencil(grid, &a, 1.0, &mut b);
    b.finalize().map_err(|source| FpError::Linear { step: 0, source })
}

fn stencil_size(d: usize) -> usize {
    1 + 2 * d + 4 * d * d.saturating_sub(1)
}

/// Pushes `scale · B` entries for every interior row.
fn push_stencil(grid: &Grid, a: &[f64], scale: f64, out: &mut TripletBuilder) {
    let d = grid.dim();
    let h2 = grid.h() * grid.h();
    let c2 = scale / (2.0 * h2);
    let c8 = scale / (8.0 * h2);
    let aij = |node: usize, i: usize, j: usize| a[node * d * d + i * d + j];
    for k in 0..grid.node_count() {
        if grid.is_boundary_flat(k) {
            continue;
        }
        for i in 0..d {
            let si = grid.stride(i);
            out.push(k, k + si, aij(k + si, i, i) * c2);
            out.push(k, k, -2.0 * aij(k, i, i) * c2);
            out.push(k, k - si, aij(k - si, i, i) * c2);
            for j in 0..d {
                if j == i {
                    continue;
                }
                let sj = grid.stride(j);
                let pp = k + si + sj;
                let pm = k + si - sj;
                let mp = k - si + sj;
                let mm = k - si - sj;
                out.push(k, pp, aij(pp, i, j) * c8);
                out.push(k, pm, -aij(pm, i, j) * c8);
                out.push(k, mp, -aij(mp, i, j) * c8);
                out.push(k, mm, aij(mm, i, j) * c8);
            }
        }
    }
}

/// `I - κ B(t_next)`, with identity rows on the boundary.
pub fn implicit_system(grid: &Grid, problem: &Problem, t_next: f64, kappa: f64) -> Result<SparseMatrix, FpError> {
    let positions = grid.positions();
    let a = diffusion_at_nodes(grid, &positions, problem, t_next);
    system_from_diffusion(grid, &a, kappa)
}

fn system_from_diffusion(grid: &Grid, a: &[f64], kappa: f64) -> Result<SparseMatrix, FpError> {
    let n = grid.node_count();
    let mut b = TripletBuilder::with_capacity(n, n, n * (stencil_size(grid.dim()) + 1));
    for k in 0..n {
        b.push(k, k, 1.0);
    }
    push_stencil(grid, a, -kappa, &mut b);
    b.finalize().map_err(|source| FpError::Linear { step: 0, source })
}

/// Level-0 values: `p0` at the nodes with the boundary zeroed.
pub fn initial_level(grid: &Grid, problem: &Problem) -> Vec<f64> {
    let d = grid.dim();
    let positions = grid.positions();
    (0..grid.node_count())
        .map(|k| if grid.is_boundary_flat(k) { 0.0 } else { problem.initial_density(&positions[k * d..(k + 1) * d]) })
        .collect()
}

/// Advances the scheme one level at a time.
pub struct FpStepper<'a> {
    grid: &'a Grid,
    problem: &'a Problem,
    positions: Vec<f64>,
    boundary: Vec<bool>,
    solver: SolverKind,
    frozen: Option<(SparseMatrix, FactorizedSystem)>,
    compute_residual: bool,
}

/// Output of one step besides the new level.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub residual: f64,
    pub courant: f64,
}

impl<'a> FpStepper<'a> {
    pub fn new(grid: &'a Grid, problem: &'a Problem, solver: SolverKind) -> Result<Self, FpError> {
        if grid.dim() != problem.dim() {
            return Err(FpError::Incompatible(format!("grid d = {}, problem d = {}", grid.dim(), problem.dim())));
        }
        Ok(FpStepper {
            grid,
            problem,
            positions: grid.positions(),
            boundary: grid.boundary_mask(),
            solver,
            frozen: None,
            compute_residual: false,
        })
    }

    pub fn with_residuals(mut self, on: bool) -> Self {
        self.compute_residual = on;
        self
    }

    /// Computes `p^{n+1}` from `p^n`.
    pub fn step(&mut self, p_level: &[f64], n: usize) -> Result<(Vec<f64>, StepInfo), FpError> {
        check_level(p_level, self.grid)?;
        let grid = self.grid;
        let kappa = grid.kappa();
        let t_n = grid.time(n);
        let t_next = grid.time(n + 1);

        let s = kernel_sum_with(p_level, grid, &self.positions, self.problem, t_n);
        let velocity = advection_velocity(grid, &self.positions, self.problem, t_n, &s);
        let drift = drift_from_velocity(p_level, grid, &velocity);
        let courant = kappa * velocity.iter().fold(0.0f64, |m, v| m.max(v.abs())) / grid.h();

        let mut rhs: Vec<f64> = p_level.iter().zip(&drift).map(|(p, q)| p + kappa * q).collect();
        for (r, &b) in rhs.iter_mut().zip(&self.boundary) {
            if b {
                *r = 0.0;
            }
        }

        let fresh;
        let (matrix, system) = if self.problem.constant_diffusion() {
            if self.frozen.is_none() {
                let a = diffusion_at_nodes(grid, &self.positions, self.problem, t_next);
                let m = system_from_diffusion(grid, &a, kappa)?;
                let f = linalg::factorize_with(&m, self.solver).map_err(|source| FpError::Linear { step: n, source })?;
                self.frozen = Some((m, f));
            }
            let (m, f) = self.frozen.as_ref().unwrap();
            (m, f)
        } else {
            let a = diffusion_at_nodes(grid, &self.positions, self.problem, t_next);
            let m = system_from_diffusion(grid, &a, kappa)?;
            let f = linalg::factorize_with(&m, self.solver).map_err(|source| FpError::Linear { step: n, source })?;
            fresh = (m, f);
            (&fresh.0, &fresh.1)
        };

        let (mut next, iterative_residual) =
            system.solve_with_residual(&rhs).map_err(|source| FpError::Linear { step: n, source })?;
        let residual = if self.compute_residual { linalg::relative_residual(matrix, &next, &rhs) } else { iterative_residual };
        for (v, &b) in next.iter_mut().zip(&self.boundary) {
            if b {
                *v = 0.0;
            }
        }
        Ok((next, StepInfo { residual, courant }))
    }
}

/// One step of the scheme from level `n`.
pub fn step(p_level: &[f64], grid: &Grid, problem: &Problem, n: usize) -> Result<Vec<f64>, FpError> {
    FpStepper::new(grid, problem, SolverKind::Auto)?.step(p_level, n).map(|(p, _)| p)
}

fn check_level(p_level: &[f64], grid: &Grid) -> Result<(), FpError> {
    if p_level.len() != grid.node_count() {
        return Err(FpError::SizeMismatch { expected: grid.node_count(), got: p_level.len() });
    }
    Ok(())
}

fn check_compatible(problem: &Problem, grid: &Grid) -> Result<(), FpError> {
    if problem.dim() != grid.dim() {
        return Err(FpError::Incompatible(format!("grid d = {}, problem d = {}", grid.dim(), problem.dim())));
    }
    if (problem.horizon() - grid.horizon()).abs() > 1e-12 * problem.horizon() {
        return Err(FpError::Incompatible(format!("grid T = {}, problem T = {}", grid.horizon(), problem.horizon())));
    }
    Ok(())
}

struct Monitor {
    diagnostics: bool,
    records: Vec<StepDiagnostics>,
    warnings: Vec<SolverWarning>,
    initial_mass: f64,
    warned_positivity: bool,
    warned_mass: bool,
    warned_courant: bool,
    hd: f64,
}

impl Monitor {
    fn new(diagnostics: bool, level0: &[f64], hd: f64) -> Self {
        let mut m = Monitor {
            diagnostics,
            records: Vec::new(),
            warnings: Vec::new(),
            initial_mass: level0.iter().sum::<f64>() * hd,
            warned_positivity: false,
            warned_mass: false,
            warned_courant: false,
            hd,
        };
        m.observe(0, level0, f64::NAN, 0.0);
        m
    }

    fn observe(&mut self, n: usize, level: &[f64], residual: f64, courant: f64) {
        let mass = level.iter().sum::<f64>() * self.hd;
        let (lo, hi) = level.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if self.diagnostics {
            self.records.push(StepDiagnostics { n, mass, min_value: lo, max_value: hi, solver_residual: residual });
        }
        if !self.warned_positivity && lo < -0.01 * hi {
            warn!("density lost positivity at level {n}: min {lo:e}, max {hi:e}");
            self.warnings.push(SolverWarning::LossOfPositivity { n, min_value: lo, max_value: hi });
            self.warned_positivity = true;
        }
        if !self.warned_mass && (mass - self.initial_mass).abs() > 0.05 * self.initial_mass.abs() {
            warn!("mass drifted to {mass} at level {n} (initial {}); κ may be too large or the domain too small", self.initial_mass);
            self.warnings.push(SolverWarning::MassDrift { n, mass, initial_mass: self.initial_mass });
            self.warned_mass = true;
        }
        if !self.warned_courant && courant > 1.0 {
            warn!("explicit advection Courant number {courant} > 1 at step {n}");
            self.warnings.push(SolverWarning::Courant { n, courant });
            self.warned_courant = true;
        }
    }
}

/// Solves the scheme over all `N` steps, keeping every level.
pub fn solve_fp(problem: &Problem, grid: &Grid, options: &FpOptions) -> Result<FpSolution, FpError> {
    check_compatible(problem, grid)?;
    let nodes = grid.node_count();
    let mut values = Vec::with_capacity((grid.n_steps() + 1) * nodes);
    values.extend(initial_level(grid, problem));
    let mut monitor = Monitor::new(options.diagnostics, &values[..nodes], grid.cell_volume());
    let mut stepper = FpStepper::new(grid, problem, options.solver)?.with_residuals(options.diagnostics);
    for n in 0..grid.n_steps() {
        let (next, info) = stepper.step(&values[n * nodes..(n + 1) * nodes], n)?;
        monitor.observe(n + 1, &next, info.residual, info.courant);
        values.extend(next);
    }
    Ok(FpSolution {
        field: DensityField::from_values(grid.clone(), values)?,
        diagnostics: monitor.records,
        warnings: monitor.warnings,
    })
}

/// Like [`solve_fp`] but keeps only the final level.
pub fn solve_fp_final(problem: &Problem, grid: &Grid, options: &FpOptions) -> Result<(Vec<f64>, Vec<SolverWarning>), FpError> {
    check_compatible(problem, grid)?;
    let mut level = initial_level(grid, problem);
    let mut monitor = Monitor::new(false, &level, grid.cell_volume());
    let mut stepper = FpStepper::new(grid, problem, options.solver)?;
    for n in 0..grid.n_steps() {
        let (next, info) = stepper.step(&level, n)?;
        monitor.observe(n + 1, &next, info.residual, info.courant);
        level = next;
    }
    Ok((level, monitor.warnings))
}

/// `√(Σ_k |a_k - b_k|² h^d)`.
pub fn discrete_l2_error(a: &[f64], b: &[f64], grid: &Grid) -> Result<f64, FpError> {
    if a.len() != b.len() {
        return Err(FpError::SizeMismatch { expected: a.len(), got: b.len() });
    }
    check_level(a, grid)?;
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum * grid.cell_volume()).sqrt())
}
