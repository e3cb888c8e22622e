//! Refinement studies: FP errors against a fine reference in time or space,
//! and strong EM errors on coupled Brownian paths.

use rayon::prelude::*;

use crate::density::{interaction_precompute, DensityCoupling, InteractionMode, PiecewiseDensity};
use crate::fpsolve::{discrete_l2_error, solve_fp, solve_fp_final, FpError, FpOptions};
use crate::grid::Grid;
use crate::model::Problem;
use crate::sde::{simulate_ladder, strong_error, EnsembleOptions, Interaction, Recording};
use crate::stats::{restrict, Axis, ConvergenceReport, StatsError};

/// Final level of a fine FP solve used as the stand-in for the exact solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub grid: Grid,
    pub level: Vec<f64>,
}

impl Reference {
    pub fn compute(problem: &Problem, grid: &Grid, options: &FpOptions) -> Result<Self, StatsError> {
        let (level, _) = solve_fp_final(problem, grid, options)?;
        Ok(Reference { grid: grid.clone(), level })
    }

    pub fn describe(&self) -> String {
        format!(
            "FP solution with kappa = {}, h = {}, alpha = {}",
            self.grid.kappa(),
            self.grid.h(),
            self.grid.alpha()
        )
    }
}

fn sorted_desc(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable_by(|a, b| b.cmp(a));
    v.dedup();
    v
}

/// Final-time errors for each step count in `ladder`, all on the reference's
/// spatial grid. `parallel` runs the ladder entries concurrently.
pub fn fp_temporal(problem: &Problem, reference: &Reference, ladder: &[usize], options: &FpOptions, parallel: bool) -> Result<ConvergenceReport, StatsError> {
    let ladder = sorted_desc(ladder.to_vec());
    let one = |&n: &usize| -> Result<(f64, f64), StatsError> {
        let g = reference.grid.with_steps(n).map_err(FpError::from)?;
        let (level, _) = solve_fp_final(problem, &g, options)?;
        Ok((g.kappa(), discrete_l2_error(&level, &reference.level, &g)?))
    };
    let rows = run_rows(&ladder, parallel, one)?;
    ConvergenceReport::new(Axis::Temporal, rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect(), reference.describe())
}

/// Final-time errors for each `M` in `ladder` at the reference's step count,
/// measured after restricting the reference onto each coarse grid.
pub fn fp_spatial(problem: &Problem, reference: &Reference, ladder: &[usize], options: &FpOptions, parallel: bool) -> Result<ConvergenceReport, StatsError> {
    let ladder = sorted_desc(ladder.to_vec());
    let one = |&m: &usize| -> Result<(f64, f64), StatsError> {
        let g = reference.grid.with_m(m).map_err(FpError::from)?;
        let (level, _) = solve_fp_final(problem, &g, options)?;
        let r = restrict(&reference.level, &reference.grid, &g)?;
        Ok((g.h(), discrete_l2_error(&level, &r, &g)?))
    };
    let rows = run_rows(&ladder, parallel, one)?;
    ConvergenceReport::new(Axis::Spatial, rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect(), reference.describe())
}

fn run_rows<F>(ladder: &[usize], parallel: bool, one: F) -> Result<Vec<(f64, f64)>, StatsError>
where
    F: Fn(&usize) -> Result<(f64, f64), StatsError> + Sync + Send,
{
    if parallel {
        ladder.par_iter().map(one).collect()
    } else {
        ladder.iter().map(one).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EmStudy {
    /// Grid of the FP solve that supplies the interaction term.
    pub density_grid: Grid,
    pub reference_steps: usize,
    pub ladder: Vec<usize>,
    pub paths: usize,
    pub seed: u64,
    pub mode: InteractionMode,
}

/// RMS endpoint error of each ladder entry against `reference_steps`, all
/// paths sharing Brownian increments drawn at the reference resolution.
pub fn em_convergence(problem: &Problem, study: &EmStudy) -> Result<ConvergenceReport, StatsError> {
    let sol = solve_fp(problem, &study.density_grid, &FpOptions::default())?;
    let pd = PiecewiseDensity::new(sol.field);
    let field = interaction_precompute(&pd, problem)?;
    let coupling = DensityCoupling::new(problem, &pd, &field, study.mode)?;
    let ladder = sorted_desc(study.ladder.clone());
    let mut steps = vec![study.reference_steps];
    steps.extend(&ladder);
    let opts = EnsembleOptions::new(study.paths, study.reference_steps, study.seed)
        .brownian_steps(study.reference_steps)
        .recording(Recording::Final);
    let ensembles = simulate_ladder(problem, Interaction::Density(&coupling), &steps, &opts)?;
    let mut resolutions = Vec::new();
    let mut errors = Vec::new();
    for (e, &n) in ensembles[1..].iter().zip(&ladder) {
        errors.push(strong_error(e, &ensembles[0])?);
        resolutions.push(problem.horizon() / n as f64);
    }
    let reference = format!(
        "EM with kappa = {} on the same Brownian paths; density kappa = {}, h = {}",
        problem.horizon() / study.reference_steps as f64,
        study.density_grid.kappa(),
        study.density_grid.h()
    );
    ConvergenceReport::new(Axis::Temporal, resolutions, errors, reference)
}
