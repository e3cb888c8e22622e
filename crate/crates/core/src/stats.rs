//! Order estimation, grid restriction and moment tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{interaction_precompute, DensityCoupling, DensityError, InteractionMode, PiecewiseDensity};
use crate::fpsolve::{solve_fp, FpError, FpOptions};
use crate::grid::Grid;
use crate::model::Problem;
use crate::particle::{simulate_particles, ParticleConfig};
use crate::sde::{simulate_ensemble, Ensemble, EnsembleOptions, Interaction, Recording, SdeError};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("grids are not nested: {0}")]
    NotNested(String),
    #[error("error {value} at row {row} is not positive")]
    NonPositiveError { row: usize, value: f64 },
    #[error("resolutions must double from row to row (finest first); row {row} has {value}")]
    NotDoubling { row: usize, value: f64 },
    #[error("{0} values given where {1} were expected")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paths, got {0}")]
    TooFewPaths(usize),
    #[error("level {0} was not recorded")]
    MissingLevel(usize),
    #[error(transparent)]
    Fp(#[from] FpError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// Injects a fine-grid level onto a coarser nested grid: coarse node `k`
/// takes the fine value at `r · k`.
pub fn restrict(fine_level: &[f64], fine: &Grid, coarse: &Grid) -> Result<Vec<f64>, StatsError> {
    let r = fine
        .refinement_ratio(coarse)
        .ok_or_else(|| StatsError::NotNested(format!("M = {} (alpha {}) over M = {} (alpha {})", fine.m(), fine.alpha(), coarse.m(), coarse.alpha())))?;
    if fine_level.len() != fine.node_count() {
        return Err(StatsError::LengthMismatch(fine_level.len(), fine.node_count()));
    }
    let d = coarse.dim();
    let (mc, mf) = (coarse.m(), fine.m());
    let mut k = vec![0i64; d];
    let mut out = Vec::with_capacity(coarse.node_count());
    for c in 0..coarse.node_count() {
        coarse.unflatten_into(c, &mut k);
        let mut flat = 0;
        for (i, &ki) in k.iter().enumerate() {
            let fi = (ki * r as i64 + mf as i64) as usize;
            flat += fi * fine.stride(i);
        }
        debug_assert!(k.iter().all(|&ki| ki.unsigned_abs() as usize <= mc));
        out.push(fine_level[flat]);
    }
    Ok(out)
}

/// `orders[i] = log2(errors[i + 1] / errors[i])` for resolutions listed
/// finest first, each twice the previous.
pub fn estimate_orders(errors: &[f64], resolutions: &[f64]) -> Result<Vec<f64>, StatsError> {
    if errors.len() != resolutions.len() {
        return Err(StatsError::LengthMismatch(errors.len(), resolutions.len()));
    }
    for (row, &e) in errors.iter().enumerate() {
        if !(e > 0.0) {
            return Err(StatsError::NonPositiveError { row, value: e });
        }
    }
    for (row, w) in resolutions.windows(2).enumerate() {
        if !(w[0] > 0.0) || ((w[1] / w[0]) - 2.0).abs() > 1e-9 {
            return Err(StatsError::NotDoubling { row: row + 1, value: w[1] });
        }
    }
    Ok(errors.windows(2).map(|w| (w[1] / w[0]).log2()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Temporal,
    Spatial,
}

/// One error/order table; rows are finest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub axis: Axis,
    pub resolutions: Vec<f64>,
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
    pub reference: String,
}

impl ConvergenceReport {
    pub fn new(axis: Axis, resolutions: Vec<f64>, errors: Vec<f64>, reference: impl Into<String>) -> Result<Self, StatsError> {
        let orders = estimate_orders(&errors, &resolutions)?;
        Ok(ConvergenceReport { axis, resolutions, errors, orders, reference: reference.into() })
    }

    /// `resolution,error,order` with the order blank on the first row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("resolution,error,order\n");
        for (i, (r, e)) in self.resolutions.iter().zip(&self.errors).enumerate() {
            let order = if i == 0 { String::new() } else { format!("{:?}", self.orders[i - 1]) };
            let _ = writeln!(s, "{r:?},{e:?},{order}");
        }
        s
    }

    /// `log2(resolution),log2(error)`.
    pub fn loglog_csv(&self) -> String {
        let mut s = String::from("log2_resolution,log2_error\n");
        for (r, e) in self.resolutions.iter().zip(&self.errors) {
            let _ = writeln!(s, "{:?},{:?}", r.log2(), e.log2());
        }
        s
    }
}

/// Unbiased sample moments with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub covariance_se: Vec<f64>,
    pub samples: usize,
}

/// Moments of the ensemble's states at `level`.
pub fn sample_moments(e: &Ensemble, level: usize) -> Result<SampleMoments, StatsError> {
    let states = e.level_states(level).ok_or(StatsError::MissingLevel(level))?;
    moments_of(&states, e.dim())
}

/// Moments of `samples` stored point-major with `d` coordinates each.
pub fn moments_of(samples: &[f64], d: usize) -> Result<SampleMoments, StatsError> {
    let p = samples.len() / d.max(1);
    if p < 2 {
        return Err(StatsError::TooFewPaths(p));
    }
    let pf = p as f64;
    let mut mean = vec![0.0; d];
    for x in samples.chunks_exact(d) {
        for i in 0..d {
            mean[i] += x[i];
        }
    }
    for m in mean.iter_mut() {
        *m /= pf;
    }
    let mut cov = vec![0.0; d * d];
    let mut prod_sq = vec![0.0; d * d];
    for x in samples.chunks_exact(d) {
        for i in 0..d {
            for j in 0..d {
                let q = (x[i] - mean[i]) * (x[j] - mean[j]);
                cov[i * d + j] += q;
                prod_sq[i * d + j] += q * q;
            }
        }
    }
    let biased: Vec<f64> = cov.iter().map(|c| c / pf).collect();
    let covariance_se = (0..d * d)
        .map(|ij| {
            let var_q = (prod_sq[ij] / pf - biased[ij] * biased[ij]).max(0.0);
            (var_q / pf).sqrt()
        })
        .collect();
    for c in cov.iter_mut() {
        *c /= pf - 1.0;
    }
    let mean_se = (0..d).map(|i| (cov[i * d + i] / pf).sqrt()).collect();
    Ok(SampleMoments { mean, covariance: cov, mean_se, covariance_se, samples: p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pdf,
    Trajectories,
    Particle,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Pdf => "pdf",
            Method::Trajectories => "trajectories",
            Method::Particle => "particle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub method: Method,
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
}

impl MomentRow {
    pub fn variance(&self, i: usize) -> f64 {
        self.covariance[i * self.mean.len() + i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub dim: usize,
    pub rows: Vec<MomentRow>,
}

impl MomentTable {
    pub fn row(&self, method: Method) -> Option<&MomentRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Columns: method, means, variances, then covariances for `i < j`.
    pub fn to_csv(&self) -> String {
        let d = self.dim;
        let mut s = String::from("method");
        for i in 1..=d {
            let _ = write!(s, ",mean_{i}");
        }
        for i in 1..=d {
            let _ = write!(s, ",var_{i}");
        }
        for i in 1..=d {
            for j in i + 1..=d {
                let _ = write!(s, ",cov_{i}_{j}");
            }
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(r.method.label());
            for m in &r.mean {
                let _ = write!(s, ",{m:?}");
            }
            for i in 0..d {
                let _ = write!(s, ",{:?}", r.covariance[i * d + i]);
            }
            for i in 0..d {
                for j in i + 1..d {
                    let _ = write!(s, ",{:?}", r.covariance[i * d + j]);
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Inputs of [`compare_methods`].
#[derive(Debug, Clone)]
pub struct CompareConfig {
    /// Resolution of the FP solve; its time levels also drive the SDE.
    pub grid: Grid,
    pub paths: usize,
    pub sde_steps: usize,
    pub mode: InteractionMode,
    pub particle: Option<ParticleConfig>,
    pub seed: u64,
}

/// Final-time moments from the density, the density-coupled SDE and the
/// particle system.
pub fn compare_methods(problem: &Problem, cfg: &CompareConfig) -> Result<MomentTable, StatsError> {
    let sol = solve_fp(problem, &cfg.grid, &FpOptions::default())?;
    let pd = PiecewiseDensity::new(sol.field);
    let n_final = cfg.grid.n_steps();
    let dm = pd.density_moments(n_final)?;
    let mut rows = vec![MomentRow { method: Method::Pdf, mean: dm.mean, covariance: dm.covariance }];

    let field = interaction_precompute(&pd, problem)?;
    let coupling = DensityCoupling::new(problem, &pd, &field, cfg.mode)?;
    let opts = EnsembleOptions::new(cfg.paths, cfg.sde_steps, cfg.seed).recording(Recording::Final);
    let ens = simulate_ensemble(problem, Interaction::Density(&coupling), &opts)?;
    let sm = sample_moments(&ens, cfg.sde_steps)?;
    rows.push(MomentRow { method: Method::Trajectories, mean: sm.mean, covariance: sm.covariance });

    if let Some(pc) = &cfg.particle {
        let pe = simulate_particles(problem, pc)?;
        let pm = sample_moments(&pe, pc.n_steps)?;
        rows.push(MomentRow { method: Method::Particle, mean: pm.mean, covariance: pm.covariance });
    }
    Ok(MomentTable { dim: problem.dim(), rows })
}
