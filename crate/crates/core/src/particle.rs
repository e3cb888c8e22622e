//! Interacting particle baseline: the law in the drift is replaced by the
//! empirical measure of `N_p` particles simulated together.

use rayon::prelude::*;

use crate::model::{KernelForm, Problem};
use crate::sde::{em_update, sample_initial, Ensemble, NormalStream, Recording, SdeError, StepScratch};

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleConfig {
    pub n_particles: usize,
    /// Independent replications; their particles are pooled in the output.
    pub n_trials: usize,
    /// `N`, so the step is `T / N`.
    pub n_steps: usize,
    pub seed: u64,
    pub recording: Recording,
}

impl ParticleConfig {
    pub fn new(n_particles: usize, n_trials: usize, n_steps: usize, seed: u64) -> Self {
        ParticleConfig { n_particles, n_trials, n_steps, seed, recording: Recording::Final }
    }

    fn validate(&self) -> Result<(), SdeError> {
        if self.n_particles == 0 || self.n_trials == 0 || self.n_steps == 0 {
            return Err(SdeError::InvalidArgument(format!(
                "particles, trials and steps must be positive, got {}, {}, {}",
                self.n_particles, self.n_trials, self.n_steps
            )));
        }
        Ok(())
    }
}

/// Runs every trial; particle `i` of trial `r` is output path `r · N_p + i`
/// and uses that number as its stream id.
pub fn simulate_particles(problem: &Problem, cfg: &ParticleConfig) -> Result<Ensemble, SdeError> {
    cfg.validate()?;
    let streams: Vec<u64> = (0..(cfg.n_trials * cfg.n_particles) as u64).collect();
    simulate_particles_with_streams(problem, cfg, &streams)
}

/// Like [`simulate_particles`] with explicit stream ids, `N_p` per trial.
pub fn simulate_particles_with_streams(problem: &Problem, cfg: &ParticleConfig, streams: &[u64]) -> Result<Ensemble, SdeError> {
    cfg.validate()?;
    let np = cfg.n_particles;
    if streams.len() != cfg.n_trials * np {
        return Err(SdeError::InvalidArgument(format!("expected {} stream ids, got {}", cfg.n_trials * np, streams.len())));
    }
    let trials: Vec<Result<Vec<f64>, SdeError>> =
        streams.par_chunks(np).enumerate().map(|(r, ids)| run_trial(problem, cfg, ids).map_err(|(i, step)| SdeError::NonFinite { path: r * np + i, step })).collect();
    let mut states = Vec::new();
    for t in trials {
        states.extend(t?);
    }
    let levels = match cfg.recording {
        Recording::All => (0..=cfg.n_steps).collect(),
        Recording::Final => vec![0, cfg.n_steps],
    };
    Ok(Ensemble {
        description: problem.name().to_string(),
        dim: problem.dim(),
        horizon: problem.horizon(),
        n_steps: cfg.n_steps,
        seed: cfg.seed,
        brownian_steps: cfg.n_steps,
        density: None,
        levels,
        states,
    })
}

/// Returns `particles × levels × d`, or the failing `(particle, step)`.
fn run_trial(problem: &Problem, cfg: &ParticleConfig, streams: &[u64]) -> Result<Vec<f64>, (usize, usize)> {
    let d = problem.dim();
    let m = problem.noise_dim();
    let np = streams.len();
    let n_steps = cfg.n_steps;
    let kappa = problem.horizon() / n_steps as f64;
    let scale = kappa.sqrt();
    let record_all = cfg.recording == Recording::All;

    let mut xs = vec![0.0; np * d];
    for (x, &s) in xs.chunks_exact_mut(d).zip(streams) {
        sample_initial(problem, cfg.seed, s, x);
    }
    let mut normals: Vec<NormalStream> = streams.iter().map(|&s| NormalStream::new(cfg.seed, s)).collect();
    let n_levels = if record_all { n_steps + 1 } else { 2 };
    let mut trace: Vec<Vec<f64>> = xs.chunks_exact(d).map(|x| {
        let mut v = Vec::with_capacity(n_levels * d);
        v.extend_from_slice(x);
        v
    }).collect();

    let mut g = vec![0.0; np * d];
    let mut next = vec![0.0; np * d];
    let mut dw = vec![0.0; m];
    let mut scratch = StepScratch::new(d, m);
    for n in 0..n_steps {
        let t = n as f64 * kappa;
        let has_kernel = empirical_interaction(problem, t, &xs, d, &mut g);
        for i in 0..np {
            for w in dw.iter_mut() {
                *w = scale * normals[i].next();
            }
            let gi = if has_kernel { Some(&g[i * d..(i + 1) * d]) } else { None };
            em_update(problem, &xs[i * d..(i + 1) * d], t, gi, &dw, kappa, &mut scratch, &mut next[i * d..(i + 1) * d]);
            if next[i * d..(i + 1) * d].iter().any(|v| !v.is_finite()) {
                return Err((i, n));
            }
        }
        std::mem::swap(&mut xs, &mut next);
        if record_all || n + 1 == n_steps {
            for (tr, x) in trace.iter_mut().zip(xs.chunks_exact(d)) {
                tr.extend_from_slice(x);
            }
        }
    }
    Ok(trace.concat())
}

/// `g[i] = (1 / N_p) Σ_j K(t, X_i, X_j)`; returns false when the kernel is zero.
fn empirical_interaction(problem: &Problem, t: f64, xs: &[f64], d: usize, g: &mut [f64]) -> bool {
    let np = xs.len() / d;
    let sum_at = |x: &[f64], out: &mut [f64]| {
        let mut kv = vec![0.0; d];
        out.fill(0.0);
        for y in xs.chunks_exact(d) {
            problem.kernel(t, x, y, &mut kv);
            for c in 0..d {
                out[c] += kv[c];
            }
        }
        for o in out.iter_mut() {
            *o /= np as f64;
        }
    };
    match problem.kernel_form() {
        KernelForm::Zero => false,
        KernelForm::StateIndependent => {
            let mut s = vec![0.0; d];
            sum_at(&xs[..d], &mut s);
            for gi in g.chunks_exact_mut(d) {
                gi.copy_from_slice(&s);
            }
            true
        }
        KernelForm::General => {
            g.par_chunks_mut(d).zip(xs.par_chunks(d)).for_each(|(gi, x)| sum_at(x, gi));
            true
        }
    }
}
