//! Brownian increments and the density-coupled Euler–Maruyama integrator.
//!
//! Every normal draw is addressed by `(seed, stream, index)`: ChaCha8 keyed by
//! `seed`, with the ChaCha stream set to the path's stream id and Box–Muller
//! pair `q` read from word position `4q`. Paths are therefore reproducible
//! regardless of how they are scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::density::{DensityCoupling, DensityError, InteractionMode};
use crate::model::{KernelForm, Problem};

/// Mixed into the seed of the generator that draws initial states.
const INITIAL_STATE_DOMAIN: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("non-finite state on path {path} at step {step}")]
    NonFinite { path: usize, step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ensembles are not coupled: {0}")]
    Provenance(String),
    #[error("problem has an interaction kernel but no density was supplied")]
    MissingDensity,
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Sequential reader of the normal draws of one stream.
pub(crate) struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub(crate) fn new(seed: u64, stream: u64) -> Self {
        Self::starting_at(seed, stream, 0)
    }

    /// Positions the reader at normal index `index`.
    pub(crate) fn starting_at(seed: u64, stream: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(index / 2) * 4);
        let mut s = NormalStream { rng, spare: None };
        if index % 2 == 1 {
            s.next();
        }
        s
    }

    pub(crate) fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// Draws `X_0` for a stream from the problem's sampler.
pub(crate) fn sample_initial(problem: &Problem, seed: u64, stream: u64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ INITIAL_STATE_DOMAIN);
    rng.set_stream(stream);
    problem.sample_initial(&mut rng, out);
}

/// `N` increments of an `m`-dimensional Brownian motion with step `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    m: usize,
    kappa: f64,
    seed: u64,
    stream: u64,
    increments: Vec<f64>,
}

pub fn brownian_path(seed: u64, stream: u64, n_steps: usize, m: usize, kappa: f64) -> Result<BrownianPath, SdeError> {
    if n_steps == 0 || m == 0 {
        return Err(SdeError::InvalidArgument(format!("need N >= 1 and m >= 1, got N = {n_steps}, m = {m}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(SdeError::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    let scale = kappa.sqrt();
    let mut normals = NormalStream::new(seed, stream);
    let increments = (0..n_steps * m).map(|_| scale * normals.next()).collect();
    Ok(BrownianPath { m, kappa, seed, stream, increments })
}

impl BrownianPath {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.m
    }

    pub fn increment(&self, n: usize) -> &[f64] {
        &self.increments[n * self.m..(n + 1) * self.m]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Sums each run of `r` consecutive increments.
    pub fn coarsen(&self, r: usize) -> Result<BrownianPath, SdeError> {
        let n = self.n_steps();
        if r == 0 || n % r != 0 {
            return Err(SdeError::InvalidArgument(format!("cannot coarsen {n} steps by {r}")));
        }
        let m = self.m;
        let mut increments = vec![0.0; (n / r) * m];
        for (j, out) in increments.chunks_exact_mut(m).enumerate() {
            for q in 0..r {
                for (o, w) in out.iter_mut().zip(self.increment(j * r + q)) {
                    *o += w;
                }
            }
        }
        Ok(BrownianPath { m, kappa: self.kappa * r as f64, seed: self.seed, stream: self.stream, increments })
    }
}

/// What the drift integral is evaluated against.
#[derive(Clone, Copy)]
pub enum Interaction<'a> {
    /// No interaction term; only valid when the problem's kernel is zero.
    None,
    Density(&'a DensityCoupling<'a>),
}

impl<'a> Interaction<'a> {
    fn check(&self, problem: &Problem) -> Result<(), SdeError> {
        if matches!(self, Interaction::None) && problem.kernel_form() != KernelForm::Zero {
            return Err(SdeError::MissingDensity);
        }
        Ok(())
    }

    fn tag(&self) -> Option<DensityTag> {
        match self {
            Interaction::None => None,
            Interaction::Density(c) => Some(DensityTag::of(c)),
        }
    }
}

/// Identifies the density an ensemble was driven by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityTag {
    pub alpha: f64,
    pub m: usize,
    pub n_steps: usize,
    pub mode: InteractionMode,
    /// FNV-1a over the bit patterns of every stored value.
    pub fingerprint: u64,
}

impl DensityTag {
    fn of(c: &DensityCoupling<'_>) -> Self {
        let g = c.density().grid();
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for v in c.density().field().values() {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        DensityTag { alpha: g.alpha(), m: g.m(), n_steps: g.n_steps(), mode: c.mode(), fingerprint: hash }
    }
}

/// Scratch buffers for [`em_update`].
pub(crate) struct StepScratch {
    f: Vec<f64>,
    g: Vec<f64>,
    sigma: Vec<f64>,
}

impl StepScratch {
    pub(crate) fn new(d: usize, m: usize) -> Self {
        StepScratch { f: vec![0.0; d], g: vec![0.0; d], sigma: vec![0.0; d * m] }
    }
}

/// `x + κ f(t, x) + κ G + σ(t, x) ΔW` written into `out`, where `G` is the
/// interaction term already evaluated at `x` (or `None` for no interaction).
pub(crate) fn em_update(problem: &Problem, x: &[f64], t: f64, g: Option<&[f64]>, dw: &[f64], kappa: f64, s: &mut StepScratch, out: &mut [f64]) {
    let d = x.len();
    let m = dw.len();
    problem.drift(t, x, &mut s.f);
    problem.diffusion(t, x, &mut s.sigma);
    for i in 0..d {
        let mut noise = 0.0;
        for l in 0..m {
            noise += s.sigma[i * m + l] * dw[l];
        }
        let inter = g.map_or(0.0, |g| g[i]);
        out[i] = x[i] + kappa * s.f[i] + kappa * inter + noise;
    }
}

fn em_step_level(
    problem: &Problem,
    interaction: Interaction<'_>,
    level: usize,
    x: &[f64],
    t: f64,
    dw: &[f64],
    kappa: f64,
    s: &mut StepScratch,
    out: &mut [f64],
) {
    match interaction {
        Interaction::Density(c) if problem.kernel_form() != KernelForm::Zero => {
            let mut g = std::mem::take(&mut s.g);
            c.at_level(level, x, &mut g);
            em_update(problem, x, t, Some(&g), dw, kappa, s, out);
            s.g = g;
        }
        _ => em_update(problem, x, t, None, dw, kappa, s, out),
    }
}

/// One Euler–Maruyama step from `(t_n, x)`; the density level is `floor(t_n / κ_density)`.
pub fn em_step(problem: &Problem, interaction: Interaction<'_>, x: &[f64], t_n: f64, dw: &[f64], kappa: f64) -> Result<Vec<f64>, SdeError> {
    interaction.check(problem)?;
    if x.len() != problem.dim() || dw.len() != problem.noise_dim() {
        return Err(SdeError::InvalidArgument(format!(
            "state has {} entries and increment {}, expected {} and {}",
            x.len(),
            dw.len(),
            problem.dim(),
            problem.noise_dim()
        )));
    }
    let level = match interaction {
        Interaction::Density(c) => c.density().level_at(t_n)?,
        Interaction::None => 0,
    };
    let mut s = StepScratch::new(problem.dim(), problem.noise_dim());
    let mut out = vec![0.0; x.len()];
    em_step_level(problem, interaction, level, x, t_n, dw, kappa, &mut s, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SdeError::NonFinite { path: 0, step: (t_n / kappa).round() as usize });
    }
    Ok(out)
}

/// Which time levels an ensemble keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recording {
    #[default]
    All,
    /// Level 0 and level `N` only.
    Final,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOptions {
    pub paths: usize,
    /// `N`, so the step is `T / N`.
    pub n_steps: usize,
    pub seed: u64,
    /// Resolution the Brownian increments are drawn at; must be `N · 2^j`.
    /// Defaults to `N` when `None`.
    pub brownian_steps: Option<usize>,
    pub recording: Recording,
}

impl EnsembleOptions {
    pub fn new(paths: usize, n_steps: usize, seed: u64) -> Self {
        EnsembleOptions { paths, n_steps, seed, brownian_steps: None, recording: Recording::All }
    }

    pub fn brownian_steps(mut self, base: usize) -> Self {
        self.brownian_steps = Some(base);
        self
    }

    pub fn recording(mut self, r: Recording) -> Self {
        self.recording = r;
        self
    }
}

/// Simulated states of a set of paths at a set of recorded levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub(crate) description: String,
    pub(crate) dim: usize,
    pub(crate) horizon: f64,
    pub(crate) n_steps: usize,
    pub(crate) seed: u64,
    pub(crate) brownian_steps: usize,
    pub(crate) density: Option<DensityTag>,
    pub(crate) levels: Vec<usize>,
    /// `paths × levels × d`.
    pub(crate) states: Vec<f64>,
}

impl Ensemble {
    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn kappa(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn brownian_steps(&self) -> usize {
        self.brownian_steps
    }

    pub fn density(&self) -> Option<&DensityTag> {
        self.density.as_ref()
    }

    pub fn paths(&self) -> usize {
        if self.levels.is_empty() || self.dim == 0 {
            0
        } else {
            self.states.len() / (self.levels.len() * self.dim)
        }
    }

    /// Recorded time levels, ascending.
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, path: usize, level: usize) -> Option<&[f64]> {
        let li = self.levels.binary_search(&level).ok()?;
        if path >= self.paths() {
            return None;
        }
        let base = (path * self.levels.len() + li) * self.dim;
        Some(&self.states[base..base + self.dim])
    }

    /// States of every path at `level`, path-major.
    pub fn level_states(&self, level: usize) -> Option<Vec<f64>> {
        self.levels.binary_search(&level).ok()?;
        let mut out = Vec::with_capacity(self.paths() * self.dim);
        for p in 0..self.paths() {
            out.extend_from_slice(self.state(p, level)?);
        }
        Some(out)
    }

    pub fn final_states(&self) -> Vec<f64> {
        self.level_states(self.n_steps).expect("final level is always recorded")
    }
}

fn check_options(problem: &Problem, interaction: Interaction<'_>, opts: &EnsembleOptions) -> Result<usize, SdeError> {
    interaction.check(problem)?;
    if opts.paths == 0 || opts.n_steps == 0 {
        return Err(SdeError::InvalidArgument(format!("need P >= 1 and N >= 1, got P = {}, N = {}", opts.paths, opts.n_steps)));
    }
    let base = opts.brownian_steps.unwrap_or(opts.n_steps);
    power_of_two_ratio(base, opts.n_steps)
        .ok_or_else(|| SdeError::InvalidArgument(format!("Brownian resolution {base} is not a power-of-two refinement of N = {}", opts.n_steps)))?;
    if let Interaction::Density(c) = interaction {
        let g = c.density().grid();
        if (g.horizon() - problem.horizon()).abs() > 1e-12 * problem.horizon() {
            return Err(SdeError::InvalidArgument(format!("density horizon {} differs from problem horizon {}", g.horizon(), problem.horizon())));
        }
        let nd = g.n_steps();
        if power_of_two_ratio(nd, opts.n_steps).is_none() && power_of_two_ratio(opts.n_steps, nd).is_none() {
            return Err(SdeError::InvalidArgument(format!("SDE steps {} and density steps {nd} differ by a non-power-of-two factor", opts.n_steps)));
        }
    }
    Ok(base)
}

/// `fine / coarse` if it is a power of two.
pub(crate) fn power_of_two_ratio(fine: usize, coarse: usize) -> Option<usize> {
    if coarse == 0 || fine % coarse != 0 {
        return None;
    }
    let r = fine / coarse;
    r.is_power_of_two().then_some(r)
}

/// Density level used by SDE step `n` of `n_sde`.
pub(crate) fn density_level(n: usize, n_sde: usize, n_density: usize) -> usize {
    let q = match (n as u64).checked_mul(n_density as u64) {
        Some(prod) => prod / n_sde as u64,
        None => (n as u128 * n_density as u128 / n_sde as u128) as u64,
    };
    (q as usize).min(n_density)
}

/// One path advanced simultaneously on several step counts that all divide
/// the Brownian resolution, each level summing the shared fine increments.
#[derive(Clone, Copy)]
struct LadderPath<'p> {
    problem: &'p Problem,
    interaction: Interaction<'p>,
    n_density: usize,
    base: usize,
    stream: u64,
    seed: u64,
}

impl LadderPath<'_> {
    /// Returns, per entry of `steps`, the recorded states (`levels × d`).
    fn run(&self, steps: &[usize], record_all: &[bool]) -> Result<Vec<Vec<f64>>, usize> {
        let problem = self.problem;
        let d = problem.dim();
        let m = problem.noise_dim();
        let horizon = problem.horizon();
        let mut x0 = vec![0.0; d];
        sample_initial(problem, self.seed, self.stream, &mut x0);

        let mut xs: Vec<Vec<f64>> = steps.iter().map(|_| x0.clone()).collect();
        let mut next = vec![0.0; d];
        let mut acc: Vec<Vec<f64>> = steps.iter().map(|_| vec![0.0; m]).collect();
        let mut counts = vec![0usize; steps.len()];
        let mut taken = vec![0usize; steps.len()];
        let ratios: Vec<usize> = steps.iter().map(|&n| self.base / n).collect();
        let mut out: Vec<Vec<f64>> = steps
            .iter()
            .zip(record_all)
            .map(|(&n, &all)| {
                let mut v = Vec::with_capacity(if all { (n + 1) * d } else { 2 * d });
                v.extend_from_slice(&x0);
                v
            })
            .collect();

        let mut scratch = StepScratch::new(d, m);
        let mut normals = NormalStream::new(self.seed, self.stream);
        let scale = (horizon / self.base as f64).sqrt();
        let mut dw = vec![0.0; m];
        for _ in 0..self.base {
            for w in dw.iter_mut() {
                *w = scale * normals.next();
            }
            for li in 0..steps.len() {
                for (a, w) in acc[li].iter_mut().zip(&dw) {
                    *a += w;
                }
                counts[li] += 1;
                if counts[li] < ratios[li] {
                    continue;
                }
                let n = taken[li];
                let n_sde = steps[li];
                let kappa = horizon / n_sde as f64;
                let t = n as f64 * kappa;
                let level = density_level(n, n_sde, self.n_density);
                em_step_level(problem, self.interaction, level, &xs[li], t, &acc[li], kappa, &mut scratch, &mut next);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(n);
                }
                std::mem::swap(&mut xs[li], &mut next);
                acc[li].fill(0.0);
                counts[li] = 0;
                taken[li] += 1;
                if record_all[li] || taken[li] == n_sde {
                    out[li].extend_from_slice(&xs[li]);
                }
            }
        }
        Ok(out)
    }
}

fn build_ensemble(
    problem: &Problem,
    interaction: Interaction<'_>,
    n_steps: usize,
    seed: u64,
    base: usize,
    recording: Recording,
    states: Vec<f64>,
) -> Ensemble {
    let levels = match recording {
        Recording::All => (0..=n_steps).collect(),
        Recording::Final => vec![0, n_steps],
    };
    Ensemble {
        description: problem.name().to_string(),
        dim: problem.dim(),
        horizon: problem.horizon(),
        n_steps,
        seed,
        brownian_steps: base,
        density: interaction.tag(),
        levels,
        states,
    }
}

/// Runs `P` independent paths; path `p` uses stream id `p`.
pub fn simulate_ensemble(problem: &Problem, interaction: Interaction<'_>, opts: &EnsembleOptions) -> Result<Ensemble, SdeError> {
    let mut out = simulate_ladder(problem, interaction, &[opts.n_steps], opts)?;
    Ok(out.pop().expect("one level requested"))
}

/// Runs the same `P` paths at each step count in `steps`, drawing the Brownian
/// increments once per path. Each returned ensemble is bit-identical to a
/// separate [`simulate_ensemble`] call with the same options.
pub fn simulate_ladder(problem: &Problem, interaction: Interaction<'_>, steps: &[usize], opts: &EnsembleOptions) -> Result<Vec<Ensemble>, SdeError> {
    if steps.is_empty() {
        return Err(SdeError::InvalidArgument("empty step ladder".into()));
    }
    let base = opts.brownian_steps.unwrap_or_else(|| *steps.iter().max().unwrap());
    for &n in steps {
        check_options(problem, interaction, &EnsembleOptions { n_steps: n, brownian_steps: Some(base), ..opts.clone() })?;
    }
    let n_density = match interaction {
        Interaction::Density(c) => c.density().grid().n_steps(),
        Interaction::None => 1,
    };
    let record_all = vec![opts.recording == Recording::All; steps.len()];
    let runner = LadderPath { problem, interaction, n_density, base, stream: 0, seed: opts.seed };
    let per_path: Vec<Result<Vec<Vec<f64>>, SdeError>> = (0..opts.paths)
        .into_par_iter()
        .map(|p| LadderPath { stream: p as u64, ..runner }.run(steps, &record_all).map_err(|step| SdeError::NonFinite { path: p, step }))
        .collect();
    let mut states: Vec<Vec<f64>> = steps.iter().map(|_| Vec::new()).collect();
    for r in per_path {
        for (dst, src) in states.iter_mut().zip(r?) {
            dst.extend(src);
        }
    }
    Ok(steps
        .iter()
        .zip(states)
        .map(|(&n, s)| build_ensemble(problem, interaction, n, opts.seed, base, opts.recording, s))
        .collect())
}

/// Root-mean-square distance between the final states of two coupled ensembles.
pub fn strong_error(coarse: &Ensemble, fine: &Ensemble) -> Result<f64, SdeError> {
    let mismatch = |what: &str| Err(SdeError::Provenance(what.to_string()));
    if coarse.seed != fine.seed {
        return mismatch("different seeds");
    }
    if coarse.brownian_steps != fine.brownian_steps {
        return mismatch("different Brownian resolutions");
    }
    if coarse.density != fine.density {
        return mismatch("different density fields");
    }
    if coarse.dim != fine.dim || coarse.horizon != fine.horizon || coarse.description != fine.description {
        return mismatch("different problems");
    }
    if coarse.paths() != fine.paths() {
        return mismatch("different path counts");
    }
    if power_of_two_ratio(fine.n_steps, coarse.n_steps).is_none() {
        return mismatch("fine time grid does not refine the coarse one by a power of two");
    }
    let a = coarse.final_states();
    let b = fine.final_states();
    let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / coarse.paths() as f64).sqrt())
}
