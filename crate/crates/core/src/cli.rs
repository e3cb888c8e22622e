//! Experiment runner behind the `mfsde` binary: configuration layering
//! (preset, then JSON file, then flags), study dispatch and output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::density::{interaction_precompute, DensityCoupling, InteractionMode, PiecewiseDensity};
use crate::fpsolve::{solve_fp, FpOptions};
use crate::grid::Grid;
use crate::io;
use crate::model::{builtin_example, Problem};
use crate::particle::ParticleConfig;
use crate::sde::{power_of_two_ratio, simulate_ensemble, EnsembleOptions, Interaction, Recording};
use crate::stats::{compare_methods, CompareConfig, ConvergenceReport};
use crate::study::{em_convergence, fp_spatial, fp_temporal, EmStudy, Reference};

pub const DEFAULT_SEED: u64 = 20240917;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{field}`: {msg}"))
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| io::IoError::Io { path: path.display().to_string(), source }.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    FpTemporal,
    FpSpatial,
    EmConverge,
    Moments,
    SolveFp,
    Simulate,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::FpTemporal => "fp_temporal",
            Study::FpSpatial => "fp_spatial",
            Study::EmConverge => "em_converge",
            Study::Moments => "moments",
            Study::SolveFp => "solve_fp",
            Study::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Quick,
}

/// Everything a run needs. Grid fields: `alpha`, `m`, `n_steps` describe the
/// working density (solve-fp, simulate, moments, and the density behind
/// em-converge); `reference_m`, `reference_steps` the FP reference of the
/// refinement studies. `ladder` holds step counts, or `M` values for fp-spatial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub study: Study,
    pub example: u32,
    pub preset: Preset,
    pub density_dump: Option<PathBuf>,
    pub alpha: f64,
    pub m: usize,
    pub n_steps: usize,
    pub reference_alpha: f64,
    pub reference_m: usize,
    pub reference_steps: usize,
    pub ladder: Vec<usize>,
    pub sde_steps: usize,
    pub paths: usize,
    pub particles: usize,
    pub trials: usize,
    pub seed: u64,
    pub mode: InteractionMode,
    pub out: PathBuf,
    pub diagnostics: bool,
    pub parallel: bool,
}

impl RunConfig {
    /// Resolutions for `example` and `study` under `preset`.
    pub fn preset(example: u32, study: Study, preset: Preset) -> Result<RunConfig, CliError> {
        let paper = preset == Preset::Paper;
        let trials = if paper { 10_000 } else { 100 };
        let mut c = RunConfig {
            study,
            example,
            preset,
            density_dump: None,
            alpha: 6.0,
            m: 512,
            n_steps: 512,
            reference_alpha: 6.0,
            reference_m: 512,
            reference_steps: 1 << 14,
            ladder: Vec::new(),
            sde_steps: 512,
            paths: 10_000,
            particles: 1000,
            trials,
            seed: DEFAULT_SEED,
            mode: InteractionMode::Interpolate,
            out: PathBuf::from("mfsde-out"),
            diagnostics: false,
            parallel: false,
        };
        match example {
            1 => {
                if !paper {
                    c.reference_m = 128;
                    c.reference_steps = 1 << 10;
                }
                match study {
                    Study::FpTemporal => c.ladder = if paper { vec![1 << 9, 1 << 10, 1 << 11, 1 << 12] } else { vec![32, 64, 128, 256] },
                    Study::FpSpatial => c.ladder = if paper { vec![16, 32, 64, 128] } else { vec![8, 16, 32] },
                    Study::EmConverge => {
                        c.m = c.reference_m;
                        c.n_steps = c.reference_steps;
                        c.sde_steps = 1 << 14;
                        c.ladder = vec![1 << 9, 1 << 10, 1 << 11, 1 << 12];
                        c.paths = if paper { 100_000 } else { 10_000 };
                    }
                    Study::Moments => {
                        c.n_steps = 1 << 10;
                        c.sde_steps = 1 << 10;
                    }
                    Study::Simulate => {
                        c.paths = 1000;
                    }
                    Study::SolveFp => {}
                }
            }
            2 | 3 => {
                c.alpha = 4.0;
                c.m = 32;
                c.n_steps = 256;
                c.sde_steps = 256;
                c.reference_alpha = 1.0;
                let (temporal_m, temporal_ref, temporal_ladder, spatial_m, spatial_steps, spatial_ladder, em_ref, em_ladder) = if example == 2 {
                    (32, 1 << 12, vec![1 << 7, 1 << 8, 1 << 9, 1 << 10], 32, 32, vec![4, 8, 16], 1 << 12, vec![1 << 7, 1 << 8, 1 << 9, 1 << 10])
                } else {
                    (24, 1 << 8, vec![8, 16, 32, 64], 96, 256, vec![6, 12, 24], 1 << 8, vec![8, 16, 32, 64])
                };
                match study {
                    Study::FpTemporal => {
                        c.reference_m = temporal_m;
                        c.reference_steps = temporal_ref;
                        c.ladder = temporal_ladder;
                    }
                    Study::FpSpatial => {
                        c.reference_m = spatial_m;
                        c.reference_steps = spatial_steps;
                        c.ladder = spatial_ladder;
                    }
                    Study::EmConverge => {
                        c.sde_steps = em_ref;
                        c.ladder = em_ladder;
                    }
                    Study::Simulate => c.paths = 1000,
                    Study::Moments | Study::SolveFp => {}
                }
            }
            other => return Err(config_err("example", format!("unknown example {other}; expected 1, 2 or 3"))),
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        builtin_example(self.example).map_err(|e| config_err("example", e))?;
        let positive = |name: &str, v: usize| if v == 0 { Err(config_err(name, "must be positive")) } else { Ok(()) };
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config_err("alpha", "must be positive"));
        }
        if !(self.reference_alpha > 0.0 && self.reference_alpha.is_finite()) {
            return Err(config_err("reference_alpha", "must be positive"));
        }
        if self.m < 2 {
            return Err(config_err("m", "must be at least 2"));
        }
        positive("n_steps", self.n_steps)?;
        positive("sde_steps", self.sde_steps)?;
        match self.study {
            Study::FpTemporal => {
                need_ladder(&self.ladder)?;
                for &n in &self.ladder {
                    if n == 0 || n >= self.reference_steps || power_of_two_ratio(self.reference_steps, n).is_none() {
                        return Err(config_err("ladder", format!("{n} is not a power-of-two coarsening of reference_steps = {}", self.reference_steps)));
                    }
                }
            }
            Study::FpSpatial => {
                need_ladder(&self.ladder)?;
                positive("reference_steps", self.reference_steps)?;
                for &m in &self.ladder {
                    if m < 2 || m >= self.reference_m || power_of_two_ratio(self.reference_m, m).is_none() {
                        return Err(config_err("ladder", format!("{m} is not a power-of-two coarsening of reference_m = {}", self.reference_m)));
                    }
                }
            }
            Study::EmConverge => {
                need_ladder(&self.ladder)?;
                positive("paths", self.paths)?;
                for &n in &self.ladder {
                    if n == 0 || n >= self.sde_steps || power_of_two_ratio(self.sde_steps, n).is_none() {
                        return Err(config_err("ladder", format!("{n} is not a power-of-two coarsening of sde_steps = {}", self.sde_steps)));
                    }
                }
                self.check_density_ratio(&self.ladder)?;
            }
            Study::Moments => {
                if self.paths < 2 {
                    return Err(config_err("paths", "need at least 2 paths"));
                }
                if self.particles > 0 {
                    positive("trials", self.trials)?;
                }
                self.check_density_ratio(&[])?;
            }
            Study::Simulate => {
                positive("paths", self.paths)?;
                if self.density_dump.is_none() {
                    self.check_density_ratio(&[])?;
                }
            }
            Study::SolveFp => {}
        }
        Ok(())
    }

    fn check_density_ratio(&self, extra: &[usize]) -> Result<(), CliError> {
        for &n in std::iter::once(&self.sde_steps).chain(extra) {
            if power_of_two_ratio(n, self.n_steps).is_none() && power_of_two_ratio(self.n_steps, n).is_none() {
                return Err(config_err("sde_steps", format!("{n} SDE steps and n_steps = {} differ by a non-power-of-two factor", self.n_steps)));
            }
        }
        Ok(())
    }
}

fn need_ladder(l: &[usize]) -> Result<(), CliError> {
    if l.len() < 2 {
        return Err(config_err("ladder", "needs at least two entries"));
    }
    Ok(())
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub study: Option<Study>,
    #[arg(long)]
    pub example: Option<u32>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub density_dump: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub reference_alpha: Option<f64>,
    #[arg(long)]
    pub reference_m: Option<usize>,
    #[arg(long)]
    pub reference_steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<usize>>,
    #[arg(long)]
    pub sde_steps: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<InteractionMode>,
    #[arg(long)]
    pub diagnostics: bool,
    #[arg(long)]
    pub parallel: bool,
}

fn parse_mode(s: &str) -> Result<InteractionMode, String> {
    match s {
        "exact" => Ok(InteractionMode::Exact),
        "interpolate" => Ok(InteractionMode::Interpolate),
        _ => Err(format!("expected `exact` or `interpolate`, got `{s}`")),
    }
}

impl Overrides {
    fn apply(&self, obj: &mut Map<String, Value>) {
        let mut set = |k: &str, v: Value| {
            obj.insert(k.to_string(), v);
        };
        if let Some(v) = self.study {
            set("study", serde_json::to_value(v).unwrap());
        }
        if let Some(v) = self.example {
            set("example", v.into());
        }
        if let Some(v) = self.preset {
            set("preset", serde_json::to_value(v).unwrap());
        }
        if let Some(v) = self.seed {
            set("seed", v.into());
        }
        if let Some(v) = &self.out {
            set("out", serde_json::to_value(v).unwrap());
        }
        if let Some(v) = &self.density_dump {
            set("density_dump", serde_json::to_value(v).unwrap());
        }
        if let Some(v) = self.alpha {
            set("alpha", v.into());
        }
        if let Some(v) = self.m {
            set("m", v.into());
        }
        if let Some(v) = self.n_steps {
            set("n_steps", v.into());
        }
        if let Some(v) = self.reference_alpha {
            set("reference_alpha", v.into());
        }
        if let Some(v) = self.reference_m {
            set("reference_m", v.into());
        }
        if let Some(v) = self.reference_steps {
            set("reference_steps", v.into());
        }
        if let Some(v) = &self.ladder {
            set("ladder", serde_json::to_value(v).unwrap());
        }
        if let Some(v) = self.sde_steps {
            set("sde_steps", v.into());
        }
        if let Some(v) = self.paths {
            set("paths", v.into());
        }
        if let Some(v) = self.particles {
            set("particles", v.into());
        }
        if let Some(v) = self.trials {
            set("trials", v.into());
        }
        if let Some(v) = self.mode {
            set("mode", serde_json::to_value(v).unwrap());
        }
        if self.diagnostics {
            set("diagnostics", true.into());
        }
        if self.parallel {
            set("parallel", true.into());
        }
    }
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| io::IoError::Io { path: path.display().to_string(), source })?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut obj = match v {
        Value::Object(o) => o,
        _ => return Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
    };
    // A manifest carries the resolved config under "config".
    if obj.contains_key("manifest_version") {
        obj = match obj.remove("config") {
            Some(Value::Object(o)) => o,
            _ => return Err(config_err("config", "manifest has no config object")),
        };
    }
    Ok(obj)
}

/// Layers preset, config file and flags into a validated config.
pub fn resolve(config_file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let file = match config_file {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    let mut top = file.clone();
    overrides.apply(&mut top);
    let study: Study = match top.get("study") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_err("study", e))?,
        None => return Err(config_err("study", "missing; pass --study or set it in the config file")),
    };
    let example: u32 = match top.get("example") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_err("example", e))?,
        None => 1,
    };
    let preset: Preset = match top.get("preset") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_err("preset", e))?,
        None => Preset::Paper,
    };
    let base = RunConfig::preset(example, study, preset)?;
    let mut merged = match serde_json::to_value(&base).unwrap() {
        Value::Object(o) => o,
        _ => unreachable!(),
    };
    for (k, v) in file {
        if !merged.contains_key(&k) {
            return Err(config_err(&k, "unknown field"));
        }
        merged.insert(k, v);
    }
    overrides.apply(&mut merged);
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Files written by a run and, for refinement studies, the report.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub outputs: Vec<PathBuf>,
    pub report: Option<ConvergenceReport>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest_version: u32,
    tool: &'static str,
    version: &'static str,
    study: Study,
    example: u32,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
    wall_time_seconds: f64,
}

pub fn run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(&cfg.out).map_err(|source| io::IoError::Io { path: cfg.out.display().to_string(), source })?;
    let problem = builtin_example(cfg.example).map_err(|e| config_err("example", e))?;
    let mut summary = RunSummary { outputs: Vec::new(), report: None };
    match cfg.study {
        Study::FpTemporal | Study::FpSpatial => {
            let reference = cached_reference(cfg, &problem)?;
            let options = FpOptions::default();
            let report = if cfg.study == Study::FpTemporal {
                fp_temporal(&problem, &reference, &cfg.ladder, &options, cfg.parallel)
            } else {
                fp_spatial(&problem, &reference, &cfg.ladder, &options, cfg.parallel)
            }
            .map_err(numerical)?;
            write_report(cfg, &report, &mut summary)?;
        }
        Study::EmConverge => {
            let grid = working_grid(cfg, &problem)?;
            let study = EmStudy {
                density_grid: grid,
                reference_steps: cfg.sde_steps,
                ladder: cfg.ladder.clone(),
                paths: cfg.paths,
                seed: cfg.seed,
                mode: cfg.mode,
            };
            let report = em_convergence(&problem, &study).map_err(numerical)?;
            write_report(cfg, &report, &mut summary)?;
        }
        Study::Moments => {
            let particle = (cfg.particles > 0).then(|| ParticleConfig::new(cfg.particles, cfg.trials, cfg.sde_steps, cfg.seed));
            let table = compare_methods(
                &problem,
                &CompareConfig { grid: working_grid(cfg, &problem)?, paths: cfg.paths, sde_steps: cfg.sde_steps, mode: cfg.mode, particle, seed: cfg.seed },
            )
            .map_err(numerical)?;
            let p = cfg.out.join("moments.csv");
            write_file(&p, table.to_csv())?;
            summary.outputs.push(p);
        }
        Study::SolveFp => {
            let grid = working_grid(cfg, &problem)?;
            let sol = solve_fp(&problem, &grid, &FpOptions { diagnostics: true, ..FpOptions::default() }).map_err(numerical)?;
            for name in ["density.bin", "density.csv"] {
                let p = cfg.out.join(name);
                io::write_density(&p, &sol.field)?;
                summary.outputs.push(p);
            }
            let mut csv = String::from("n,t,mass,min,max,residual\n");
            for d in &sol.diagnostics {
                let _ = writeln!(csv, "{},{:?},{:?},{:?},{:?},{:?}", d.n, grid.time(d.n), d.mass, d.min_value, d.max_value, d.solver_residual);
            }
            let p = cfg.out.join("diagnostics.csv");
            write_file(&p, csv)?;
            summary.outputs.push(p);
        }
        Study::Simulate => {
            let field = match &cfg.density_dump {
                Some(path) => io::read_density(path)?,
                None => solve_fp(&problem, &working_grid(cfg, &problem)?, &FpOptions::default()).map_err(numerical)?.field,
            };
            let pd = PiecewiseDensity::new(field);
            let g = interaction_precompute(&pd, &problem).map_err(numerical)?;
            let coupling = DensityCoupling::new(&problem, &pd, &g, cfg.mode).map_err(numerical)?;
            let opts = EnsembleOptions::new(cfg.paths, cfg.sde_steps, cfg.seed).recording(Recording::All);
            let ens = simulate_ensemble(&problem, Interaction::Density(&coupling), &opts).map_err(numerical)?;
            for name in ["ensemble.bin", "ensemble.csv"] {
                let p = cfg.out.join(name);
                io::write_ensemble(&p, &ens)?;
                summary.outputs.push(p);
            }
        }
    }
    let manifest = Manifest {
        manifest_version: 1,
        tool: "mfsde",
        version: env!("CARGO_PKG_VERSION"),
        study: cfg.study,
        example: cfg.example,
        seed: cfg.seed,
        config: cfg,
        outputs: summary.outputs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    let p = cfg.out.join("manifest.json");
    write_file(&p, serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
    summary.outputs.push(p);
    Ok(summary)
}

fn working_grid(cfg: &RunConfig, problem: &Problem) -> Result<Grid, CliError> {
    Grid::new(problem.dim(), cfg.alpha, cfg.m, problem.horizon(), cfg.n_steps).map_err(|e| config_err("m", e))
}

fn write_report(cfg: &RunConfig, report: &ConvergenceReport, summary: &mut RunSummary) -> Result<(), CliError> {
    let name = cfg.study.name();
    let p = cfg.out.join(format!("{name}.csv"));
    write_file(&p, report.to_csv())?;
    summary.outputs.push(p);
    let p = cfg.out.join(format!("loglog_{name}.csv"));
    write_file(&p, report.loglog_csv())?;
    summary.outputs.push(p);
    summary.report = Some(report.clone());
    Ok(())
}

/// File name of the cached reference for this config.
pub fn reference_cache_name(cfg: &RunConfig) -> String {
    format!("reference_ex{}_N{}_M{}_alpha{}.bin", cfg.example, cfg.reference_steps, cfg.reference_m, cfg.reference_alpha)
}

fn cached_reference(cfg: &RunConfig, problem: &Problem) -> Result<Reference, CliError> {
    let grid = Grid::new(problem.dim(), cfg.reference_alpha, cfg.reference_m, problem.horizon(), cfg.reference_steps)
        .map_err(|e| config_err("reference_m", e))?;
    let path = cfg.out.join(reference_cache_name(cfg));
    if path.exists() {
        match io::read_level(&path) {
            Ok((g, level)) if g == grid => return Ok(Reference { grid, level }),
            Ok(_) => log::warn!("{} does not match the requested reference; recomputing", path.display()),
            Err(e) => log::warn!("ignoring unreadable reference cache: {e}"),
        }
    }
    let reference = Reference::compute(problem, &grid, &FpOptions::default()).map_err(numerical)?;
    io::write_level(&path, &reference.grid, &reference.level)?;
    Ok(reference)
}
