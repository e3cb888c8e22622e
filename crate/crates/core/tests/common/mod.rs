//! Oracles and property checks shared by the solver tests and the acceptance run.
#![allow(dead_code)]

use mfsde::density::{interaction_precompute, DensityCoupling, InteractionMode, PiecewiseDensity};
use mfsde::fpsolve::{self, discrete_l2_error, solve_fp, solve_fp_final, FpOptions};
use mfsde::sde::{simulate_ensemble, EnsembleOptions, Interaction, Recording};
use mfsde::stats::estimate_orders;
use mfsde::grid::{Grid, NodeIndex};
use mfsde::model::{builtin_example, KernelForm, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A problem touching every stencil term: x-dependent f, general K, full
/// state- and time-dependent diffusion with off-diagonal entries.
pub fn busy_problem_2d() -> Problem {
    Problem::builder(2, 2, 1.0)
        .drift(|t, x, o| {
            o[0] = 0.3 * x[1] - 0.2 * x[0] + t;
            o[1] = (x[0] * x[1]).sin();
        })
        .kernel(KernelForm::General, |t, x, y, o| {
            o[0] = 0.2 * (x[0] - y[0]).cos() * (1.0 + t);
            o[1] = 0.1 * x[1] * y[0] / (1.0 + y[1] * y[1]);
        })
        .diffusion(|t, x, o| {
            o[0] = 0.6 + 0.1 * x[0] * x[0];
            o[1] = 0.2 * (x[1] + t).sin();
            o[2] = 0.15 * x[0];
            o[3] = 0.5 + 0.05 * x[1] * x[1];
        })
        .gaussian_initial(vec![0.1, -0.2], vec![0.3, 0.4])
        .build()
        .unwrap()
}

pub fn busy_problem_1d() -> Problem {
    Problem::builder(1, 1, 1.0)
        .drift(|t, x, o| o[0] = 0.5 * x[0] - t)
        .kernel(KernelForm::General, |_, x, y, o| o[0] = (x[0] - 2.0 * y[0]).sin())
        .diffusion(|t, x, o| o[0] = 0.7 + 0.2 * (x[0] + t).cos())
        .gaussian_initial(vec![0.2], vec![0.5])
        .build()
        .unwrap()
}

pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f != 0.0 {
                for j in c..n {
                    a[r][j] -= f * a[c][j];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| a[r][j] * x[j]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// One step written straight from the stencil with multi-index arithmetic and
/// a dense matrix.
pub fn dense_oracle_step(grid: &Grid, problem: &Problem, p: &[f64], n: usize) -> Vec<f64> {
    let d = grid.dim();
    let m = grid.m() as i64;
    let h = grid.h();
    let kappa = grid.kappa();
    let (t, t1) = (n as f64 * kappa, (n + 1) as f64 * kappa);
    let nodes = grid.node_count();
    let idx: Vec<NodeIndex> = (0..nodes).map(|k| grid.node_index(k).unwrap()).collect();
    let pos = |k: &NodeIndex| -> Vec<f64> { k.0.iter().map(|&ki| ki as f64 * h).collect() };
    let flat = |k: &NodeIndex| grid.flat_index(k).unwrap();
    let shift = |k: &NodeIndex, i: usize, s: i64| {
        let mut v = k.0.clone();
        v[i] += s;
        NodeIndex(v)
    };
    let velocity = |k: &NodeIndex| -> Vec<f64> {
        let x = pos(k);
        let mut f = vec![0.0; d];
        problem.drift(t, &x, &mut f);
        let mut kv = vec![0.0; d];
        for s in &idx {
            problem.kernel(t, &x, &pos(s), &mut kv);
            for i in 0..d {
                f[i] += kv[i] * p[flat(s)] * h.powi(d as i32);
            }
        }
        f
    };
    let a_at = |k: &NodeIndex, i: usize, j: usize| -> f64 {
        let x = pos(k);
        let mdim = problem.noise_dim();
        let mut sigma = vec![0.0; d * mdim];
        problem.diffusion(t1, &x, &mut sigma);
        (0..mdim).map(|l| sigma[i * mdim + l] * sigma[j * mdim + l]).sum()
    };

    let mut mat = vec![vec![0.0; nodes]; nodes];
    let mut rhs = vec![0.0; nodes];
    for k in &idx {
        let r = flat(k);
        if k.0.iter().any(|&ki| ki.abs() == m) {
            mat[r][r] = 1.0;
            continue;
        }
        let mut adv = 0.0;
        for i in 0..d {
            let (kp, km) = (shift(k, i, 1), shift(k, i, -1));
            adv += (velocity(&kp)[i] * p[flat(&kp)] - velocity(&km)[i] * p[flat(&km)]) / (2.0 * h);
        }
        rhs[r] = p[r] - kappa * adv;
        mat[r][r] += 1.0;
        for i in 0..d {
            let (kp, km) = (shift(k, i, 1), shift(k, i, -1));
            let c = kappa / (2.0 * h * h);
            mat[r][flat(&kp)] -= c * a_at(&kp, i, i);
            mat[r][r] += 2.0 * c * a_at(k, i, i);
            mat[r][flat(&km)] -= c * a_at(&km, i, i);
            for j in 0..d {
                if j == i {
                    continue;
                }
                let c = kappa / (8.0 * h * h);
                for (si, sj, sign) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                    let q = shift(&shift(k, i, si), j, sj);
                    mat[r][flat(&q)] -= sign * c * a_at(&q, i, j);
                }
            }
        }
    }
    dense_solve(mat, rhs)
}

pub fn random_interior_level(grid: &Grid, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..grid.node_count())
        .map(|k| {
            let b = grid.node_index(k).unwrap().0.iter().any(|&ki| ki.unsigned_abs() as usize == grid.m());
            if b {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect()
}

const HEAT_C: f64 = 1.0;
const HEAT_S2: f64 = 0.5;
const HEAT_T: f64 = 0.5;

pub fn heat_problem() -> Problem {
    Problem::builder(1, 1, HEAT_T)
        .drift(|_, _, o| o[0] = 0.0)
        .zero_kernel()
        .constant_diffusion(vec![HEAT_C])
        .gaussian_initial(vec![0.0], vec![HEAT_S2])
        .build()
        .unwrap()
}

pub fn heat_error(m: usize, n_steps: usize) -> f64 {
    let problem = heat_problem();
    let grid = Grid::new(1, 8.0, m, HEAT_T, n_steps).unwrap();
    let (level, _) = solve_fp_final(&problem, &grid, &FpOptions::default()).unwrap();
    let var = HEAT_S2 + HEAT_C * HEAT_C * HEAT_T;
    let exact: Vec<f64> = (0..grid.node_count())
        .map(|k| {
            if grid.boundary_mask()[k] {
                return 0.0;
            }
            let x = grid.node_position(&grid.node_index(k).unwrap()).unwrap()[0];
            (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        })
        .collect();
    discrete_l2_error(&level, &exact, &grid).unwrap()
}

pub type Check = Result<String, String>;

pub fn dense_oracle() -> Check {
    let cases: Vec<(Problem, Grid)> = vec![
        (busy_problem_1d(), Grid::new(1, 2.0, 8, 1.0, 16).unwrap()),
        (busy_problem_1d(), Grid::new(1, 1.5, 3, 1.0, 4).unwrap()),
        (busy_problem_2d(), Grid::new(2, 1.5, 4, 1.0, 8).unwrap()),
        (busy_problem_2d(), Grid::new(2, 2.0, 8, 1.0, 32).unwrap()),
        (builtin_example(2).unwrap(), Grid::new(2, 1.0, 6, 1.0, 16).unwrap()),
        (builtin_example(3).unwrap(), Grid::new(2, 1.0, 5, 1.0, 8).unwrap()),
    ];
    let mut worst = 0.0f64;
    for (ci, (problem, grid)) in cases.iter().enumerate() {
        let p = random_interior_level(grid, 7 + ci as u64);
        for n in [0usize, 3] {
            let got = fpsolve::step(&p, grid, problem, n).map_err(|e| e.to_string())?;
            let want = dense_oracle_step(grid, problem, &p, n);
            let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if err > 1e-10 {
                return Err(format!("case {ci}, n {n}: max deviation {err:e}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("max deviation {worst:.1e}"))
}

fn linear_on(problem: &Problem, grid: &Grid, n: usize, seeds: (u64, u64)) -> Result<f64, String> {
    let p = random_interior_level(grid, seeds.0);
    let q = random_interior_level(grid, seeds.1);
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + b * y).collect();
    let step = |v: &[f64]| fpsolve::step(v, grid, problem, n).map_err(|e| e.to_string());
    let (sp, sq, sc) = (step(&p)?, step(&q)?, step(&combo)?);
    Ok((0..grid.node_count()).map(|k| (sc[k] - (a * sp[k] + b * sq[k])).abs()).fold(0.0, f64::max))
}

pub fn frozen_kernel_linearity() -> Check {
    let e1 = linear_on(&builtin_example(1).unwrap().without_interaction(), &Grid::new(1, 6.0, 64, 1.0, 128).unwrap(), 5, (1, 2))?;
    let e2 = linear_on(&busy_problem_2d().without_interaction(), &Grid::new(2, 2.0, 8, 1.0, 16).unwrap(), 2, (3, 4))?;
    let worst = e1.max(e2);
    if worst > 1e-12 {
        return Err(format!("superposition defect {worst:e}"));
    }
    Ok(format!("superposition defect {worst:.1e}"))
}

pub fn boundary_zero() -> Check {
    let grid = Grid::new(2, 1.0, 6, 1.0, 10).unwrap();
    let sol = solve_fp(&busy_problem_2d(), &grid, &FpOptions::default()).map_err(|e| e.to_string())?;
    let mask = grid.boundary_mask();
    for n in 0..=grid.n_steps() {
        for (k, &b) in mask.iter().enumerate() {
            if b && sol.field.level(n)[k].to_bits() != 0 {
                return Err(format!("level {n}, node {k}: {}", sol.field.level(n)[k]));
            }
        }
    }
    Ok("all boundary values are +0.0".into())
}

pub fn heat_ratios() -> Check {
    let spatial: Vec<f64> = [16usize, 32, 64].iter().map(|&m| heat_error(m, 1 << 14)).collect();
    let temporal: Vec<f64> = [8usize, 16, 32].iter().map(|&n| heat_error(1024, n)).collect();
    let rs: Vec<f64> = spatial.windows(2).map(|w| w[0] / w[1]).collect();
    let rt: Vec<f64> = temporal.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = rs.iter().all(|r| (3.2..=4.8).contains(r)) && rt.iter().all(|r| (1.6..=2.4).contains(r));
    let msg = format!("h-ratios {rs:.3?}, kappa-ratios {rt:.3?}");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn example_one_mass() -> Check {
    let grid = Grid::new(1, 6.0, 512, 1.0, 1 << 9).unwrap();
    let sol = solve_fp(&builtin_example(1).unwrap(), &grid, &FpOptions { diagnostics: true, ..FpOptions::default() }).map_err(|e| e.to_string())?;
    let drift = sol.diagnostics.iter().map(|d| (d.mass - 1.0).abs()).fold(0.0, f64::max);
    if sol.diagnostics.len() != grid.n_steps() + 1 || drift > 0.02 {
        return Err(format!("max mass drift {drift}"));
    }
    Ok(format!("max mass drift {drift:.2e}"))
}

pub fn ensemble_determinism() -> Check {
    let p = builtin_example(1).unwrap();
    let g = Grid::new(1, 6.0, 64, 1.0, 32).unwrap();
    let pd = PiecewiseDensity::new(solve_fp(&p, &g, &FpOptions::default()).map_err(|e| e.to_string())?.field);
    let field = interaction_precompute(&pd, &p).map_err(|e| e.to_string())?;
    let c = DensityCoupling::new(&p, &pd, &field, InteractionMode::Interpolate).map_err(|e| e.to_string())?;
    let opts = EnsembleOptions::new(500, 32, 3).recording(Recording::All);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| simulate_ensemble(&p, Interaction::Density(&c), &opts).unwrap())
    };
    let base = run(1);
    for threads in [2, 4, 7] {
        if run(threads).states() != base.states() {
            return Err(format!("{threads} workers differ from 1"));
        }
    }
    Ok("bit-identical for 1, 2, 4, 7 workers".into())
}

pub fn odd_kernel_even_density() -> Check {
    let ex1 = builtin_example(1).unwrap().with_general_kernel();
    let g = Grid::new(1, 6.0, 64, 1.0, 4).unwrap();
    let p0 = fpsolve::initial_level(&g, &ex1);
    let worst = fpsolve::kernel_sum(&p0, &g, &ex1, 0.0).map_err(|e| e.to_string())?.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if worst != 0.0 {
        return Err(format!("largest |S| = {worst:e}"));
    }
    Ok("S = 0 exactly".into())
}

pub fn order_scale_invariance() -> Check {
    let errors = [3.1e-4, 6.7e-4, 1.45e-3, 2.9e-3];
    let res = [0.125, 0.25, 0.5, 1.0];
    let base = estimate_orders(&errors, &res).map_err(|e| e.to_string())?;
    for s in [1e-6, 0.37, 1e5] {
        let scaled: Vec<f64> = errors.iter().map(|e| e * s).collect();
        let o = estimate_orders(&scaled, &res).map_err(|e| e.to_string())?;
        if o.iter().zip(&base).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(format!("scale {s}: {o:?} vs {base:?}"));
        }
    }
    Ok("orders unchanged under error scaling".into())
}
