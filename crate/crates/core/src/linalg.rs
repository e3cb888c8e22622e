//! Sparse assembly and the linear solves behind the implicit diffusion step.
//!
//! Matrices are assembled from triplets into CSR. Solves go through a banded
//! LU with partial pivoting when the band fits in memory, and otherwise
//! through BiCGSTAB preconditioned with the matrix diagonal.

use thiserror::Error;

/// Relative pivot size below which the banded LU reports singularity.
pub const PIVOT_THRESHOLD: f64 = 1e-14;
/// Relative residual at which the iterative solver stops.
pub const ITERATIVE_TOLERANCE: f64 = 1e-12;
/// Largest banded factorization (in stored `f64`s) before switching to the iterative path.
pub const BANDED_STORAGE_LIMIT: usize = 1 << 26;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular at pivot row {row} (|pivot| = {pivot:e})")]
    Singular { row: usize, pivot: f64 },
    #[error("iterative solve did not converge after {iterations} iterations (last residual {:e})", residuals.last().copied().unwrap_or(f64::NAN))]
    NotConverged { iterations: usize, residuals: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows} x {cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("entry ({row}, {col}) outside a {rows} x {cols} matrix")]
    OutOfBounds { row: usize, col: usize, rows: usize, cols: usize },
}

/// Triplet accumulator; duplicates are summed by [`TripletBuilder::finalize`].
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(rows: usize, cols: usize) -> Self {
        TripletBuilder { rows, cols, entries: Vec::new() }
    }

    pub fn with_capacity(rows: usize, cols: usize, cap: usize) -> Self {
        TripletBuilder { rows, cols, entries: Vec::with_capacity(cap) }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        self.entries.push((row, col, value));
    }

    pub fn finalize(mut self) -> Result<SparseMatrix, LinalgError> {
        for &(r, c, _) in &self.entries {
            if r >= self.rows || c >= self.cols {
                return Err(LinalgError::OutOfBounds { row: r, col: c, rows: self.rows, cols: self.cols });
            }
        }
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; self.rows + 1];
        let mut cols = Vec::with_capacity(self.entries.len());
        let mut vals = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseMatrix { rows: self.rows, cols: self.cols, row_ptr, col_idx: cols, values: vals })
    }
}

/// Compressed sparse row matrix with sorted, unique columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(rows: usize, cols: usize, dense: &[f64]) -> Result<Self, LinalgError> {
        if dense.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch { expected: rows * cols, got: dense.len() });
        }
        let mut b = TripletBuilder::new(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = dense[r * cols + c];
                if v != 0.0 {
                    b.push(r, c, v);
                }
            }
        }
        b.finalize()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: x.len() });
        }
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yr = s;
        }
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for r in 0..self.rows {
            for (c, _) in self.row(r) {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|r| self.get(r, r)).collect()
    }

    fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Which factorization to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Banded LU unless the band exceeds [`BANDED_STORAGE_LIMIT`].
    #[default]
    Auto,
    Banded,
    Iterative,
}

/// A matrix prepared for repeated solves.
#[derive(Debug, Clone)]
pub enum FactorizedSystem {
    Banded(BandedLu),
    Iterative(PreconditionedSystem),
}

pub fn factorize(a: &SparseMatrix) -> Result<FactorizedSystem, LinalgError> {
    factorize_with(a, SolverKind::Auto)
}

pub fn factorize_with(a: &SparseMatrix, kind: SolverKind) -> Result<FactorizedSystem, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let kind = match kind {
        SolverKind::Auto => {
            let (kl, ku) = a.bandwidths();
            if a.rows.saturating_mul(2 * kl + ku + 1) <= BANDED_STORAGE_LIMIT {
                SolverKind::Banded
            } else {
                SolverKind::Iterative
            }
        }
        k => k,
    };
    match kind {
        SolverKind::Iterative => Ok(FactorizedSystem::Iterative(PreconditionedSystem::new(a.clone())?)),
        _ => Ok(FactorizedSystem::Banded(BandedLu::factorize(a)?)),
    }
}

impl FactorizedSystem {
    pub fn dim(&self) -> usize {
        match self {
            FactorizedSystem::Banded(lu) => lu.n,
            FactorizedSystem::Iterative(it) => it.matrix.rows,
        }
    }

    /// Solves `A x = b`, returning `x` and the achieved relative residual.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        self.solve_with_residual(b).map(|(x, _)| x)
    }

    pub fn solve_with_residual(&self, b: &[f64]) -> Result<(Vec<f64>, f64), LinalgError> {
        if b.len() != self.dim() {
            return Err(LinalgError::DimensionMismatch { expected: self.dim(), got: b.len() });
        }
        match self {
            FactorizedSystem::Banded(lu) => {
                let mut x = b.to_vec();
                lu.solve_in_place(&mut x);
                Ok((x, f64::NAN))
            }
            FactorizedSystem::Iterative(it) => it.solve(b),
        }
    }
}

pub fn solve(f: &FactorizedSystem, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    f.solve(b)
}

/// Banded LU with row partial pivoting.
///
/// Storage is column-major with the row offset relative to the column, so
/// entry `(i, j)` lives at `ab[j * ldab + kv + i - j]` with `kv = kl + ku`.
/// The extra `kl` superdiagonals absorb pivoting fill-in.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn factorize(a: &SparseMatrix) -> Result<Self, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
        }
        let n = a.rows;
        let (kl, ku) = a.bandwidths();
        let kv = kl + ku;
        let ldab = 2 * kl + ku + 1;
        let mut ab = vec![0.0; n * ldab];
        for r in 0..n {
            for (c, v) in a.row(r) {
                ab[c * ldab + kv + r - c] = v;
            }
        }
        let threshold = PIVOT_THRESHOLD * a.max_abs();
        let mut pivots = vec![0usize; n];
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ldab + kv;
            let mut p = 0;
            let mut best = ab[col].abs();
            for r in 1..=km {
                let v = ab[col + r].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            pivots[j] = j + p;
            if !(best > threshold) {
                return Err(LinalgError::Singular { row: j, pivot: ab[col + p] });
            }
            let ju = (j + kv).min(n - 1);
            if p != 0 {
                for c in j..=ju {
                    let base = c * ldab;
                    ab.swap(base + kv + j - c, base + kv + j + p - c);
                }
            }
            let inv = 1.0 / ab[col];
            for r in 1..=km {
                ab[col + r] *= inv;
            }
            for c in j + 1..=ju {
                let base = c * ldab;
                let u = ab[base + kv + j - c];
                if u != 0.0 {
                    let (left, right) = ab.split_at_mut(base);
                    let lcol = &left[col + 1..col + 1 + km];
                    let start = kv + j + 1 - c;
                    let target = &mut right[start..start + km];
                    for (t, l) in target.iter_mut().zip(lcol) {
                        *t -= l * u;
                    }
                }
            }
        }
        Ok(BandedLu { n, kl, ku, ldab, ab, pivots })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, kl, ldab) = (self.n, self.kl, self.ldab);
        let kv = self.kl + self.ku;
        for j in 0..n {
            let p = self.pivots[j];
            if p != j {
                b.swap(j, p);
            }
            let km = kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                let col = j * ldab + kv;
                for r in 1..=km {
                    b[j + r] -= self.ab[col + r] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            let col = j * ldab + kv;
            b[j] /= self.ab[col];
            let bj = b[j];
            if bj != 0.0 {
                let top = j.saturating_sub(kv);
                for i in top..j {
                    b[i] -= self.ab[col + i - j] * bj;
                }
            }
        }
    }
}

/// BiCGSTAB with a Jacobi preconditioner.
#[derive(Debug, Clone)]
pub struct PreconditionedSystem {
    matrix: SparseMatrix,
    inv_diag: Vec<f64>,
    tolerance: f64,
    max_iterations: usize,
}

impl PreconditionedSystem {
    pub fn new(matrix: SparseMatrix) -> Result<Self, LinalgError> {
        let inv_diag = matrix
            .diagonal()
            .iter()
            .enumerate()
            .map(|(r, &d)| if d != 0.0 { Ok(1.0 / d) } else { Err(LinalgError::Singular { row: r, pivot: 0.0 }) })
            .collect::<Result<Vec<_>, _>>()?;
        let max_iterations = 10 * matrix.rows.max(1);
        Ok(PreconditionedSystem { matrix, inv_diag, tolerance: ITERATIVE_TOLERANCE, max_iterations })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, f64), LinalgError> {
        let n = b.len();
        let a = &self.matrix;
        let b_norm = norm(b);
        let mut x: Vec<f64> = b.iter().zip(&self.inv_diag).map(|(bi, di)| bi * di).collect();
        if b_norm == 0.0 {
            return Ok((vec![0.0; n], 0.0));
        }
        let mut r = vec![0.0; n];
        a.matvec_into(&x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let r_hat = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut s = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut t = vec![0.0; n];
        let mut history = Vec::new();
        let mut rel = norm(&r) / b_norm;
        history.push(rel);
        if rel <= self.tolerance {
            return Ok((x, rel));
        }
        for _ in 0..self.max_iterations {
            let rho_new = dot(&r_hat, &r);
            if rho_new == 0.0 || !rho_new.is_finite() {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
                y[i] = p[i] * self.inv_diag[i];
            }
            a.matvec_into(&y, &mut v);
            alpha = rho / dot(&r_hat, &v);
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            if norm(&s) / b_norm <= self.tolerance {
                for i in 0..n {
                    x[i] += alpha * y[i];
                }
                rel = self.true_residual(&x, b, b_norm);
                history.push(rel);
                if rel <= self.tolerance {
                    return Ok((x, rel));
                }
                a.matvec_into(&x, &mut r);
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri = bi - *ri;
                }
                continue;
            }
            for i in 0..n {
                z[i] = s[i] * self.inv_diag[i];
            }
            a.matvec_into(&z, &mut t);
            let tt = dot(&t, &t);
            omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
            for i in 0..n {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            rel = norm(&r) / b_norm;
            history.push(rel);
            if rel <= self.tolerance {
                let true_rel = self.true_residual(&x, b, b_norm);
                if true_rel <= self.tolerance {
                    return Ok((x, true_rel));
                }
                a.matvec_into(&x, &mut r);
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri = bi - *ri;
                }
            }
            if omega == 0.0 {
                break;
            }
        }
        Err(LinalgError::NotConverged { iterations: history.len() - 1, residuals: history })
    }

    fn true_residual(&self, x: &[f64], b: &[f64], b_norm: f64) -> f64 {
        let ax = {
            let mut v = vec![0.0; b.len()];
            self.matrix.matvec_into(x, &mut v);
            v
        };
        ax.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / b_norm
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `|A x - b| / (|b| + tiny)`.
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x).expect("dimension checked by caller");
    let r = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    r / (norm(b) + f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense Gaussian elimination with partial pivoting, the oracle for the sparse paths.
    fn dense_solve(n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut m = a.to_vec();
        let mut x = b.to_vec();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs())).unwrap();
            for k in 0..n {
                m.swap(c * n + k, p * n + k);
            }
            x.swap(c, p);
            for r in c + 1..n {
                let f = m[r * n + c] / m[c * n + c];
                for k in c..n {
                    m[r * n + k] -= f * m[c * n + k];
                }
                x[r] -= f * x[c];
            }
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for k in r + 1..n {
                s -= m[r * n + k] * x[k];
            }
            x[r] = s / m[r * n + r];
        }
        x
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        num / norm(b).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let mut b = TripletBuilder::new(2, 3);
        b.push(1, 2, 1.0);
        b.push(0, 1, 2.0);
        b.push(1, 0, 3.0);
        b.push(0, 1, 0.5);
        let m = b.finalize().unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 1), 2.5);
        let cols: Vec<usize> = m.row(1).map(|(c, _)| c).collect();
        assert_eq!(cols, vec![0, 2]);
        let mut bad = TripletBuilder::new(2, 2);
        bad.push(2, 0, 1.0);
        assert!(matches!(bad.finalize(), Err(LinalgError::OutOfBounds { .. })));
    }

    #[test]
    fn identity_and_diagonal_solves() {
        let f = factorize(&SparseMatrix::identity(5)).unwrap();
        assert_eq!(f.solve(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let d = SparseMatrix::from_dense(2, 2, &[4.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(factorize(&d).unwrap().solve(&[8.0, -8.0]).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn two_by_two_hand_solve() {
        let a = SparseMatrix::from_dense(2, 2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        for kind in [SolverKind::Banded, SolverKind::Iterative] {
            let x = factorize_with(&a, kind).unwrap().solve(&[3.0, 3.0]).unwrap();
            assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12, "{kind:?}: {x:?}");
        }
    }

    #[test]
    fn random_tridiagonal_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let n = 50;
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            let off: f64 = if i > 0 { rng.random_range(-1.0..1.0) } else { 0.0 };
            let off2: f64 = if i + 1 < n { rng.random_range(-1.0..1.0) } else { 0.0 };
            if i > 0 {
                dense[i * n + i - 1] = off;
            }
            if i + 1 < n {
                dense[i * n + i + 1] = off2;
            }
            dense[i * n + i] = off.abs() + off2.abs() + rng.random_range(0.5..2.0);
        }
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let oracle = dense_solve(n, &dense, &b);
        let a = SparseMatrix::from_dense(n, n, &dense).unwrap();
        let x = factorize(&a).unwrap().solve(&b).unwrap();
        assert!(rel_err(&x, &oracle) <= 1e-10);
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let a = SparseMatrix::from_dense(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 2.0]).unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = factorize(&a).unwrap().solve(&b).unwrap();
        assert!(relative_residual(&a, &x, &b) < 1e-14);
    }

    #[test]
    fn singular_matrix_reports_pivot_row() {
        let a = SparseMatrix::from_dense(3, 3, &[1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        match factorize(&a) {
            Err(LinalgError::Singular { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn iterative_non_convergence_carries_history() {
        let a = SparseMatrix::from_dense(2, 2, &[1.0, 1e6, -1e6, 1.0]).unwrap();
        let sys = PreconditionedSystem { max_iterations: 1, ..PreconditionedSystem::new(a).unwrap() }.with_tolerance(1e-300);
        match sys.solve(&[1.0, 1.0]) {
            Err(LinalgError::NotConverged { residuals, .. }) => assert!(!residuals.is_empty()),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch() {
        let f = factorize(&SparseMatrix::identity(3)).unwrap();
        assert!(matches!(f.solve(&[1.0]), Err(LinalgError::DimensionMismatch { .. })));
        let rect = TripletBuilder::new(2, 3).finalize().unwrap();
        assert!(matches!(factorize(&rect), Err(LinalgError::NotSquare { .. })));
    }

    fn random_banded(n: usize, kl: usize, ku: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = TripletBuilder::new(n, n);
        for r in 0..n {
            let mut off = 0.0;
            for c in r.saturating_sub(kl)..(r + ku + 1).min(n) {
                if c != r {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    off += v.abs();
                    b.push(r, c, v);
                }
            }
            b.push(r, r, off + 0.5);
        }
        b.finalize().unwrap()
    }

    #[test]
    fn banded_and_iterative_paths_agree_in_1d() {
        let a = random_banded(200, 1, 1, 3);
        let b: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let banded = factorize_with(&a, SolverKind::Banded).unwrap().solve(&b).unwrap();
        let it = FactorizedSystem::Iterative(PreconditionedSystem::new(a.clone()).unwrap().with_tolerance(1e-15));
        let iterative = it.solve(&b).unwrap();
        assert!(rel_err(&iterative, &banded) <= 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_on_random_banded(n in 2usize..120, kl in 0usize..6, ku in 0usize..6, seed in 0u64..1000) {
            let a = random_banded(n, kl, ku, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = a.matvec(&v).unwrap();
            let x = factorize(&a).unwrap().solve(&b).unwrap();
            prop_assert!(rel_err(&x, &v) <= 1e-9);
        }
    }
}
