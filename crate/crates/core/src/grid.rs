//! Uniform space-time grid over the truncated cube `(-alpha, alpha)^d` and `[0, T]`.
//!
//! Nodes are `x^k = h k` for multi-indices `k` with `|k_i| <= M`. They are
//! flattened lexicographically over `(k_1, ..., k_d)`, ascending from `-M`,
//! with `k_1` the slowest-varying axis.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid parameter: {0}")]
    InvalidParameter(String),
    #[error("index out of range")]
    IndexOutOfRange,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Space-time discretization. `h` and `kappa` are computed once at
/// construction and always read back from the struct.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    alpha: f64,
    m: usize,
    h: f64,
    horizon: f64,
    n_steps: usize,
    kappa: f64,
    strides: Vec<usize>,
}

/// A multi-index `k` into `Z_M`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeIndex(pub Vec<i64>);

impl NodeIndex {
    pub fn new(k: impl Into<Vec<i64>>) -> Self {
        NodeIndex(k.into())
    }
}

/// Result of looking up which cell contains a point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CellLookup {
    Cell(NodeIndex),
    Outside,
}

impl Grid {
    pub fn new(dim: usize, alpha: f64, m: usize, horizon: f64, n_steps: usize) -> Result<Self, GridError> {
        if dim == 0 {
            return Err(GridError::InvalidParameter("d must be >= 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(GridError::InvalidParameter(format!("alpha must be positive, got {alpha}")));
        }
        if m < 2 {
            return Err(GridError::InvalidParameter(format!("M must be >= 2, got {m}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::InvalidParameter(format!("T must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(GridError::InvalidParameter("N must be >= 1".into()));
        }
        let side = 2 * m + 1;
        side.checked_pow(dim as u32)
            .ok_or_else(|| GridError::InvalidParameter("node count overflows".into()))?;
        Ok(Grid {
            dim,
            alpha,
            m,
            h: alpha / m as f64,
            horizon,
            n_steps,
            kappa: horizon / n_steps as f64,
            strides: strides_for(dim, side),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    /// Nodes per half axis, `M`.
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Nodes along one axis, `2M + 1`.
    pub fn side(&self) -> usize {
        2 * self.m + 1
    }

    pub fn node_count(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    pub fn boundary_count(&self) -> usize {
        self.node_count() - (2 * self.m - 1).pow(self.dim as u32)
    }

    /// `h^d`, the weight of one node in quadrature sums.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Flat-index offset of a unit step along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.kappa
    }

    /// Same grid with a different number of time steps.
    pub fn with_steps(&self, n_steps: usize) -> Result<Grid, GridError> {
        Grid::new(self.dim, self.alpha, self.m, self.horizon, n_steps)
    }

    /// Same grid with a different spatial resolution.
    pub fn with_m(&self, m: usize) -> Result<Grid, GridError> {
        Grid::new(self.dim, self.alpha, m, self.horizon, self.n_steps)
    }

    pub fn validate(&self, k: &NodeIndex) -> Result<(), GridError> {
        if k.0.len() != self.dim {
            return Err(GridError::DimensionMismatch { expected: self.dim, got: k.0.len() });
        }
        let m = self.m as i64;
        if k.0.iter().any(|&ki| ki < -m || ki > m) {
            return Err(GridError::IndexOutOfRange);
        }
        Ok(())
    }

    pub fn node_position(&self, k: &NodeIndex) -> Result<Vec<f64>, GridError> {
        self.validate(k)?;
        Ok(k.0.iter().map(|&ki| self.h * ki as f64).collect())
    }

    pub fn is_boundary(&self, k: &NodeIndex) -> Result<bool, GridError> {
        self.validate(k)?;
        let m = self.m as i64;
        Ok(k.0.iter().any(|&ki| ki.abs() == m))
    }

    pub fn flat_index(&self, k: &NodeIndex) -> Result<usize, GridError> {
        self.validate(k)?;
        let m = self.m as i64;
        Ok(k.0.iter().zip(&self.strides).map(|(&ki, &s)| (ki + m) as usize * s).sum())
    }

    pub fn node_index(&self, flat: usize) -> Result<NodeIndex, GridError> {
        if flat >= self.node_count() {
            return Err(GridError::IndexOutOfRange);
        }
        let mut k = vec![0i64; self.dim];
        self.unflatten_into(flat, &mut k);
        Ok(NodeIndex(k))
    }

    /// Writes the multi-index of `flat` into `k` without validation.
    pub(crate) fn unflatten_into(&self, flat: usize, k: &mut [i64]) {
        let side = self.side();
        let m = self.m as i64;
        let mut rest = flat;
        for axis in (0..self.dim).rev() {
            k[axis] = (rest % side) as i64 - m;
            rest /= side;
        }
    }

    /// Position of the node at `flat`, written into `x`.
    pub(crate) fn position_into(&self, flat: usize, x: &mut [f64]) {
        let side = self.side();
        let m = self.m as i64;
        let mut rest = flat;
        for axis in (0..self.dim).rev() {
            x[axis] = self.h * ((rest % side) as i64 - m) as f64;
            rest /= side;
        }
    }

    pub(crate) fn is_boundary_flat(&self, flat: usize) -> bool {
        let side = self.side();
        let mut rest = flat;
        for _ in 0..self.dim {
            let c = rest % side;
            if c == 0 || c == side - 1 {
                return true;
            }
            rest /= side;
        }
        false
    }

    /// All node positions, `node_count * d` values in flat order.
    pub fn positions(&self) -> Vec<f64> {
        let n = self.node_count();
        let mut out = vec![0.0; n * self.dim];
        for (flat, x) in out.chunks_exact_mut(self.dim).enumerate() {
            self.position_into(flat, x);
        }
        out
    }

    /// Boundary mask in flat order.
    pub fn boundary_mask(&self) -> Vec<bool> {
        (0..self.node_count()).map(|f| self.is_boundary_flat(f)).collect()
    }

    /// Finds `k` with `x` in the half-open cell `[x^k, x^{k+1})`.
    pub fn locate_cell(&self, x: &[f64]) -> CellLookup {
        if x.len() != self.dim {
            return CellLookup::Outside;
        }
        let m = self.m as i64;
        let mut k = Vec::with_capacity(self.dim);
        // The leftmost node h * (-M) may round just below -alpha; it still belongs to D.
        let lo = (-self.alpha).min(self.h * -(m as f64));
        for &xi in x {
            if !(xi >= lo && xi < self.alpha) {
                return CellLookup::Outside;
            }
            let mut ki = (xi / self.h).floor() as i64;
            // Guard against rounding in the division placing x just across a face.
            if self.h * (ki as f64) > xi {
                ki -= 1;
            } else if self.h * ((ki + 1) as f64) <= xi {
                ki += 1;
            }
            k.push(ki.clamp(-m, m - 1));
        }
        CellLookup::Cell(NodeIndex(k))
    }

    /// Flat index of the cell containing `x`, or `None` outside the domain.
    pub(crate) fn locate_cell_flat(&self, x: &[f64]) -> Option<usize> {
        match self.locate_cell(x) {
            CellLookup::Cell(k) => {
                let m = self.m as i64;
                Some(k.0.iter().zip(&self.strides).map(|(&ki, &s)| (ki + m) as usize * s).sum())
            }
            CellLookup::Outside => None,
        }
    }

    /// Whether `coarse` nodes are a subset of `self` nodes, returning the ratio.
    pub fn refinement_ratio(&self, coarse: &Grid) -> Option<usize> {
        if self.dim != coarse.dim || self.alpha != coarse.alpha || coarse.m == 0 || self.m % coarse.m != 0 {
            return None;
        }
        Some(self.m / coarse.m)
    }
}

fn strides_for(dim: usize, side: usize) -> Vec<usize> {
    let mut strides = vec![1usize; dim];
    for axis in (0..dim.saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * side;
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn node_positions_scale_by_h() {
        let g = Grid::new(1, 1.0, 2, 1.0, 4).unwrap();
        assert_eq!(g.h(), 0.5);
        assert_eq!(g.node_position(&NodeIndex::new([0])).unwrap(), vec![0.0]);
        let g2 = Grid::new(2, 1.0, 2, 1.0, 4).unwrap();
        assert_eq!(g2.node_position(&NodeIndex::new([2, -2])).unwrap(), vec![1.0, -1.0]);
        let g3 = Grid::new(2, 2.0, 4, 1.0, 4).unwrap();
        assert_eq!(g3.node_position(&NodeIndex::new([2, -3])).unwrap(), vec![1.0, -1.5]);
        let g4 = Grid::new(1, 6.0, 512, 1.0, 4).unwrap();
        assert_eq!(g4.node_position(&NodeIndex::new([512])).unwrap(), vec![6.0]);
    }

    #[test]
    fn invalid_index_is_rejected() {
        let g = Grid::new(1, 1.0, 2, 1.0, 4).unwrap();
        assert_eq!(g.node_position(&NodeIndex::new([3])), Err(GridError::IndexOutOfRange));
        assert!(matches!(
            g.node_position(&NodeIndex::new([0, 0])),
            Err(GridError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn boundary_classification() {
        let g = Grid::new(2, 1.0, 4, 1.0, 1).unwrap();
        assert!(g.is_boundary(&NodeIndex::new([4, 0])).unwrap());
        assert!(!g.is_boundary(&NodeIndex::new([3, 3])).unwrap());
        let counted = (0..g.node_count()).filter(|&f| g.is_boundary(&g.node_index(f).unwrap()).unwrap()).count();
        assert_eq!(counted, 32);
        assert_eq!(g.boundary_count(), 32);
        assert_eq!(g.boundary_mask().iter().filter(|&&b| b).count(), 32);
    }

    #[test]
    fn locate_cell_examples() {
        let g = Grid::new(1, 1.0, 2, 1.0, 1).unwrap();
        assert_eq!(g.locate_cell(&[0.3]), CellLookup::Cell(NodeIndex::new([0])));
        assert_eq!(g.locate_cell(&[1.7]), CellLookup::Outside);
        assert_eq!(g.locate_cell(&[-1.0]), CellLookup::Cell(NodeIndex::new([-2])));
        assert_eq!(g.locate_cell(&[1.0]), CellLookup::Outside);
        assert_eq!(g.locate_cell(&[f64::NAN]), CellLookup::Outside);
    }

    #[test]
    fn half_open_cells_at_every_face() {
        // Exhaustive scan of cell faces: a face belongs to the cell on its right.
        let g = Grid::new(1, 3.0, 12, 1.0, 1).unwrap();
        for k in -12i64..12 {
            let x = g.h() * k as f64;
            assert_eq!(g.locate_cell(&[x]), CellLookup::Cell(NodeIndex::new([k])));
            let below = f64::from_bits(x.to_bits().wrapping_add(if x > 0.0 { u64::MAX } else { 1 }));
            if k > -12 && x != 0.0 {
                assert_eq!(g.locate_cell(&[below]), CellLookup::Cell(NodeIndex::new([k - 1])));
            }
        }
    }

    #[test]
    fn flat_order_is_lexicographic() {
        let g = Grid::new(2, 1.0, 2, 1.0, 1).unwrap();
        assert_eq!(g.node_index(0).unwrap(), NodeIndex::new([-2, -2]));
        assert_eq!(g.node_index(1).unwrap(), NodeIndex::new([-2, -1]));
        assert_eq!(g.node_index(5).unwrap(), NodeIndex::new([-1, -2]));
        assert_eq!(g.stride(0), 5);
        assert_eq!(g.stride(1), 1);
    }

    proptest! {
        #[test]
        fn unit_offsets_are_exact(m in 2usize..20, k in -18i64..18, axis in 0usize..2) {
            let g = Grid::new(2, 1.7, m, 1.0, 1).unwrap();
            let mi = m as i64;
            prop_assume!(k.abs() < mi);
            let mut idx = vec![0i64, 0];
            idx[axis] = k;
            let x = g.node_position(&NodeIndex(idx.clone())).unwrap();
            idx[axis] = k + 1;
            let xp = g.node_position(&NodeIndex(idx.clone())).unwrap();
            idx[axis] = k - 1;
            let xm = g.node_position(&NodeIndex(idx)).unwrap();
            prop_assert_eq!(g.h() * (k + 1) as f64 - g.h() * k as f64, xp[axis] - x[axis]);
            prop_assert_eq!(g.h() * (k - 1) as f64 - g.h() * k as f64, xm[axis] - x[axis]);
        }

        #[test]
        fn nodes_locate_to_themselves(m in 2usize..40, k0 in -40i64..40, k1 in -40i64..40, alpha in 0.1f64..10.0) {
            let g = Grid::new(2, alpha, m, 1.0, 1).unwrap();
            let mi = m as i64;
            prop_assume!(k0 >= -mi && k0 < mi && k1 >= -mi && k1 < mi);
            let k = NodeIndex::new([k0, k1]);
            let x = g.node_position(&k).unwrap();
            prop_assert_eq!(g.locate_cell(&x), CellLookup::Cell(k));
        }

        #[test]
        fn cells_partition_the_domain(m in 2usize..30, u in -1.0f64..1.0, v in -1.0f64..1.0) {
            let g = Grid::new(2, 2.5, m, 1.0, 1).unwrap();
            let x = [u * 2.5, v * 2.5];
            prop_assume!(x[0] < 2.5 && x[1] < 2.5);
            match g.locate_cell(&x) {
                CellLookup::Cell(k) => {
                    for (axis, &ki) in k.0.iter().enumerate() {
                        let lo = g.h() * ki as f64;
                        let hi = g.h() * (ki + 1) as f64;
                        prop_assert!(lo <= x[axis] && x[axis] < hi);
                    }
                }
                CellLookup::Outside => prop_assert!(false, "interior point outside"),
            }
        }
    }
}
