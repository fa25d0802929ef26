//! Random-effect precision matrices: iid blocks, Leroux CAR, and the
//! spatio-temporal AR(1)-of-CAR construction.
//!
//! Every builder returns a [`PrecisionMatrix`] in sparse storage. The CAR
//! precision is `(rho (D - A) + (1 - rho) I) / sigma2` where `D` is the degree
//! matrix of the adjacency `A`; the space-time precision chains `T` copies of it
//! through `(I - rho_t H)^T blockdiag(Q) (I - rho_t H)` with `H` the lag-1
//! block shift.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected graph over `n` areal units stored as sorted neighbour lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Build from a full 0/1 matrix. The matrix must be square, symmetric and
    /// have a zero diagonal.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut neighbors = vec![Vec::new(); n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::AsymmetricAdjacency(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::AsymmetricAdjacency(format!(
                        "entry ({i}, {j}) = {v} is not 0/1"
                    )));
                }
                if v == 1.0 {
                    if i == j {
                        return Err(Error::AsymmetricAdjacency(format!("self-loop at node {i}")));
                    }
                    if rows[j][i] != 1.0 {
                        return Err(Error::AsymmetricAdjacency(format!(
                            "entry ({i}, {j}) has no mirror ({j}, {i})"
                        )));
                    }
                    neighbors[i].push(j);
                }
            }
        }
        Ok(Self { neighbors })
    }

    /// Build from an undirected edge list (each edge listed once; repeats are
    /// tolerated and collapsed).
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::AsymmetricAdjacency(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::AsymmetricAdjacency(format!("self-loop at node {a}")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors })
    }

    /// Rook-contiguity lattice of `rows x cols` cells, numbered row-major.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                if c + 1 < cols {
                    edges.push((k, k + 1));
                }
                if r + 1 < rows {
                    edges.push((k, k + cols));
                }
            }
        }
        Self::from_edges(rows * cols, &edges).expect("lattice edges are valid")
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    /// Breadth-first hop counts from `source`; `None` for unreachable nodes.
    pub fn distances_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Graph Laplacian `diag(A 1) - A`.
    pub fn laplacian(&self) -> CsrMatrix<f64> {
        let n = self.len();
        let mut coo = CooMatrix::new(n, n);
        for (i, list) in self.neighbors.iter().enumerate() {
            if !list.is_empty() {
                coo.push(i, i, list.len() as f64);
            }
            for &j in list {
                coo.push(i, j, -1.0);
            }
        }
        CsrMatrix::from(&coo)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                m[(i, j)] = 1.0;
            }
        }
        m
    }
}

/// One iid block of random effects sharing a variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IidBlock {
    pub size: usize,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarParams {
    pub sigma2: f64,
    pub rho: f64,
    pub adjacency: Arc<Adjacency>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeParams {
    pub sigma2: f64,
    pub rho_space: f64,
    pub rho_time: f64,
    pub adjacency: Arc<Adjacency>,
    pub periods: usize,
}

/// Covariance model for the random effects; houses the variance and
/// dependence hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceStructure {
    IidBlocks(Vec<IidBlock>),
    DensePrecision(DMatrix<f64>),
    Car(CarParams),
    SpaceTimeAr(SpaceTimeParams),
}

impl CovarianceStructure {
    /// No random effects at all.
    pub fn none() -> Self {
        CovarianceStructure::IidBlocks(Vec::new())
    }

    /// Number of random-effect coefficients (P2).
    pub fn dim(&self) -> usize {
        match self {
            CovarianceStructure::IidBlocks(blocks) => blocks.iter().map(|b| b.size).sum(),
            CovarianceStructure::DensePrecision(m) => m.nrows(),
            CovarianceStructure::Car(p) => p.adjacency.len(),
            CovarianceStructure::SpaceTimeAr(p) => p.adjacency.len() * p.periods,
        }
    }

    /// Assemble the precision `Sigma^{-1}`.
    pub fn precision(&self) -> Result<PrecisionMatrix> {
        match self {
            CovarianceStructure::IidBlocks(blocks) => build_block_precision(blocks),
            CovarianceStructure::DensePrecision(m) => PrecisionMatrix::from_dense(m),
            CovarianceStructure::Car(p) => build_car_precision(p.sigma2, p.rho, &p.adjacency),
            CovarianceStructure::SpaceTimeAr(p) => {
                let q = build_car_precision(p.sigma2, p.rho_space, &p.adjacency)?;
                build_spacetime_precision(p.rho_time, &q, p.periods)
            }
        }
    }
}

/// Sparse symmetric positive-definite random-effect precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix {
    matrix: CsrMatrix<f64>,
}

impl PrecisionMatrix {
    fn from_csr(matrix: CsrMatrix<f64>) -> Self {
        Self { matrix }
    }

    /// Wrap an explicit dense precision after checking symmetry and
    /// positive-definiteness.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "precision must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.amax().max(1.0);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "dense precision is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if m.nrows() > 0 && m.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(
                "dense precision has no Cholesky factor".into(),
            ));
        }
        let mut coo = CooMatrix::new(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != 0.0 {
                    coo.push(i, j, v);
                }
            }
        }
        Ok(Self::from_csr(CsrMatrix::from(&coo)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn as_csr(&self) -> &CsrMatrix<f64> {
        &self.matrix
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from(&self.matrix)
    }

    /// Largest absolute asymmetry `|Q_ij - Q_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let dense = self.to_dense();
        let mut worst = 0.0_f64;
        for i in 0..dense.nrows() {
            for j in 0..i {
                worst = worst.max((dense[(i, j)] - dense[(j, i)]).abs());
            }
        }
        worst
    }

    /// `log det Q` via a dense Cholesky factor.
    pub fn log_det(&self) -> Result<f64> {
        if self.dim() == 0 {
            return Ok(0.0);
        }
        let chol = self
            .to_dense()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("random-effect precision".into()))?;
        Ok(2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>())
    }
}

/// Implicit lag-1 block shift over `periods` blocks of size `block`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftMatrix {
    pub block: usize,
    pub periods: usize,
}

impl ShiftMatrix {
    pub fn new(block: usize, periods: usize) -> Self {
        Self { block, periods }
    }

    pub fn dim(&self) -> usize {
        self.block * self.periods
    }

    /// `(H a)_t = a_{t-1}` for `t >= 2`, zero in the first block.
    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len()];
        if a.len() > self.block {
            out[self.block..].copy_from_slice(&a[..a.len() - self.block]);
        }
        out
    }

    /// Sparse `I - rho H`.
    fn identity_minus(&self, rho: f64) -> CsrMatrix<f64> {
        let n = self.dim();
        let mut coo = CooMatrix::new(n, n);
        for k in 0..n {
            coo.push(k, k, 1.0);
            if k >= self.block && rho != 0.0 {
                coo.push(k, k - self.block, -rho);
            }
        }
        CsrMatrix::from(&coo)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) || rho.is_nan() {
        return Err(Error::RhoOutOfRange(rho));
    }
    Ok(())
}

fn check_variance(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Dimension(format!(
            "variance {sigma2} has no finite precision"
        )));
    }
    Ok(())
}

/// Block-diagonal precision with `1 / sigma2` on each block's diagonal.
pub fn build_block_precision(blocks: &[IidBlock]) -> Result<PrecisionMatrix> {
    let dim: usize = blocks.iter().map(|b| b.size).sum();
    let mut coo = CooMatrix::new(dim, dim);
    let mut offset = 0;
    for block in blocks {
        if block.size == 0 {
            return Err(Error::Dimension("iid block of size 0".into()));
        }
        check_variance(block.sigma2)?;
        for k in offset..offset + block.size {
            coo.push(k, k, 1.0 / block.sigma2);
        }
        offset += block.size;
    }
    Ok(PrecisionMatrix::from_csr(CsrMatrix::from(&coo)))
}

/// Leroux CAR precision `(rho (D - A) + (1 - rho) I) / sigma2`.
pub fn build_car_precision(
    sigma2: f64,
    rho: f64,
    adjacency: &Adjacency,
) -> Result<PrecisionMatrix> {
    check_rho(rho)?;
    check_variance(sigma2)?;
    let n = adjacency.len();
    let mut coo = CooMatrix::new(n, n);
    for i in 0..n {
        let diag = rho * adjacency.degree(i) as f64 + (1.0 - rho);
        coo.push(i, i, diag / sigma2);
        if rho != 0.0 {
            for &j in adjacency.neighbors(i) {
                coo.push(i, j, -rho / sigma2);
            }
        }
    }
    Ok(PrecisionMatrix::from_csr(CsrMatrix::from(&coo)))
}

/// Chain `periods` copies of a spatial precision through an AR(1) in time:
/// `(I - rho H)^T blockdiag(Q, ..., Q) (I - rho H)`.
///
/// `spatial` already carries the `1 / sigma2` scaling.
pub fn build_spacetime_precision(
    rho_time: f64,
    spatial: &PrecisionMatrix,
    periods: usize,
) -> Result<PrecisionMatrix> {
    check_rho(rho_time)?;
    if periods == 0 {
        return Err(Error::Dimension("space-time precision needs T >= 1".into()));
    }
    let block = spatial.dim();
    let q = spatial.as_csr();
    let n = block * periods;
    let mut coo = CooMatrix::new(n, n);
    for t in 0..periods {
        let base = t * block;
        for (i, j, &v) in q.triplet_iter() {
            coo.push(base + i, base + j, v);
        }
    }
    let qblk = CsrMatrix::from(&coo);
    if rho_time == 0.0 {
        return Ok(PrecisionMatrix::from_csr(qblk));
    }
    let d = ShiftMatrix::new(block, periods).identity_minus(rho_time);
    let dt = d.transpose();
    let prod = &(&dt * &qblk) * &d;
    Ok(PrecisionMatrix::from_csr(prod))
}
