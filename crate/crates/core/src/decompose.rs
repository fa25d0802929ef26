//! Weight matrix `W = X V X' Phi^{-1}` and its row summaries.
//!
//! `V^{-1}` is factorized once. Each borrower cluster then costs one product
//! `V x_i` followed by a sparse matrix-vector product with `X`; all members of
//! the cluster share that row bit-for-bit. Row summaries are independent and
//! are mapped in parallel when the `parallel` feature is on.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{ClusterIndex, ValidatedModel};
use crate::par::map_indexed;
use crate::partition::RelationshipPartition;

/// Largest P for which the explicit `V` is materialised.
pub const EXPLICIT_V_LIMIT: usize = 2000;

/// Factorization of `V^{-1} = X' Phi^{-1} X + blockdiag(C^{-1}, Sigma^{-1})`.
#[derive(Debug, Clone)]
pub struct PosteriorScale {
    chol: Cholesky<f64, Dyn>,
    explicit: Option<DMatrix<f64>>,
}

impl PosteriorScale {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Solve `V^{-1} z = rhs`, i.e. `z = V rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// `V x`; uses the explicit inverse when one was formed.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.explicit {
            Some(v) => {
                let mut out = DVector::zeros(v.nrows());
                for (c, &xc) in x.iter().enumerate() {
                    if xc != 0.0 {
                        out.axpy(xc, &v.column(c), 1.0);
                    }
                }
                out
            }
            None => self.solve(x),
        }
    }

    /// Explicit `V` (present when P <= [`EXPLICIT_V_LIMIT`]).
    pub fn covariance(&self) -> Option<&DMatrix<f64>> {
        self.explicit.as_ref()
    }

    /// `log det V^{-1}`.
    pub fn log_det_precision(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

/// Factorize the posterior precision of a validated model.
pub fn compute_scale(model: &ValidatedModel) -> Result<PosteriorScale> {
    let precision = model.posterior_precision();
    scale_from_precision(precision)
}

pub(crate) fn scale_from_precision(precision: DMatrix<f64>) -> Result<PosteriorScale> {
    let p = precision.nrows();
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let explicit = (p <= EXPLICIT_V_LIMIT).then(|| {
        let mut v = chol.inverse();
        // Symmetrize away round-off so V' = V exactly.
        for j in 0..p {
            for i in 0..j {
                let m = 0.5 * (v[(i, j)] + v[(j, i)]);
                v[(i, j)] = m;
                v[(j, i)] = m;
            }
        }
        v
    });
    Ok(PosteriorScale { chol, explicit })
}

/// Which coefficients a point estimate targets. `Full` gives `x_i' beta`;
/// `Conditioned` zeroes the listed fixed columns, i.e. the estimate with those
/// coefficient contributions subtracted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Target {
    #[default]
    Full,
    Conditioned(Vec<usize>),
}

impl Target {
    fn vector(&self, model: &ValidatedModel, i: usize) -> DVector<f64> {
        let mut x = model.row_dense(i);
        if let Target::Conditioned(cols) = self {
            for &c in cols {
                x[c] = 0.0;
            }
        }
        x
    }
}

/// Row `i` of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub borrower: usize,
    pub weights: Vec<f64>,
}

impl WeightRow {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn own_weight(&self) -> f64 {
        self.weights[self.borrower]
    }
}

/// `Phi^{-1} X z` for a coefficient-space vector `z`.
fn weights_from_coef(model: &ValidatedModel, z: &DVector<f64>) -> Vec<f64> {
    let noise = model.noise_variances();
    model
        .design()
        .row_iter()
        .enumerate()
        .map(|(j, row)| {
            let dot: f64 = row
                .col_indices()
                .iter()
                .zip(row.values())
                .map(|(&c, &v)| v * z[c])
                .sum();
            dot / noise[j]
        })
        .collect()
}

/// Weights for an arbitrary target vector `t`: `t' V X' Phi^{-1}`.
pub fn weights_for_target(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    target: &DVector<f64>,
) -> Vec<f64> {
    let z = scale.apply(target);
    weights_from_coef(model, &z)
}

/// Row `i` of `W`.
pub fn weight_row(model: &ValidatedModel, scale: &PosteriorScale, i: usize) -> Result<WeightRow> {
    weight_row_for(model, scale, i, &Target::Full)
}

/// Row `i` of the weight matrix for the given target.
pub fn weight_row_for(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    i: usize,
    target: &Target,
) -> Result<WeightRow> {
    let n = model.n_obs();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    Ok(WeightRow {
        borrower: i,
        weights: weights_for_target(model, scale, &target.vector(model, i)),
    })
}

/// Shrinkage, pooling, SSBF and their relationship-group breakdowns for one
/// point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSummary {
    pub shrinkage: f64,
    pub pooling: f64,
    pub ssbf: f64,
    /// Total weight per lender group, in [`RelationshipPartition::groups`] order.
    pub group_borrowing: Vec<f64>,
    /// Sum of squared weights per lender group.
    pub group_pssbf: Vec<f64>,
    /// Number of lenders per group.
    pub group_sizes: Vec<usize>,
}

/// Aggregate a weight row over the borrower cluster and the lender groups.
pub fn summarize_row(
    row: &WeightRow,
    clusters: &ClusterIndex,
    partition: &RelationshipPartition,
) -> RowSummary {
    let i = row.borrower;
    let ci = clusters.cluster_of(i);
    let k = partition.n_groups();
    let mut group_borrowing = vec![0.0; k];
    let mut group_pssbf = vec![0.0; k];
    let mut group_sizes = vec![0usize; k];
    let mut shrinkage = 0.0;
    let mut ssbf = 0.0;
    for (j, &w) in row.weights.iter().enumerate() {
        if clusters.cluster_of(j) == ci {
            shrinkage += w;
        } else {
            let g = partition.group_of(i, j);
            group_borrowing[g] += w;
            group_pssbf[g] += w * w;
            group_sizes[g] += 1;
            ssbf += w * w;
        }
    }
    let pooling = if clusters.n_lenders(i) == 0 {
        0.0
    } else {
        1.0 - shrinkage
    };
    RowSummary {
        shrinkage,
        pooling,
        ssbf,
        group_borrowing,
        group_pssbf,
        group_sizes,
    }
}

#[derive(Debug, Clone)]
pub struct DecomposeOptions {
    /// Retain the dense N x N matrix `W`.
    pub keep_full: bool,
    /// Map rows on the rayon pool (ignored without the `parallel` feature).
    pub parallel: bool,
    pub target: Target,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            keep_full: false,
            parallel: true,
            target: Target::Full,
        }
    }
}

/// Row summaries for every observation.
#[derive(Debug, Clone)]
pub struct BorrowingDecomposition {
    pub summaries: Vec<RowSummary>,
    /// `w_ii` per observation.
    pub own_weights: Vec<f64>,
    /// Row sums of `W`.
    pub row_sums: Vec<f64>,
    pub weights: Option<DMatrix<f64>>,
    pub clusters: ClusterIndex,
    pub group_labels: Vec<String>,
    pub target: Target,
}

impl BorrowingDecomposition {
    pub fn n_obs(&self) -> usize {
        self.summaries.len()
    }

    /// `W y` using the retained matrix.
    pub fn fitted(&self, y: &[f64]) -> Result<Vec<f64>> {
        let w = self
            .weights
            .as_ref()
            .ok_or_else(|| Error::Unsupported("full weight matrix was not retained".into()))?;
        fitted_from_weights(w, y)
    }
}

/// Decompose every point estimate. Rows are computed once per cluster and
/// summarised per observation.
pub fn decompose_all(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    clusters: &ClusterIndex,
    partition: &RelationshipPartition,
    opts: &DecomposeOptions,
) -> Result<BorrowingDecomposition> {
    let n = model.n_obs();
    if clusters.n_obs() != n {
        return Err(Error::Dimension(format!(
            "cluster index covers {} observations, model has {n}",
            clusters.n_obs()
        )));
    }
    let cluster_rows: Vec<Vec<f64>> = map_indexed(clusters.n_clusters(), opts.parallel, |c| {
        let rep = clusters.representative(c);
        weights_for_target(model, scale, &opts.target.vector(model, rep))
    });
    let summaries: Vec<RowSummary> = map_indexed(n, opts.parallel, |i| {
        let row = WeightRow {
            borrower: i,
            weights: cluster_rows[clusters.cluster_of(i)].clone(),
        };
        summarize_row(&row, clusters, partition)
    });
    let own_weights = (0..n)
        .map(|i| cluster_rows[clusters.cluster_of(i)][i])
        .collect();
    let row_sums = (0..n)
        .map(|i| cluster_rows[clusters.cluster_of(i)].iter().sum())
        .collect();
    let weights = opts.keep_full.then(|| {
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            let row = &cluster_rows[clusters.cluster_of(i)];
            for (j, &v) in row.iter().enumerate() {
                w[(i, j)] = v;
            }
        }
        w
    });
    Ok(BorrowingDecomposition {
        summaries,
        own_weights,
        row_sums,
        weights,
        clusters: clusters.clone(),
        group_labels: partition.labels().to_vec(),
        target: opts.target.clone(),
    })
}

/// `W y` from an explicit weight matrix.
pub fn fitted_from_weights(w: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    if w.ncols() != y.len() {
        return Err(Error::Dimension(format!(
            "response has length {}, weight matrix has {} columns",
            y.len(),
            w.ncols()
        )));
    }
    let y = DVector::from_column_slice(y);
    Ok((w * y).iter().copied().collect())
}

/// Posterior mean of the coefficients, `V X' Phi^{-1} y`.
pub fn coefficient_mean(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    y: &[f64],
) -> Result<DVector<f64>> {
    let n = model.n_obs();
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "response has length {}, model has {n} observations",
            y.len()
        )));
    }
    let mut rhs = DVector::zeros(model.n_coef());
    let noise = model.noise_variances();
    for (j, row) in model.design().row_iter().enumerate() {
        let s = y[j] / noise[j];
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            rhs[c] += v * s;
        }
    }
    Ok(scale.solve(&rhs))
}

/// `Y_hat = X V X' Phi^{-1} y` without materialising `W`.
pub fn fitted_values(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    y: &[f64],
) -> Result<Vec<f64>> {
    fitted_values_for(model, scale, y, &Target::Full)
}

/// Fitted values for a target (conditioned columns contribute nothing).
pub fn fitted_values_for(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    y: &[f64],
    target: &Target,
) -> Result<Vec<f64>> {
    let beta = coefficient_mean(model, scale, y)?;
    Ok((0..model.n_obs())
        .map(|i| target.vector(model, i).dot(&beta))
        .collect())
}

/// The P x N matrix `V X' Phi^{-1}` mapping responses to coefficient means.
pub fn coefficient_weights(model: &ValidatedModel, scale: &PosteriorScale) -> DMatrix<f64> {
    let noise = model.noise_variances();
    let mut out = DMatrix::zeros(model.n_coef(), model.n_obs());
    for (j, &nv) in noise.iter().enumerate() {
        let col = scale.apply(&model.row_dense(j)) / nv;
        out.set_column(j, &col);
    }
    out
}
