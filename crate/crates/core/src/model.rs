//! Hierarchical regression specification, validation, and borrower clusters.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::covariance::{CovarianceStructure, PrecisionMatrix};
use crate::error::{Error, Result};

/// Model of the form `Y ~ N(X1 b1 + X2 b2, Phi)`, `b1 ~ N(0, C)`,
/// `b2 ~ N(0, Sigma)` with `Phi` diagonal.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub fixed_design: DMatrix<f64>,
    pub random_design: CsrMatrix<f64>,
    /// Diagonal of `Phi`.
    pub noise_variances: Vec<f64>,
    /// `C^{-1}`; the zero matrix encodes the flat prior.
    pub fixed_prior_precision: DMatrix<f64>,
    pub random_structure: CovarianceStructure,
}

impl ModelSpec {
    /// Spec with a flat prior on the fixed effects.
    pub fn new(
        fixed_design: DMatrix<f64>,
        random_design: CsrMatrix<f64>,
        noise_variances: Vec<f64>,
        random_structure: CovarianceStructure,
    ) -> Self {
        let p1 = fixed_design.ncols();
        Self {
            fixed_design,
            random_design,
            noise_variances,
            fixed_prior_precision: DMatrix::zeros(p1, p1),
            random_structure,
        }
    }

    /// Fixed-effects-only spec (no random design).
    pub fn fixed_only(fixed_design: DMatrix<f64>, noise_variances: Vec<f64>) -> Self {
        let n = fixed_design.nrows();
        Self::new(
            fixed_design,
            CsrMatrix::zeros(n, 0),
            noise_variances,
            CovarianceStructure::none(),
        )
    }

    pub fn with_fixed_prior_precision(mut self, precision: DMatrix<f64>) -> Self {
        self.fixed_prior_precision = precision;
        self
    }

    pub fn n_obs(&self) -> usize {
        self.fixed_design.nrows()
    }

    /// Restrict to the listed observation rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.n_obs();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let fixed = self.fixed_design.select_rows(rows.iter());
        let p2 = self.random_design.ncols();
        let mut coo = CooMatrix::new(rows.len(), p2);
        for (new, &old) in rows.iter().enumerate() {
            let row = self.random_design.row(old);
            for (&c, &v) in row.col_indices().iter().zip(row.values()) {
                coo.push(new, c, v);
            }
        }
        Ok(Self {
            fixed_design: fixed,
            random_design: CsrMatrix::from(&coo),
            noise_variances: rows.iter().map(|&r| self.noise_variances[r]).collect(),
            fixed_prior_precision: self.fixed_prior_precision.clone(),
            random_structure: self.random_structure.clone(),
        })
    }
}

/// A spec that passed [`validate_spec`]; immutable and shareable.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    spec: ModelSpec,
    design: CsrMatrix<f64>,
    random_precision: PrecisionMatrix,
}

impl ValidatedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_obs(&self) -> usize {
        self.spec.n_obs()
    }

    pub fn n_fixed(&self) -> usize {
        self.spec.fixed_design.ncols()
    }

    pub fn n_random(&self) -> usize {
        self.spec.random_design.ncols()
    }

    /// P = P1 + P2.
    pub fn n_coef(&self) -> usize {
        self.n_fixed() + self.n_random()
    }

    /// Combined design `[X1 X2]` in compressed-row form.
    pub fn design(&self) -> &CsrMatrix<f64> {
        &self.design
    }

    pub fn noise_variances(&self) -> &[f64] {
        &self.spec.noise_variances
    }

    pub fn random_precision(&self) -> &PrecisionMatrix {
        &self.random_precision
    }

    /// Sparse view of design row `i`: column indices and values.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let offsets = self.design.row_offsets();
        let (a, b) = (offsets[i], offsets[i + 1]);
        (
            &self.design.col_indices()[a..b],
            &self.design.values()[a..b],
        )
    }

    /// Dense copy of `x_i`.
    pub fn row_dense(&self, i: usize) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_coef());
        let (cols, vals) = self.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            x[c] = v;
        }
        x
    }

    pub fn design_dense(&self) -> DMatrix<f64> {
        DMatrix::from(&self.design)
    }

    /// `X' Phi^{-1} X + blockdiag(C^{-1}, Sigma^{-1})`, assembled densely.
    pub fn posterior_precision(&self) -> DMatrix<f64> {
        posterior_precision(
            &self.design,
            &self.spec.noise_variances,
            &self.spec.fixed_prior_precision,
            self.random_precision.as_csr(),
        )
    }

    /// Re-validate the model restricted to `rows`.
    pub fn select_rows(&self, rows: &[usize]) -> Result<ValidatedModel> {
        validate_spec(self.spec.select_rows(rows)?)
    }

    /// Same design, different noise variances and random structure.
    pub fn with_variances(
        &self,
        noise_variances: Vec<f64>,
        random_structure: CovarianceStructure,
    ) -> Result<ValidatedModel> {
        let mut spec = self.spec.clone();
        spec.noise_variances = noise_variances;
        spec.random_structure = random_structure;
        validate_spec(spec)
    }
}

pub(crate) fn combine_design(fixed: &DMatrix<f64>, random: &CsrMatrix<f64>) -> CsrMatrix<f64> {
    let n = fixed.nrows();
    let p1 = fixed.ncols();
    let mut coo = CooMatrix::new(n, p1 + random.ncols());
    for i in 0..n {
        for j in 0..p1 {
            let v = fixed[(i, j)];
            if v != 0.0 {
                coo.push(i, j, v);
            }
        }
        let row = random.row(i);
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            if v != 0.0 {
                coo.push(i, p1 + c, v);
            }
        }
    }
    CsrMatrix::from(&coo)
}

pub(crate) fn posterior_precision(
    design: &CsrMatrix<f64>,
    noise: &[f64],
    fixed_prior: &DMatrix<f64>,
    random_precision: &CsrMatrix<f64>,
) -> DMatrix<f64> {
    let p = design.ncols();
    let p1 = fixed_prior.nrows();
    let mut m = DMatrix::zeros(p, p);
    for (i, row) in design.row_iter().enumerate() {
        let inv = 1.0 / noise[i];
        let cols = row.col_indices();
        let vals = row.values();
        for (a, &ca) in cols.iter().enumerate() {
            let va = vals[a] * inv;
            for (b, &cb) in cols.iter().enumerate() {
                m[(ca, cb)] += va * vals[b];
            }
        }
    }
    for j in 0..p1 {
        for i in 0..p1 {
            m[(i, j)] += fixed_prior[(i, j)];
        }
    }
    for (i, j, &v) in random_precision.triplet_iter() {
        m[(p1 + i, p1 + j)] += v;
    }
    m
}

/// Least-squares residual norm of regressing the ones vector on `x1`.
pub fn ones_residual(x1: &DMatrix<f64>) -> f64 {
    let n = x1.nrows();
    let ones = DVector::from_element(n, 1.0);
    if x1.ncols() == 0 {
        return (n as f64).sqrt();
    }
    let svd = x1.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-10 * (n.max(x1.ncols()) as f64);
    match svd.solve(&ones, eps) {
        Ok(coef) => (x1 * coef - ones).norm(),
        Err(_) => (n as f64).sqrt(),
    }
}

/// Check dimensions, `1 in span(X1)`, positive noise, and positive-definiteness
/// of the posterior precision.
pub fn validate_spec(spec: ModelSpec) -> Result<ValidatedModel> {
    let n = spec.n_obs();
    let p1 = spec.fixed_design.ncols();
    if n == 0 {
        return Err(Error::Dimension("model has no observations".into()));
    }
    if spec.random_design.nrows() != n {
        return Err(Error::Dimension(format!(
            "random design has {} rows, expected {n}",
            spec.random_design.nrows()
        )));
    }
    if spec.noise_variances.len() != n {
        return Err(Error::Dimension(format!(
            "{} noise variances for {n} observations",
            spec.noise_variances.len()
        )));
    }
    if spec.fixed_prior_precision.shape() != (p1, p1) {
        return Err(Error::Dimension(format!(
            "fixed prior precision is {:?}, expected ({p1}, {p1})",
            spec.fixed_prior_precision.shape()
        )));
    }
    if spec.random_structure.dim() != spec.random_design.ncols() {
        return Err(Error::Dimension(format!(
            "random structure has dimension {}, random design has {} columns",
            spec.random_structure.dim(),
            spec.random_design.ncols()
        )));
    }
    if let Some((i, v)) = spec
        .noise_variances
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
    {
        return Err(Error::NotPositiveDefinite(format!(
            "noise variance at row {i} is {v}"
        )));
    }
    let residual = ones_residual(&spec.fixed_design);
    if residual.is_nan() || residual >= 1e-8 * (n as f64).sqrt() {
        return Err(Error::Span { residual });
    }
    let random_precision = spec.random_structure.precision()?;
    let design = combine_design(&spec.fixed_design, &spec.random_design);
    let model = ValidatedModel {
        spec,
        design,
        random_precision,
    };
    if model.posterior_precision().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(
            "posterior precision X'Phi^-1 X + blockdiag(C^-1, Sigma^-1)".into(),
        ));
    }
    Ok(model)
}

/// Partition of observations into borrower clusters (identical design row and
/// noise variance).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterIndex {
    cluster_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClusterIndex {
    pub fn cluster_of(&self, i: usize) -> usize {
        self.cluster_of[i]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.cluster_of
    }

    /// Members of cluster `c` (the borrower set B).
    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    pub fn n_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn n_obs(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn size(&self, c: usize) -> usize {
        self.members[c].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Index of the first member, used as the cluster's representative row.
    pub fn representative(&self, c: usize) -> usize {
        self.members[c][0]
    }

    /// Number of lenders `|L_i|` for observation `i`.
    pub fn n_lenders(&self, i: usize) -> usize {
        self.n_obs() - self.size(self.cluster_of[i])
    }
}

fn canonical_bits(v: f64) -> u64 {
    // -0.0 and 0.0 compare equal; give them one key.
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// Group observations with bitwise-identical design rows (after signed-zero
/// canonicalisation) and equal noise variance. Cluster ids follow first
/// appearance.
pub fn detect_clusters(model: &ValidatedModel) -> ClusterIndex {
    let n = model.n_obs();
    let mut index: HashMap<(Vec<(usize, u64)>, u64), usize> = HashMap::with_capacity(n);
    let mut cluster_of = Vec::with_capacity(n);
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let (cols, vals) = model.row(i);
        let key_row: Vec<(usize, u64)> = cols
            .iter()
            .zip(vals)
            .filter(|(_, v)| **v != 0.0)
            .map(|(&c, &v)| (c, canonical_bits(v)))
            .collect();
        let key = (key_row, canonical_bits(model.noise_variances()[i]));
        let next = members.len();
        let c = *index.entry(key).or_insert(next);
        if c == next {
            members.push(Vec::new());
        }
        members[c].push(i);
        cluster_of.push(c);
    }
    ClusterIndex {
        cluster_of,
        members,
    }
}
