//! Slow, literal reference implementations used to validate the engine.
//!
//! Nothing here reuses the factorization held by [`PosteriorScale`] except
//! [`case_deleted_fit`], which is the rank-one update under test and is checked
//! against [`refit_without`].

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::covariance::{CovarianceStructure, IidBlock};
use crate::decompose::{coefficient_mean, PosteriorScale};
use crate::error::{Error, Result};
use crate::model::{validate_spec, ClusterIndex, ModelSpec, ValidatedModel};

/// Dense oracles refuse problems larger than this.
pub const ORACLE_LIMIT: usize = 3000;

fn guard(n: usize) -> Result<()> {
    if n > ORACLE_LIMIT {
        return Err(Error::SizeGuard {
            n,
            limit: ORACLE_LIMIT,
        });
    }
    Ok(())
}

/// One-way normal model: cluster `j` has `sizes[j]` observations with noise
/// variance `noise_variances[j]`; cluster means are iid `N(a0, sigma2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneWayProblem {
    pub sizes: Vec<usize>,
    pub noise_variances: Vec<f64>,
    pub sigma2: f64,
    /// Known grand mean; `None` means it is estimated under a flat prior.
    pub known_mean: Option<f64>,
}

impl OneWayProblem {
    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_obs(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Cluster of each observation, observations ordered cluster by cluster.
    pub fn cluster_of(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
            .collect()
    }

    /// The same problem as a general model: intercept plus iid cluster
    /// effects. A known mean has no general-model form because the ones
    /// vector must lie in the span of the fixed design.
    pub fn to_model(&self) -> Result<ValidatedModel> {
        if self.known_mean.is_some() {
            return Err(Error::Unsupported(
                "a known grand mean cannot be expressed with 1 in span(X1)".into(),
            ));
        }
        let n = self.n_obs();
        let j = self.n_clusters();
        let cluster_of = self.cluster_of();
        let mut coo = CooMatrix::new(n, j);
        for (row, &c) in cluster_of.iter().enumerate() {
            coo.push(row, c, 1.0);
        }
        let spec = ModelSpec::new(
            DMatrix::from_element(n, 1, 1.0),
            CsrMatrix::from(&coo),
            cluster_of
                .iter()
                .map(|&c| self.noise_variances[c])
                .collect(),
            CovarianceStructure::IidBlocks(vec![IidBlock {
                size: j,
                sigma2: self.sigma2,
            }]),
        );
        validate_spec(spec)
    }
}

/// Cluster-level closed form for the one-way model.
#[derive(Debug, Clone, PartialEq)]
pub struct OneWayWeights {
    /// `rho[(i, j)]`: weight of cluster mean `j` in the estimate for cluster `i`.
    pub rho: DMatrix<f64>,
    /// Weight on the grand mean.
    pub lambda: Vec<f64>,
    /// Informativeness of each cluster mean.
    pub tau: Vec<f64>,
    sizes: Vec<usize>,
}

impl OneWayWeights {
    pub fn shrinkage(&self, i: usize) -> f64 {
        1.0 - self.lambda[i] + self.rho[(i, i)]
    }

    pub fn pooling(&self, i: usize) -> f64 {
        self.lambda[i] - self.rho[(i, i)]
    }

    /// Weight of a single observation from cluster `j` in the estimate for
    /// cluster `i`.
    pub fn point_weight(&self, i: usize, j: usize) -> f64 {
        let own = if i == j { 1.0 - self.lambda[i] } else { 0.0 };
        (own + self.rho[(i, j)]) / self.sizes[j] as f64
    }

    /// Full N x N expansion, observations ordered cluster by cluster.
    pub fn expand(&self) -> DMatrix<f64> {
        let cluster_of: Vec<usize> = self
            .sizes
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
            .collect();
        let n = cluster_of.len();
        DMatrix::from_fn(n, n, |a, b| self.point_weight(cluster_of[a], cluster_of[b]))
    }
}

/// `tau_j = n_j/(n_j s2 + phi_j^2)`, `lambda_i = phi_i^2/(n_i s2 + phi_i^2)`,
/// `rho_ij = lambda_i tau_j / sum_k tau_k`.
pub fn oneway_weights(p: &OneWayProblem) -> Result<OneWayWeights> {
    let j = p.n_clusters();
    if j == 0 {
        return Err(Error::EmptyInput("one-way problem has no clusters"));
    }
    if p.noise_variances.len() != j {
        return Err(Error::Dimension(format!(
            "{} noise variances for {j} clusters",
            p.noise_variances.len()
        )));
    }
    if p.sizes.contains(&0) {
        return Err(Error::Dimension("cluster sizes must be at least 1".into()));
    }
    if p.sigma2 < 0.0 || p.noise_variances.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPositiveDefinite("one-way variances".into()));
    }
    let tau: Vec<f64> = (0..j)
        .map(|c| {
            let n = p.sizes[c] as f64;
            n / (n * p.sigma2 + p.noise_variances[c])
        })
        .collect();
    let lambda: Vec<f64> = (0..j)
        .map(|c| {
            let n = p.sizes[c] as f64;
            let phi2 = p.noise_variances[c];
            phi2 / (n * p.sigma2 + phi2)
        })
        .collect();
    let total: f64 = tau.iter().sum();
    let rho = if p.known_mean.is_some() {
        DMatrix::zeros(j, j)
    } else {
        DMatrix::from_fn(j, j, |a, b| lambda[a] * tau[b] / total)
    };
    Ok(OneWayWeights {
        rho,
        lambda,
        tau,
        sizes: p.sizes.clone(),
    })
}

/// Posterior means of the cluster effects from cluster sample means.
pub fn oneway_estimates(p: &OneWayProblem, w: &OneWayWeights, means: &[f64]) -> Vec<f64> {
    (0..p.n_clusters())
        .map(|i| {
            let own = (1.0 - w.lambda[i]) * means[i];
            match p.known_mean {
                Some(a0) => own + w.lambda[i] * a0,
                None => {
                    own + (0..means.len())
                        .map(|j| w.rho[(i, j)] * means[j])
                        .sum::<f64>()
                }
            }
        })
        .collect()
}

fn dense_design(model: &ValidatedModel) -> DMatrix<f64> {
    let spec = model.spec();
    let n = spec.n_obs();
    let p1 = spec.fixed_design.ncols();
    let p2 = spec.random_design.ncols();
    let mut x = DMatrix::zeros(n, p1 + p2);
    x.view_mut((0, 0), (n, p1)).copy_from(&spec.fixed_design);
    for (i, j, &v) in spec.random_design.triplet_iter() {
        x[(i, p1 + j)] = v;
    }
    x
}

fn dense_prior(model: &ValidatedModel) -> DMatrix<f64> {
    let p1 = model.n_fixed();
    let p2 = model.n_random();
    let mut prior = DMatrix::zeros(p1 + p2, p1 + p2);
    prior
        .view_mut((0, 0), (p1, p1))
        .copy_from(&model.spec().fixed_prior_precision);
    prior
        .view_mut((p1, p1), (p2, p2))
        .copy_from(&model.random_precision().to_dense());
    prior
}

fn phi_inverse(model: &ValidatedModel) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        model.n_obs(),
        model.noise_variances().iter().map(|v| 1.0 / v),
    ))
}

fn dense_v(x: &DMatrix<f64>, phi_inv: &DMatrix<f64>, prior: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    (x.transpose() * phi_inv * x + prior)
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("dense posterior precision".into()))
}

/// `W = X V X' Phi^{-1}` by explicit dense inversion.
pub fn dense_weights(model: &ValidatedModel) -> Result<DMatrix<f64>> {
    guard(model.n_obs())?;
    let x = dense_design(model);
    let phi_inv = phi_inverse(model);
    let v = dense_v(&x, &phi_inv, &dense_prior(model))?;
    Ok(&x * v * x.transpose() * phi_inv)
}

/// Coefficient mean and fitted values for every original row after deleting
/// some observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DeletedFit {
    pub coefficients: DVector<f64>,
    pub fitted: Vec<f64>,
}

fn fitted_from_coef(model: &ValidatedModel, coef: &DVector<f64>) -> Vec<f64> {
    (0..model.n_obs())
        .map(|i| {
            let (cols, vals) = model.row(i);
            cols.iter().zip(vals).map(|(&c, &v)| v * coef[c]).sum()
        })
        .collect()
}

/// Rank-one update for deleting the rows `rows`, which must all lie in one
/// borrower cluster. `E[b | Y_-S] = b_hat + (m/phi^2)(Y_hat_j - Ybar_S)/(1 - (m/phi^2) x'Vx) V x`.
pub fn subset_deleted_fit(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    clusters: &ClusterIndex,
    y: &[f64],
    rows: &[usize],
) -> Result<DeletedFit> {
    let n = model.n_obs();
    let coef = coefficient_mean(model, scale, y)?;
    let Some(&first) = rows.first() else {
        let fitted = fitted_from_coef(model, &coef);
        return Ok(DeletedFit {
            coefficients: coef,
            fitted,
        });
    };
    for &r in rows {
        if r >= n {
            return Err(Error::IndexOutOfRange { index: r, len: n });
        }
    }
    let cluster = clusters.cluster_of(first);
    if rows.iter().any(|&r| clusters.cluster_of(r) != cluster) {
        return Err(Error::Unsupported(
            "rank-one deletion needs rows from a single borrower cluster".into(),
        ));
    }
    let m = rows.len() as f64;
    let phi2 = model.noise_variances()[first];
    let x = model.row_dense(first);
    let vx = scale.apply(&x);
    let leverage = m / phi2 * x.dot(&vx);
    let denom = 1.0 - leverage;
    if denom.abs() < 1e-12 {
        return Err(Error::SingularAfterDeletion { cluster });
    }
    let fitted_j = x.dot(&coef);
    let mean_s = rows.iter().map(|&r| y[r]).sum::<f64>() / m;
    let coefficients = &coef + &vx * (m / phi2 * (fitted_j - mean_s) / denom);
    let fitted = fitted_from_coef(model, &coefficients);
    Ok(DeletedFit {
        coefficients,
        fitted,
    })
}

/// Delete every member of cluster `j`.
pub fn case_deleted_fit(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    clusters: &ClusterIndex,
    y: &[f64],
    j: usize,
) -> Result<DeletedFit> {
    if j >= clusters.n_clusters() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: clusters.n_clusters(),
        });
    }
    subset_deleted_fit(model, scale, clusters, y, clusters.members(j))
}

/// Refit from scratch on the remaining rows by dense inversion, then predict
/// every original row.
pub fn refit_without(model: &ValidatedModel, y: &[f64], deleted: &[usize]) -> Result<DeletedFit> {
    let n = model.n_obs();
    guard(n)?;
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "response has length {}, expected {n}",
            y.len()
        )));
    }
    let mut keep = vec![true; n];
    for &d in deleted {
        if d >= n {
            return Err(Error::IndexOutOfRange { index: d, len: n });
        }
        keep[d] = false;
    }
    let rows: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let x = dense_design(model);
    let xs = x.select_rows(rows.iter());
    let phi_inv = DMatrix::from_diagonal(&DVector::from_iterator(
        rows.len(),
        rows.iter().map(|&r| 1.0 / model.noise_variances()[r]),
    ));
    let v = dense_v(&xs, &phi_inv, &dense_prior(model))?;
    let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r]));
    let coefficients = v * xs.transpose() * phi_inv * ys;
    let fitted = (&x * &coefficients).iter().copied().collect();
    Ok(DeletedFit {
        coefficients,
        fitted,
    })
}

/// Dense pieces of the identity `W = H + H2 (I - H)`.
#[derive(Debug, Clone)]
pub struct HatDecomposition {
    /// `X1 A X1' Phit^{-1}` with `A = (X1' Phit^{-1} X1 + C^{-1})^{-1}`.
    pub h: DMatrix<f64>,
    /// `X1 A X1' Phi^{-1}`, so that `H = H1 (I - H2)`.
    pub h1: DMatrix<f64>,
    /// `X2 M X2' Phi^{-1}` with `M = (X2' Phi^{-1} X2 + Sigma^{-1})^{-1}`.
    pub h2: DMatrix<f64>,
    /// `Phi^{-1} (I - H2)`.
    pub phi_tilde_inv: DMatrix<f64>,
    /// `Phi + X2 Sigma X2'`.
    pub phi_tilde: DMatrix<f64>,
    /// `W` from [`dense_weights`].
    pub weights: DMatrix<f64>,
}

impl HatDecomposition {
    /// `max |W - (H + H2 (I - H))|`.
    pub fn identity_residual(&self) -> f64 {
        let n = self.h.nrows();
        let rebuilt = &self.h + &self.h2 * (DMatrix::identity(n, n) - &self.h);
        (&self.weights - rebuilt).amax()
    }

    /// `max |H H - H|`.
    pub fn idempotence_residual(&self) -> f64 {
        (&self.h * &self.h - &self.h).amax()
    }

    /// `max |Phit Phit^{-1} - I|`.
    pub fn phi_tilde_residual(&self) -> f64 {
        let n = self.h.nrows();
        (&self.phi_tilde * &self.phi_tilde_inv - DMatrix::identity(n, n)).amax()
    }
}

pub fn hat_decomposition(model: &ValidatedModel) -> Result<HatDecomposition> {
    let n = model.n_obs();
    guard(n)?;
    let spec = model.spec();
    let x1 = spec.fixed_design.clone();
    let p2 = model.n_random();
    let x = dense_design(model);
    let x2 = x.columns(model.n_fixed(), p2).into_owned();
    let phi_inv = phi_inverse(model);
    let phi = DMatrix::from_diagonal(&DVector::from_column_slice(model.noise_variances()));
    let sigma_inv = model.random_precision().to_dense();
    let identity = DMatrix::identity(n, n);

    let (h2, phi_tilde) = if p2 == 0 {
        (DMatrix::zeros(n, n), phi.clone())
    } else {
        let m = (x2.transpose() * &phi_inv * &x2 + &sigma_inv)
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("random-effect block".into()))?;
        let sigma = sigma_inv
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("random-effect precision".into()))?;
        (
            &x2 * m * x2.transpose() * &phi_inv,
            &phi + &x2 * sigma * x2.transpose(),
        )
    };
    let phi_tilde_inv = &phi_inv * (&identity - &h2);
    let a = (x1.transpose() * &phi_tilde_inv * &x1 + &spec.fixed_prior_precision)
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("fixed-effect block".into()))?;
    let x1a = &x1 * a * x1.transpose();
    let h = &x1a * &phi_tilde_inv;
    let h1 = x1a * &phi_inv;
    Ok(HatDecomposition {
        h,
        h1,
        h2,
        phi_tilde_inv,
        phi_tilde,
        weights: dense_weights(model)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{compute_scale, weight_row};
    use crate::model::detect_clusters;

    fn example() -> OneWayProblem {
        OneWayProblem {
            sizes: vec![1, 2],
            noise_variances: vec![1.0, 1.0],
            sigma2: 1.0,
            known_mean: None,
        }
    }

    #[test]
    fn two_cluster_closed_form() {
        let w = oneway_weights(&example()).unwrap();
        assert!((w.tau[0] - 0.5).abs() < 1e-15);
        assert!((w.tau[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.lambda[0] - 0.5).abs() < 1e-15);
        assert!((w.rho[(0, 0)] - 3.0 / 14.0).abs() < 1e-15);
        assert!((w.rho[(0, 1)] - 2.0 / 7.0).abs() < 1e-15);
        assert!((w.shrinkage(0) - 5.0 / 7.0).abs() < 1e-15);
        assert!((w.pooling(0) - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn lambda_is_row_sum_of_rho() {
        let p = OneWayProblem {
            sizes: vec![3, 1, 7, 2],
            noise_variances: vec![0.5, 2.0, 1.0, 3.0],
            sigma2: 0.8,
            known_mean: None,
        };
        let w = oneway_weights(&p).unwrap();
        for i in 0..4 {
            let s: f64 = w.rho.row(i).iter().sum();
            assert!((s - w.lambda[i]).abs() < 1e-12);
        }
        for row in w.expand().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tau_monotone() {
        let tau = |n: usize, phi2: f64| {
            oneway_weights(&OneWayProblem {
                sizes: vec![n, 1],
                noise_variances: vec![phi2, 1.0],
                sigma2: 1.0,
                known_mean: None,
            })
            .unwrap()
            .tau[0]
        };
        assert!(tau(1, 1.0) < tau(2, 1.0) && tau(2, 1.0) < tau(10, 1.0));
        assert!(tau(3, 0.5) > tau(3, 1.0) && tau(3, 1.0) > tau(3, 4.0));
        // Limit sigma^{-2} as n grows.
        assert!((tau(1_000_000, 1.0) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn independence_limit() {
        let mut p = example();
        p.sigma2 = 1e12;
        let w = oneway_weights(&p).unwrap();
        assert!(w.lambda[0] < 1e-11);
        assert!((w.shrinkage(0) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn complete_pooling_limit() {
        let p = OneWayProblem {
            sizes: vec![1, 2, 4],
            noise_variances: vec![1.3; 3],
            sigma2: 0.0,
            known_mean: None,
        };
        let w = oneway_weights(&p).unwrap().expand();
        assert!(w.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn known_mean_shrinks_toward_it() {
        let mut p = example();
        p.known_mean = Some(3.0);
        let w = oneway_weights(&p).unwrap();
        let est = oneway_estimates(&p, &w, &[1.0, 1.0]);
        // lambda_1 = 1/2, lambda_2 = 1/3.
        assert!((est[0] - 2.0).abs() < 1e-15);
        assert!((est[1] - (2.0 / 3.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dense_matches_closed_form() {
        let p = OneWayProblem {
            sizes: vec![2, 1, 3],
            noise_variances: vec![0.7, 1.9, 1.1],
            sigma2: 0.6,
            known_mean: None,
        };
        let dense = dense_weights(&p.to_model().unwrap()).unwrap();
        let closed = oneway_weights(&p).unwrap().expand();
        assert!((dense - closed).amax() < 1e-10);
    }

    #[test]
    fn dense_intercept_only() {
        let model = validate_spec(ModelSpec::fixed_only(
            DMatrix::from_element(7, 1, 1.0),
            vec![2.0; 7],
        ))
        .unwrap();
        let w = dense_weights(&model).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-14));
    }

    #[test]
    fn size_guard() {
        let model = validate_spec(ModelSpec::fixed_only(
            DMatrix::from_element(ORACLE_LIMIT + 1, 1, 1.0),
            vec![1.0; ORACLE_LIMIT + 1],
        ))
        .unwrap();
        assert!(matches!(
            dense_weights(&model),
            Err(Error::SizeGuard { .. })
        ));
    }

    #[test]
    fn deletion_matches_refit() {
        let p = OneWayProblem {
            sizes: vec![2, 1, 3, 2],
            noise_variances: vec![1.0, 0.5, 2.0, 1.0],
            sigma2: 0.9,
            known_mean: None,
        };
        let model = p.to_model().unwrap();
        let scale = compute_scale(&model).unwrap();
        let clusters = detect_clusters(&model);
        let y = [0.3, -1.2, 2.0, 0.7, 0.1, -0.4, 1.5, 0.9];
        for j in 0..clusters.n_clusters() {
            let fast = case_deleted_fit(&model, &scale, &clusters, &y, j).unwrap();
            let slow = refit_without(&model, &y, clusters.members(j)).unwrap();
            assert!((&fast.coefficients - &slow.coefficients).amax() < 1e-10);
        }
        // A strict subset of a cluster.
        let fast = subset_deleted_fit(&model, &scale, &clusters, &y, &[4]).unwrap();
        let slow = refit_without(&model, &y, &[4]).unwrap();
        assert!((&fast.coefficients - &slow.coefficients).amax() < 1e-10);
    }

    #[test]
    fn zero_residual_deletion_is_identity() {
        let model = example().to_model().unwrap();
        let scale = compute_scale(&model).unwrap();
        let clusters = detect_clusters(&model);
        let y = [2.0, 2.0, 2.0];
        let full = coefficient_mean(&model, &scale, &y).unwrap();
        let del = case_deleted_fit(&model, &scale, &clusters, &y, 1).unwrap();
        assert!((del.coefficients - full).amax() < 1e-14);
    }

    #[test]
    fn deletion_difference_identity() {
        let p = OneWayProblem {
            sizes: vec![2, 3, 1],
            noise_variances: vec![1.5; 3],
            sigma2: 0.7,
            known_mean: None,
        };
        let model = p.to_model().unwrap();
        let scale = compute_scale(&model).unwrap();
        let clusters = detect_clusters(&model);
        let y = [1.0, 2.0, -0.5, 0.0, 0.4, 3.0];
        let fitted = crate::decompose::fitted_values(&model, &scale, &y).unwrap();
        let j = 1;
        let members = clusters.members(j);
        let nj = members.len() as f64;
        let ybar = members.iter().map(|&r| y[r]).sum::<f64>() / nj;
        let rj = members[0];
        let wjj = weight_row(&model, &scale, rj).unwrap().weights[rj];
        let pooling_j = 1.0 - nj * wjj;
        let del = case_deleted_fit(&model, &scale, &clusters, &y, j).unwrap();
        for i in 0..model.n_obs() {
            let wij = weight_row(&model, &scale, i).unwrap().weights[rj];
            let expected = wij / pooling_j * nj * (fitted[rj] - ybar);
            assert!((del.fitted[i] - fitted[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_without_random_effects() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 3.0, 1.0, -2.0]);
        let model = validate_spec(ModelSpec::fixed_only(x, vec![1.0, 2.0, 1.0, 0.5])).unwrap();
        let hd = hat_decomposition(&model).unwrap();
        assert_eq!(hd.h2.amax(), 0.0);
        assert!((&hd.weights - &hd.h).amax() < 1e-12);
        assert!(hd.idempotence_residual() < 1e-12);
    }

    #[test]
    fn hat_identity_one_way() {
        let p = OneWayProblem {
            sizes: vec![2, 1, 4],
            noise_variances: vec![1.0, 0.3, 2.0],
            sigma2: 1.4,
            known_mean: None,
        };
        let hd = hat_decomposition(&p.to_model().unwrap()).unwrap();
        assert!(hd.identity_residual() < 1e-10);
        assert!(hd.idempotence_residual() < 1e-10);
        assert!(hd.phi_tilde_residual() < 1e-10);
        let ones = DVector::from_element(7, 1.0);
        assert!((&hd.h * &ones - ones).amax() < 1e-12);
    }
}
