//! Restricted maximum likelihood for the variance parameters.
//!
//! With a flat prior on the fixed effects the restricted log-likelihood is,
//! up to a constant,
//!
//! ```text
//! -1/2 [ log|Phi| - log|Sigma^{-1}| + log|V^{-1}| + y' Phi^{-1} (y - X b_hat) ]
//! ```
//!
//! where `b_hat` is the joint posterior mode. Variances are optimised on the
//! log scale and correlations on the logit scale.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{CarParams, CovarianceStructure, IidBlock, SpaceTimeParams};
use crate::error::{Error, Result};
use crate::model::{posterior_precision, ValidatedModel};
use crate::optim::{nelder_mead, SimplexOptions};

/// Estimates closer than this to 0 (variances) or 1 (correlations) are
/// flagged.
pub const BOUNDARY_TOL: f64 = 1e-6;

const LOG_VAR_FLOOR: f64 = -40.0;
const LOG_VAR_CEIL: f64 = 40.0;

#[derive(Debug, Clone)]
pub struct RemlOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Extra simplex restarts from the incumbent.
    pub restarts: usize,
    pub fit_phi: bool,
    /// Fit the random-effect variances; when false they stay at the structure's values.
    pub fit_sigma: bool,
    /// Fit correlation parameters; when false they stay at the structure's values.
    pub fit_rho: bool,
    /// Start variances at half the sample variance of `y` instead of the
    /// values in the model.
    pub start_from_data: bool,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-9,
            restarts: 4,
            fit_phi: true,
            fit_sigma: true,
            fit_rho: true,
            start_from_data: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceWarning {
    Boundary { parameter: String, value: f64 },
    NonConvergence { iterations: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimates {
    /// Named fitted parameters in optimisation order.
    pub params: Vec<(String, f64)>,
    /// Multiplier applied to the model's base noise variances.
    pub phi_scale: f64,
    pub structure: CovarianceStructure,
    pub log_restricted_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<VarianceWarning>,
}

impl VarianceEstimates {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|p| p.1)
    }

    pub fn has_boundary_warning(&self) -> bool {
        self.warnings
            .iter()
            .any(|w| matches!(w, VarianceWarning::Boundary { .. }))
    }

    /// The model with the fitted variances plugged in.
    pub fn apply(&self, model: &ValidatedModel) -> Result<ValidatedModel> {
        let noise = model
            .noise_variances()
            .iter()
            .map(|v| v * self.phi_scale)
            .collect();
        model.with_variances(noise, self.structure.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Phi,
    Block(usize),
    Sigma,
    RhoSpace,
    RhoTime,
}

impl Slot {
    fn name(self) -> String {
        match self {
            Slot::Phi => "phi2".into(),
            Slot::Block(k) => format!("sigma2[{k}]"),
            Slot::Sigma => "sigma2".into(),
            Slot::RhoSpace => "rho_space".into(),
            Slot::RhoTime => "rho_time".into(),
        }
    }

    fn is_rho(self) -> bool {
        matches!(self, Slot::RhoSpace | Slot::RhoTime)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

struct Problem<'a> {
    model: &'a ValidatedModel,
    y: &'a [f64],
    slots: Vec<Slot>,
    base: CovarianceStructure,
}

impl Problem<'_> {
    fn decode(&self, theta: &[f64]) -> (f64, CovarianceStructure) {
        let mut phi = 1.0;
        let mut s = self.base.clone();
        for (&slot, &t) in self.slots.iter().zip(theta) {
            let var = t.clamp(LOG_VAR_FLOOR, LOG_VAR_CEIL).exp();
            match (slot, &mut s) {
                (Slot::Phi, _) => phi = var,
                (Slot::Block(k), CovarianceStructure::IidBlocks(b)) => b[k].sigma2 = var,
                (Slot::Sigma, CovarianceStructure::Car(p)) => p.sigma2 = var,
                (Slot::Sigma, CovarianceStructure::SpaceTimeAr(p)) => p.sigma2 = var,
                (Slot::RhoSpace, CovarianceStructure::Car(p)) => p.rho = expit(t),
                (Slot::RhoSpace, CovarianceStructure::SpaceTimeAr(p)) => p.rho_space = expit(t),
                (Slot::RhoTime, CovarianceStructure::SpaceTimeAr(p)) => p.rho_time = expit(t),
                _ => unreachable!("slot does not match structure"),
            }
        }
        (phi, s)
    }

    fn negative_objective(&self, theta: &[f64]) -> f64 {
        let (phi, s) = self.decode(theta);
        match restricted_loglik_parts(self.model, self.y, phi, &s) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    }
}

fn restricted_loglik_parts(
    model: &ValidatedModel,
    y: &[f64],
    phi_scale: f64,
    structure: &CovarianceStructure,
) -> Result<f64> {
    let n = model.n_obs();
    let p1 = model.n_fixed();
    let noise: Vec<f64> = model
        .noise_variances()
        .iter()
        .map(|v| v * phi_scale)
        .collect();
    let sigma_inv = structure.precision()?;
    let precision = posterior_precision(
        model.design(),
        &noise,
        &DMatrix::zeros(p1, p1),
        sigma_inv.as_csr(),
    );
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let log_det_vinv = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let log_det_sigma_inv = sigma_inv.log_det()?;
    let log_det_phi: f64 = noise.iter().map(|v| v.ln()).sum();

    let mut rhs = nalgebra::DVector::zeros(model.n_coef());
    for (j, row) in model.design().row_iter().enumerate() {
        let s = y[j] / noise[j];
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            rhs[c] += v * s;
        }
    }
    let beta = chol.solve(&rhs);
    let mut quad = 0.0;
    for (j, row) in model.design().row_iter().enumerate() {
        let fit: f64 = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&c, &v)| v * beta[c])
            .sum();
        quad += y[j] * (y[j] - fit) / noise[j];
    }
    let constant = (n - p1) as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(-0.5 * (constant + log_det_phi - log_det_sigma_inv + log_det_vinv + quad))
}

/// Restricted log-likelihood at the model's current variances.
pub fn restricted_log_likelihood(model: &ValidatedModel, y: &[f64]) -> Result<f64> {
    if y.len() != model.n_obs() {
        return Err(Error::Dimension(format!(
            "response has length {}, model has {} observations",
            y.len(),
            model.n_obs()
        )));
    }
    restricted_loglik_parts(model, y, 1.0, &model.spec().random_structure)
}

fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Fit `phi2` (a multiplier on the base noise variances) and the structure's
/// variance and correlation parameters by restricted maximum likelihood.
pub fn fit_variance_reml(
    model: &ValidatedModel,
    y: &[f64],
    opts: &RemlOptions,
) -> Result<VarianceEstimates> {
    if y.len() != model.n_obs() {
        return Err(Error::Dimension(format!(
            "response has length {}, model has {} observations",
            y.len(),
            model.n_obs()
        )));
    }
    let base = model.spec().random_structure.clone();
    let mut slots = Vec::new();
    if opts.fit_phi {
        slots.push(Slot::Phi);
    }
    match &base {
        CovarianceStructure::IidBlocks(b) if opts.fit_sigma => {
            slots.extend((0..b.len()).map(Slot::Block))
        }
        CovarianceStructure::IidBlocks(_) => {}
        CovarianceStructure::DensePrecision(_) => {}
        CovarianceStructure::Car(_) => {
            if opts.fit_sigma {
                slots.push(Slot::Sigma);
            }
            if opts.fit_rho {
                slots.push(Slot::RhoSpace);
            }
        }
        CovarianceStructure::SpaceTimeAr(_) => {
            if opts.fit_sigma {
                slots.push(Slot::Sigma);
            }
            if opts.fit_rho {
                slots.push(Slot::RhoSpace);
                slots.push(Slot::RhoTime);
            }
        }
    }
    if slots.len() > 4 {
        return Err(Error::Unsupported(format!(
            "REML supports at most 4 free parameters, structure has {}",
            slots.len()
        )));
    }
    let data_var = (0.5 * sample_variance(y)).max(1e-8);
    let mean_noise = model.noise_variances().iter().sum::<f64>() / model.n_obs() as f64;
    let start: Vec<f64> = slots
        .iter()
        .map(|&slot| {
            let current = match (slot, &base) {
                (Slot::Phi, _) => {
                    if opts.start_from_data {
                        data_var / mean_noise
                    } else {
                        1.0
                    }
                }
                (Slot::Block(k), CovarianceStructure::IidBlocks(b)) => b[k].sigma2,
                (Slot::Sigma, CovarianceStructure::Car(p)) => p.sigma2,
                (Slot::Sigma, CovarianceStructure::SpaceTimeAr(p)) => p.sigma2,
                (Slot::RhoSpace, CovarianceStructure::Car(p)) => p.rho,
                (Slot::RhoSpace, CovarianceStructure::SpaceTimeAr(p)) => p.rho_space,
                (Slot::RhoTime, CovarianceStructure::SpaceTimeAr(p)) => p.rho_time,
                _ => unreachable!(),
            };
            if slot.is_rho() {
                logit(current.clamp(0.05, 0.95))
            } else if opts.start_from_data && slot != Slot::Phi {
                data_var.ln()
            } else {
                current.max(1e-8).ln()
            }
        })
        .collect();

    let problem = Problem {
        model,
        y,
        slots: slots.clone(),
        base,
    };
    let simplex = SimplexOptions {
        max_iter: opts.max_iter,
        rel_tol: opts.rel_tol,
        x_tol: 1e-7,
        initial_step: 0.5,
    };
    let objective = |t: &[f64]| problem.negative_objective(t);
    let mut best = nelder_mead(objective, &start, &simplex);
    let mut iterations = best.iterations;
    for _ in 0..opts.restarts {
        let mut again = simplex.clone();
        again.initial_step = 0.1;
        let next = nelder_mead(objective, &best.x, &again);
        iterations += next.iterations;
        let gain = best.f - next.f;
        let better = next.f < best.f;
        let converged = next.converged;
        if better {
            best = next;
        }
        best.converged = converged;
        if gain.abs() <= opts.rel_tol * (best.f.abs() + opts.rel_tol) && converged {
            break;
        }
    }
    if !best.f.is_finite() {
        return Err(Error::NotPositiveDefinite(
            "restricted likelihood is not finite anywhere the optimiser looked".into(),
        ));
    }

    let (phi_scale, structure) = problem.decode(&best.x);
    let mut params = Vec::with_capacity(slots.len());
    let mut warnings = Vec::new();
    for (&slot, &t) in slots.iter().zip(&best.x) {
        let value = if slot.is_rho() {
            expit(t)
        } else {
            t.clamp(LOG_VAR_FLOOR, LOG_VAR_CEIL).exp()
        };
        let value = if slot == Slot::Phi {
            value * mean_noise
        } else {
            value
        };
        let near = if slot.is_rho() {
            value < BOUNDARY_TOL || 1.0 - value < BOUNDARY_TOL
        } else {
            value < BOUNDARY_TOL
        };
        if near {
            warnings.push(VarianceWarning::Boundary {
                parameter: slot.name(),
                value,
            });
        }
        params.push((slot.name(), value));
    }
    if !best.converged {
        warnings.push(VarianceWarning::NonConvergence { iterations });
    }
    Ok(VarianceEstimates {
        params,
        phi_scale,
        structure,
        log_restricted_likelihood: -best.f,
        iterations,
        converged: best.converged,
        warnings,
    })
}

/// Convenience: a one-block iid structure with the given variance.
pub fn iid_structure(size: usize, sigma2: f64) -> CovarianceStructure {
    CovarianceStructure::IidBlocks(vec![IidBlock { size, sigma2 }])
}

/// Replace the variance of a CAR or space-time structure.
pub fn with_sigma2(structure: &CovarianceStructure, sigma2: f64) -> CovarianceStructure {
    match structure {
        CovarianceStructure::IidBlocks(b) => CovarianceStructure::IidBlocks(
            b.iter()
                .map(|x| IidBlock {
                    size: x.size,
                    sigma2,
                })
                .collect(),
        ),
        CovarianceStructure::Car(p) => CovarianceStructure::Car(CarParams {
            sigma2,
            rho: p.rho,
            adjacency: Arc::clone(&p.adjacency),
        }),
        CovarianceStructure::SpaceTimeAr(p) => CovarianceStructure::SpaceTimeAr(SpaceTimeParams {
            sigma2,
            ..p.clone()
        }),
        other => other.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::OneWayProblem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn balanced(j: usize, n: usize, seed: u64, sigma: f64) -> (ValidatedModel, Vec<f64>) {
        let model = OneWayProblem {
            sizes: vec![n; j],
            noise_variances: vec![1.0; j],
            sigma2: 1.0,
            known_mean: None,
        }
        .to_model()
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::with_capacity(j * n);
        for _ in 0..j {
            let a: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
            for _ in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                y.push(2.0 + a + e);
            }
        }
        (model, y)
    }

    fn anova(y: &[f64], j: usize, n: usize) -> (f64, f64) {
        let grand = y.iter().sum::<f64>() / y.len() as f64;
        let means: Vec<f64> = (0..j)
            .map(|c| y[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let msb =
            n as f64 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (j - 1) as f64;
        let msw = (0..j)
            .map(|c| {
                y[c * n..(c + 1) * n]
                    .iter()
                    .map(|v| (v - means[c]).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (j * (n - 1)) as f64;
        (msw, (msb - msw) / n as f64)
    }

    #[test]
    fn balanced_matches_anova() {
        let (model, y) = balanced(30, 10, 7, 1.0);
        let fit = fit_variance_reml(&model, &y, &RemlOptions::default()).unwrap();
        let (phi2, sigma2) = anova(&y, 30, 10);
        assert!(sigma2 > 0.0);
        let got_s = fit.get("sigma2[0]").unwrap();
        let got_p = fit.get("phi2").unwrap();
        assert!(
            ((got_s - sigma2) / sigma2).abs() < 1e-4,
            "{got_s} vs {sigma2}"
        );
        assert!(((got_p - phi2) / phi2).abs() < 1e-4, "{got_p} vs {phi2}");
        assert!(fit.converged);
    }

    #[test]
    fn equal_means_hit_boundary() {
        // Identical cluster means, within-cluster spread 1.
        let j = 20;
        let n = 5;
        let model = OneWayProblem {
            sizes: vec![n; j],
            noise_variances: vec![1.0; j],
            sigma2: 1.0,
            known_mean: None,
        }
        .to_model()
        .unwrap();
        let pattern = [-1.2649, -0.6325, 0.0, 0.6325, 1.2649];
        let y: Vec<f64> = (0..j)
            .flat_map(|_| pattern.iter().map(|v| 3.0 + v))
            .collect();
        let fit = fit_variance_reml(&model, &y, &RemlOptions::default()).unwrap();
        assert!(fit.get("sigma2[0]").unwrap() < BOUNDARY_TOL);
        assert!(fit.has_boundary_warning());
    }

    #[test]
    fn permutation_invariant_objective() {
        let (model, y) = balanced(8, 4, 3, 0.8);
        let ll = restricted_log_likelihood(&model, &y).unwrap();
        let mut perm: Vec<usize> = (0..y.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = model.select_rows(&perm).unwrap();
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let llp = restricted_log_likelihood(&permuted, &yp).unwrap();
        assert!((ll - llp).abs() < 1e-10);
    }

    #[test]
    fn simulation_recovers_truth() {
        let (model, y) = balanced(50, 20, 2024, 1.0);
        let fit = fit_variance_reml(&model, &y, &RemlOptions::default()).unwrap();
        // Truth is sigma = phi = 1 on the standard-deviation scale.
        assert!((fit.get("sigma2[0]").unwrap().sqrt() - 1.0).abs() < 0.15);
        assert!((fit.get("phi2").unwrap().sqrt() - 1.0).abs() < 0.15);
    }

    #[test]
    fn iteration_cap_flags_nonconvergence() {
        let (model, y) = balanced(10, 5, 1, 1.0);
        let opts = RemlOptions {
            max_iter: 2,
            restarts: 0,
            ..Default::default()
        };
        let fit = fit_variance_reml(&model, &y, &opts).unwrap();
        assert!(!fit.converged);
        assert!(fit
            .warnings
            .iter()
            .any(|w| matches!(w, VarianceWarning::NonConvergence { .. })));
    }
}
