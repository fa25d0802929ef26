//! End-to-end run: variance fitting, decomposition, influence and report.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::covariance::CovarianceStructure;
use crate::decompose::{
    compute_scale, decompose_all, fitted_values_for, weight_row_for, DecomposeOptions,
    PosteriorScale, Target,
};
use crate::error::{Error, Result};
use crate::influence::{impact_summary, influence_report, InfluenceContext};
use crate::io::bundle::{ProblemBundle, StructureKind};
use crate::io::report::{
    Covariate, FitSummary, GroupValues, Metadata, Record, Report, SCHEMA_VERSION,
};
use crate::io::smooth::{default_grid, GridSection};
use crate::model::{detect_clusters, validate_spec, ClusterIndex, ValidatedModel};
use crate::partition::RelationshipPartition;
use crate::reml::{fit_variance_reml, RemlOptions, VarianceEstimates};

/// Three record fields to smooth: `x`, `y` and the smoothed `value`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmoothRequest {
    pub x: String,
    pub y: String,
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub keep_full: bool,
    pub parallel: bool,
    pub influence: bool,
    /// Observation indices for RVSI columns and the impact summary.
    pub influential: Vec<usize>,
    pub smooth: Option<SmoothRequest>,
    pub reml: RemlOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            keep_full: false,
            parallel: true,
            influence: false,
            influential: Vec::new(),
            smooth: None,
            reml: RemlOptions::default(),
        }
    }
}

pub struct PipelineOutput {
    pub report: Report,
    /// The model at the variances actually used.
    pub model: ValidatedModel,
    pub scale: PosteriorScale,
    pub clusters: ClusterIndex,
    pub partition: RelationshipPartition,
    pub weights: Option<DMatrix<f64>>,
    pub variance: Option<VarianceEstimates>,
    pub target: Target,
}

impl PipelineOutput {
    /// Row `i` of the (possibly conditioned) weight matrix.
    pub fn weight_row(&self, i: usize) -> Result<Vec<f64>> {
        let n = self.model.n_obs();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if let Some(w) = &self.weights {
            return Ok(w.row(i).iter().copied().collect());
        }
        Ok(weight_row_for(&self.model, &self.scale, i, &self.target)?.weights)
    }
}

/// Fit variances where the spec asks for it.
pub fn fit_variances(
    bundle: &ProblemBundle,
    opts: &RemlOptions,
) -> Result<(ValidatedModel, Option<VarianceEstimates>)> {
    let model = validate_spec(bundle.spec.clone())?;
    if !bundle.fit.any() {
        return Ok((model, None));
    }
    let opts = RemlOptions {
        fit_phi: bundle.fit.phi,
        fit_sigma: bundle.fit.sigma,
        fit_rho: bundle.fit.rho,
        ..opts.clone()
    };
    let est = fit_variance_reml(&model, &bundle.response, &opts)?;
    for w in &est.warnings {
        log::warn!("variance fit: {w:?}");
    }
    let fitted = est.apply(&model)?;
    Ok((fitted, Some(est)))
}

/// Standard deviations and correlations keyed as in the spec.
fn variance_metadata(bundle: &ProblemBundle, model: &ValidatedModel) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    // Noise is base * phi^2; recover phi from any observation.
    let base = match &bundle.pseudo {
        Some(p) => p.pseudo_variance[0],
        None => 1.0,
    };
    out.insert(
        "phi".to_string(),
        (model.noise_variances()[0] / base).sqrt(),
    );
    match &model.spec().random_structure {
        CovarianceStructure::IidBlocks(blocks) => {
            let names = bundle
                .document
                .random
                .iter()
                .filter(|t| t.structure == StructureKind::Iid)
                .filter_map(|t| t.column.clone());
            for (b, name) in blocks.iter().zip(names) {
                out.insert(format!("sigma[{name}]"), b.sigma2.sqrt());
            }
        }
        CovarianceStructure::Car(p) => {
            out.insert("sigma".into(), p.sigma2.sqrt());
            out.insert("rho_s".into(), p.rho);
        }
        CovarianceStructure::SpaceTimeAr(p) => {
            out.insert("sigma".into(), p.sigma2.sqrt());
            out.insert("rho_s".into(), p.rho_space);
            out.insert("rho_t".into(), p.rho_time);
        }
        CovarianceStructure::DensePrecision(_) => {}
    }
    out
}

/// Look up a numeric record field by name: a top-level metric, a covariate,
/// or `borrowing:<group>`, `pssbf:<group>`, `size:<group>`.
pub fn record_value(record: &Record, name: &str) -> Option<f64> {
    match name {
        "shrinkage" => return Some(record.shrinkage),
        "pooling" => return Some(record.pooling),
        "ssbf" => return Some(record.ssbf),
        "fitted" => return Some(record.fitted),
        "cluster_size" => return Some(record.cluster_size as f64),
        _ => {}
    }
    if let Some((field, group)) = name.split_once(':') {
        let g = record.groups.get(group)?;
        return match field {
            "borrowing" => Some(g.borrowing),
            "pssbf" => Some(g.pssbf),
            "size" => Some(g.size as f64),
            _ => None,
        };
    }
    match record.covariates.get(name)? {
        Covariate::Number(v) => Some(*v),
        Covariate::Text(_) => None,
    }
}

/// Smooth three record fields onto the default grid.
pub fn smooth_records(records: &[Record], request: &SmoothRequest) -> Result<GridSection> {
    let column = |name: &str| -> Result<Vec<f64>> {
        records
            .iter()
            .map(|r| record_value(r, name).ok_or_else(|| Error::UnknownColumn(name.to_string())))
            .collect()
    };
    default_grid(
        [&request.x, &request.y, &request.value],
        &column(&request.x)?,
        &column(&request.y)?,
        &column(&request.value)?,
    )
}

/// Run the whole pipeline on a bundle.
pub fn run(bundle: &ProblemBundle, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let (model, variance) = fit_variances(bundle, &opts.reml)?;
    let scale = compute_scale(&model)?;
    let clusters = detect_clusters(&model);
    let partition = RelationshipPartition::new(&clusters, bundle.rules.clone())?;
    let dopts = DecomposeOptions {
        keep_full: opts.keep_full,
        parallel: opts.parallel,
        target: bundle.target.clone(),
    };
    let decomposition = decompose_all(&model, &scale, &clusters, &partition, &dopts)?;
    let fitted = fitted_values_for(&model, &scale, &bundle.response, &bundle.target)?;

    let echo: Vec<(String, Vec<Covariate>)> = bundle
        .echo_columns
        .iter()
        .map(|c| {
            let values = if bundle.table.is_numeric(c)? {
                bundle
                    .table
                    .numeric(c)?
                    .into_iter()
                    .map(Covariate::Number)
                    .collect()
            } else {
                bundle
                    .table
                    .text(c)?
                    .into_iter()
                    .map(|s| Covariate::Text(s.to_string()))
                    .collect()
            };
            Ok((c.clone(), values))
        })
        .collect::<Result<_>>()?;

    let labels = partition.labels();
    let records: Vec<Record> = decomposition
        .summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cluster = clusters.cluster_of(i);
            Record {
                id: bundle.ids[i].clone(),
                cluster,
                cluster_size: clusters.size(cluster),
                shrinkage: s.shrinkage,
                pooling: s.pooling,
                ssbf: s.ssbf,
                groups: labels
                    .iter()
                    .enumerate()
                    .map(|(g, l)| {
                        (
                            l.clone(),
                            GroupValues {
                                borrowing: s.group_borrowing[g],
                                pssbf: s.group_pssbf[g],
                                size: s.group_sizes[g],
                            },
                        )
                    })
                    .collect(),
                fitted: fitted[i],
                covariates: echo
                    .iter()
                    .map(|(c, v)| (c.clone(), v[i].clone()))
                    .collect(),
            }
        })
        .collect();

    let influence = if opts.influence || !opts.influential.is_empty() {
        let ctx = InfluenceContext::new(&model, &scale, &clusters, &bundle.response)?;
        let mut rep = influence_report(&ctx, &opts.influential, opts.parallel)?;
        if !opts.influential.is_empty() {
            rep.impact = Some(impact_summary(
                &model,
                &scale,
                &clusters,
                &partition,
                &opts.influential,
                opts.parallel,
            )?);
        }
        Some(rep)
    } else {
        None
    };
    let grid = opts
        .smooth
        .as_ref()
        .map(|req| smooth_records(&records, req))
        .transpose()?;

    let report = Report {
        schema_version: SCHEMA_VERSION,
        metadata: Metadata {
            response: bundle.document.response.clone(),
            n_obs: model.n_obs(),
            n_clusters: clusters.n_clusters(),
            fixed_names: bundle.fixed_names.clone(),
            n_random: model.n_random(),
            variance: variance_metadata(bundle, &model),
            variance_mode: bundle
                .pseudo
                .as_ref()
                .map(|_| bundle.document.variance_mode),
            variance_fit: variance.as_ref().map(|v| FitSummary {
                log_restricted_likelihood: v.log_restricted_likelihood,
                iterations: v.iterations,
                converged: v.converged,
                warnings: v.warnings.clone(),
            }),
            rules: bundle.document.relationship_rules.clone(),
            group_labels: labels.to_vec(),
            condition_on: bundle.document.condition_on.clone(),
        },
        records,
        influence,
        grid,
    };
    Ok(PipelineOutput {
        report,
        model,
        scale,
        clusters,
        partition,
        weights: decomposition.weights,
        variance,
        target: bundle.target.clone(),
    })
}
