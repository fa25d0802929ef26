//! Influence metrics expressed through borrowing factors: average Cook's
//! distance per cluster, RVSI, Peña's S_i, and impact summaries of a
//! designated influential set.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::decompose::{coefficient_mean, PosteriorScale};
use crate::error::{Error, Result};
use crate::model::{ClusterIndex, ValidatedModel};
use crate::par::map_indexed;
use crate::partition::RelationshipPartition;

/// How the residual scale `s^2 = e'e / df` picks its degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualDf {
    /// `N - P`.
    Classical,
    /// `N - tr(W)`, used when `P >= N`.
    Effective,
}

/// Residuals, leverages and the residual scale shared by all metrics.
#[derive(Debug, Clone)]
pub struct InfluenceContext<'a> {
    model: &'a ValidatedModel,
    scale: &'a PosteriorScale,
    clusters: &'a ClusterIndex,
    y: Vec<f64>,
    fitted: Vec<f64>,
    residuals: Vec<f64>,
    /// `x_j' V x_j / phi_j^2` per cluster.
    leverage: Vec<f64>,
    s2: f64,
    df: ResidualDf,
}

impl<'a> InfluenceContext<'a> {
    pub fn new(
        model: &'a ValidatedModel,
        scale: &'a PosteriorScale,
        clusters: &'a ClusterIndex,
        y: &[f64],
    ) -> Result<Self> {
        let n = model.n_obs();
        let beta = coefficient_mean(model, scale, y)?;
        let fitted: Vec<f64> = (0..n).map(|i| model.row_dense(i).dot(&beta)).collect();
        let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let leverage: Vec<f64> = (0..clusters.n_clusters())
            .map(|c| {
                let r = clusters.representative(c);
                let x = model.row_dense(r);
                x.dot(&scale.apply(&x)) / model.noise_variances()[r]
            })
            .collect();
        let p = model.n_coef();
        let (dof, df) = if n > p {
            ((n - p) as f64, ResidualDf::Classical)
        } else {
            let trace: f64 = (0..n).map(|i| leverage[clusters.cluster_of(i)]).sum();
            (n as f64 - trace, ResidualDf::Effective)
        };
        let sse: f64 = residuals.iter().map(|e| e * e).sum();
        Ok(Self {
            model,
            scale,
            clusters,
            y: y.to_vec(),
            fitted,
            residuals,
            leverage,
            s2: sse / dof,
            df,
        })
    }

    pub fn fitted(&self) -> &[f64] {
        &self.fitted
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    pub fn residual_df(&self) -> ResidualDf {
        self.df
    }

    /// `w_jj` for cluster `j`.
    pub fn leverage(&self, j: usize) -> f64 {
        self.leverage[j]
    }

    /// Column of `W` for any member of cluster `j`: `X V x_j / phi_j^2`.
    pub fn weight_column(&self, j: usize) -> Vec<f64> {
        let r = self.clusters.representative(j);
        let z = self.scale.apply(&self.model.row_dense(r)) / self.model.noise_variances()[r];
        (0..self.model.n_obs())
            .map(|i| {
                let (cols, vals) = self.model.row(i);
                cols.iter().zip(vals).map(|(&c, &v)| v * z[c]).sum()
            })
            .collect()
    }

    fn cluster_mean_residual_sq(&self, j: usize) -> f64 {
        let m = self.clusters.members(j);
        m.iter().map(|&r| self.residuals[r].powi(2)).sum::<f64>() / m.len() as f64
    }

    /// `D_j = (ebar_j^2 / (P s^2)) w_jj / (1 - w_jj)^2`.
    pub fn avg_cooks(&self, j: usize) -> Result<f64> {
        let w = self.leverage[j];
        if (1.0 - w).abs() < 1e-10 {
            return Err(Error::LeverageOne { cluster: j });
        }
        let e2 = self.cluster_mean_residual_sq(j);
        if e2 == 0.0 {
            return Ok(0.0);
        }
        Ok(e2 / (self.model.n_coef() as f64 * self.s2) * w / (1.0 - w).powi(2))
    }

    /// `(a_{-j} - a)^2` for target `i` via
    /// `n_j^2 w_ij^2 (Yhat_j - Ybar_j)^2 / b_{jL_j}^2`.
    pub fn rvsi(&self, j: usize, i: usize) -> Result<f64> {
        let n = self.model.n_obs();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if j >= self.clusters.n_clusters() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.clusters.n_clusters(),
            });
        }
        let r = self.clusters.representative(j);
        let z = self.scale.apply(&self.model.row_dense(r)) / self.model.noise_variances()[r];
        let w_ij = self.model.row_dense(i).dot(&z);
        self.rvsi_with_weight(j, w_ij)
    }

    fn rvsi_with_weight(&self, j: usize, w_ij: f64) -> Result<f64> {
        let members = self.clusters.members(j);
        let nj = members.len() as f64;
        let pooling = 1.0 - nj * self.leverage[j];
        if pooling.abs() <= 1e-12 {
            return Err(Error::DegeneratePooling { cluster: j });
        }
        let ybar = members.iter().map(|&r| self.y[r]).sum::<f64>() / nj;
        let resid = self.fitted[members[0]] - ybar;
        let pssbf = nj * w_ij * w_ij;
        Ok(pssbf / (pooling * pooling) * nj * resid * resid)
    }

    /// RVSI of cluster `j` on every target.
    pub fn rvsi_column(&self, j: usize) -> Result<Vec<f64>> {
        let col = self.weight_column(j);
        col.into_iter()
            .map(|w| self.rvsi_with_weight(j, w))
            .collect()
    }

    /// `S_i = sum_j n_j w_ij^2 / (w_ii w_jj) D_j`, normalised by `P s^2 w_ii`.
    pub fn pena_si(&self, i: usize, cooks: &[f64]) -> Result<f64> {
        let n = self.model.n_obs();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if cooks.len() != self.clusters.n_clusters() {
            return Err(Error::Dimension(format!(
                "{} Cook's distances for {} clusters",
                cooks.len(),
                self.clusters.n_clusters()
            )));
        }
        let ci = self.clusters.cluster_of(i);
        let w_ii = self.leverage[ci];
        if w_ii <= 0.0 {
            return Err(Error::LeverageZero { index: i });
        }
        // Row i of W via x_i' V, one solve.
        let vx = self.scale.apply(&self.model.row_dense(i));
        let mut total = 0.0;
        for (j, &d) in cooks.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let r = self.clusters.representative(j);
            let (cols, vals) = self.model.row(r);
            let dot: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * vx[c]).sum();
            let w_ij = dot / self.model.noise_variances()[r];
            let nj = self.clusters.size(j) as f64;
            total += nj * w_ij * w_ij / (w_ii * self.leverage[j]) * d;
        }
        Ok(total)
    }
}

/// Average Cook's distance for every cluster.
pub fn avg_cooks_distance(ctx: &InfluenceContext<'_>) -> Result<Vec<f64>> {
    (0..ctx.clusters.n_clusters())
        .map(|j| ctx.avg_cooks(j))
        .collect()
}

/// Peña's S_i for one observation.
pub fn pena_si(ctx: &InfluenceContext<'_>, i: usize) -> Result<f64> {
    let cooks = avg_cooks_distance(ctx)?;
    ctx.pena_si(i, &cooks)
}

/// RVSI of lender cluster `j` on target `i`.
pub fn rvsi(ctx: &InfluenceContext<'_>, j: usize, i: usize) -> Result<f64> {
    ctx.rvsi(j, i)
}

/// RVSI of one cluster on every target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvsiColumn {
    pub cluster: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    /// Per-cluster average Cook's distance; `None` where `w_jj = 1`.
    pub avg_cooks: Vec<Option<f64>>,
    pub pena_s: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rvsi: Vec<RvsiColumn>,
    pub residuals: Vec<f64>,
    pub s2: f64,
    pub residual_df: ResidualDf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact: Option<ImpactSummary>,
}

/// Full influence report. RVSI columns are produced for the clusters of
/// `influential` only, since the full table is N x J.
pub fn influence_report(
    ctx: &InfluenceContext<'_>,
    influential: &[usize],
    parallel: bool,
) -> Result<InfluenceReport> {
    let n = ctx.model.n_obs();
    let avg_cooks: Vec<Option<f64>> = (0..ctx.clusters.n_clusters())
        .map(|j| match ctx.avg_cooks(j) {
            Ok(d) => Ok(Some(d)),
            Err(Error::LeverageOne { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let pena_s = if avg_cooks.iter().all(Option::is_some) {
        let cooks: Vec<f64> = avg_cooks.iter().map(|d| d.unwrap()).collect();
        let per_cluster = map_indexed(ctx.clusters.n_clusters(), parallel, |c| {
            ctx.pena_si(ctx.clusters.representative(c), &cooks).ok()
        });
        (0..n)
            .map(|i| per_cluster[ctx.clusters.cluster_of(i)])
            .collect()
    } else {
        vec![None; n]
    };
    let mut clusters: Vec<usize> = Vec::new();
    for &p in influential {
        if p >= n {
            return Err(Error::IndexOutOfRange { index: p, len: n });
        }
        let c = ctx.clusters.cluster_of(p);
        if !clusters.contains(&c) {
            clusters.push(c);
        }
    }
    clusters.sort_unstable();
    let rvsi = clusters
        .into_iter()
        .map(|c| {
            Ok(RvsiColumn {
                cluster: c,
                values: ctx.rvsi_column(c)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(InfluenceReport {
        avg_cooks,
        pena_s,
        rvsi,
        residuals: ctx.residuals.clone(),
        s2: ctx.s2,
        residual_df: ctx.df,
        impact: None,
    })
}

/// Linear-interpolation quantile of sorted data, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            min: v.first().copied().unwrap_or(0.0),
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v.last().copied().unwrap_or(0.0),
        }
    }
}

/// Absolute weight placed on an influential set, per relationship group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactSummary {
    pub influential: Vec<usize>,
    /// `"borrower"` followed by the partition labels.
    pub labels: Vec<String>,
    pub stats: Vec<BoxStats>,
    /// For each group, `(estimate, sum |w_ij|)` over estimates that have at
    /// least one influential observation in that group.
    pub values: Vec<Vec<(usize, f64)>>,
}

impl ImpactSummary {
    pub fn group(&self, label: &str) -> Option<&BoxStats> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|g| &self.stats[g])
    }
}

/// For every estimate `i` and relationship group, the total `|w_ij|` over
/// influential `j` in that group. Estimates with no influential observation
/// in a group do not contribute to that group's statistics.
pub fn impact_summary(
    model: &ValidatedModel,
    scale: &PosteriorScale,
    clusters: &ClusterIndex,
    partition: &RelationshipPartition,
    influential: &[usize],
    parallel: bool,
) -> Result<ImpactSummary> {
    let n = model.n_obs();
    let mut points = influential.to_vec();
    points.sort_unstable();
    points.dedup();
    if let Some(&bad) = points.iter().find(|&&p| p >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    // One solve per influential point: w_ij = x_i' (V x_j / phi_j^2).
    let z: Vec<DVector<f64>> = map_indexed(points.len(), parallel, |k| {
        let j = points[k];
        scale.apply(&model.row_dense(j)) / model.noise_variances()[j]
    });
    let k = partition.n_groups() + 1;
    let per_row: Vec<Vec<f64>> = map_indexed(n, parallel, |i| {
        let x = model.row_dense(i);
        let mut sums = vec![f64::NAN; k];
        for (idx, &j) in points.iter().enumerate() {
            let g = if clusters.cluster_of(i) == clusters.cluster_of(j) {
                0
            } else {
                partition.group_of(i, j) + 1
            };
            let w = x.dot(&z[idx]).abs();
            sums[g] = if sums[g].is_nan() { w } else { sums[g] + w };
        }
        sums
    });
    let mut values = vec![Vec::new(); k];
    for (i, sums) in per_row.iter().enumerate() {
        for (g, &s) in sums.iter().enumerate() {
            if !s.is_nan() {
                values[g].push((i, s));
            }
        }
    }
    let stats = values
        .iter()
        .map(|v| BoxStats::from_values(&v.iter().map(|p| p.1).collect::<Vec<_>>()))
        .collect();
    let mut labels = vec!["borrower".to_string()];
    labels.extend(partition.labels().iter().cloned());
    Ok(ImpactSummary {
        influential: points,
        labels,
        stats,
        values,
    })
}
