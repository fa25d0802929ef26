//! Seeded random model generators for property tests and benchmarks.

use std::sync::Arc;

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance::{Adjacency, CarParams, CovarianceStructure, IidBlock, SpaceTimeParams};
use crate::error::Result;
use crate::model::{validate_spec, ModelSpec, ValidatedModel};
use crate::partition::{Bins, RelationshipRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Iid,
    Car,
    SpaceTime,
}

impl SynthKind {
    pub const ALL: [SynthKind; 3] = [SynthKind::Iid, SynthKind::Car, SynthKind::SpaceTime];
}

/// A generated model with a response and the raw labels used to build it.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub model: ValidatedModel,
    pub y: Vec<f64>,
    /// Random-effect unit (group, area, or area x period) of each observation.
    pub unit: Vec<usize>,
    /// Categorical fixed-effect level of each observation.
    pub level: Vec<u32>,
    /// Area and period for spatial kinds.
    pub area: Vec<usize>,
    pub period: Vec<usize>,
    pub adjacency: Option<Arc<Adjacency>>,
}

impl SynthInstance {
    /// Rules mirroring the generating structure: same level, plus same unit
    /// (iid) or graph distance (and lag in time).
    pub fn rules(&self) -> Vec<RelationshipRule> {
        let mut rules = vec![RelationshipRule::ColumnEqual {
            name: "level".into(),
            codes: self.level.clone(),
        }];
        match &self.adjacency {
            None => rules.push(RelationshipRule::ColumnEqual {
                name: "unit".into(),
                codes: self.unit.iter().map(|&u| u as u32).collect(),
            }),
            Some(adj) => {
                rules.push(RelationshipRule::GraphDistance {
                    name: "space".into(),
                    node_of: self.area.clone(),
                    adjacency: Arc::clone(adj),
                    bins: Bins::new(vec![0.0, 1.0, 2.0]).unwrap(),
                });
                if self.period.iter().any(|&t| t > 0) {
                    rules.push(RelationshipRule::Lag {
                        name: "time".into(),
                        values: self.period.iter().map(|&t| t as f64).collect(),
                        bins: Bins::new(vec![0.0, 1.0, 2.0]).unwrap(),
                    });
                }
            }
        }
        rules
    }
}

fn indicator(n: usize, cols: usize, col_of: &[usize]) -> CsrMatrix<f64> {
    let mut coo = CooMatrix::new(n, cols);
    for (i, &c) in col_of.iter().enumerate() {
        coo.push(i, c, 1.0);
    }
    CsrMatrix::from(&coo)
}

/// Random model with at most `max_n` observations.
///
/// Fixed effects: intercept, a reference-coded categorical with 2–3 levels,
/// and 0–2 continuous covariates on a coarse grid so that exact duplicate rows
/// (borrower clusters larger than one) occur. Noise variances come from a
/// small set for the same reason.
pub fn random_instance(seed: u64, kind: SynthKind, max_n: usize) -> Result<SynthInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_n = max_n.max(12);
    let (units, adjacency, structure) = match kind {
        SynthKind::Iid => {
            let g = rng.random_range(3..=20);
            let sigma2 = rng.random_range(0.1..3.0);
            let blocks = vec![IidBlock { size: g, sigma2 }];
            (g, None, CovarianceStructure::IidBlocks(blocks))
        }
        SynthKind::Car => {
            let (r, c) = (rng.random_range(2..=6), rng.random_range(2..=6));
            let adj = Arc::new(Adjacency::grid(r, c));
            let s = CarParams {
                sigma2: rng.random_range(0.1..3.0),
                rho: rng.random_range(0.0..0.95),
                adjacency: Arc::clone(&adj),
            };
            (r * c, Some(adj), CovarianceStructure::Car(s))
        }
        SynthKind::SpaceTime => {
            let (r, c) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let t = rng.random_range(2..=4);
            let adj = Arc::new(Adjacency::grid(r, c));
            let s = SpaceTimeParams {
                sigma2: rng.random_range(0.1..3.0),
                rho_space: rng.random_range(0.0..0.95),
                rho_time: rng.random_range(0.0..0.95),
                adjacency: Arc::clone(&adj),
                periods: t,
            };
            (r * c * t, Some(adj), CovarianceStructure::SpaceTimeAr(s))
        }
    };
    let lo = (units + 2).min(max_n);
    let hi = (units * 6).clamp(lo, max_n);
    let n = rng.random_range(lo..=hi);

    // Every unit appears at least once when n allows, then uniform draws.
    let mut unit: Vec<usize> = (0..n)
        .map(|i| {
            if i < units {
                i
            } else {
                rng.random_range(0..units)
            }
        })
        .collect();
    unit.sort_unstable();
    let levels = rng.random_range(2..=3u32);
    // Shuffled so that every level appears but not tied to the unit order.
    let mut level: Vec<u32> = (0..n)
        .map(|i| {
            if (i as u32) < levels {
                i as u32
            } else {
                rng.random_range(0..levels)
            }
        })
        .collect();
    for i in (1..n).rev() {
        level.swap(i, rng.random_range(0..=i));
    }
    let n_cont = rng.random_range(0..=2);
    let noise_set = [0.5, 1.0, 2.0];
    let noise: Vec<f64> = (0..n)
        .map(|_| noise_set[rng.random_range(0..noise_set.len())])
        .collect();

    let p1 = 1 + (levels as usize - 1) + n_cont;
    let mut x1 = DMatrix::zeros(n, p1);
    // Redraw the covariates until the fixed design has full column rank, so
    // the flat-prior posterior is proper.
    loop {
        for i in 0..n {
            x1[(i, 0)] = 1.0;
            if level[i] > 0 {
                x1[(i, level[i] as usize)] = 1.0;
            }
            for k in 0..n_cont {
                // Grid of 5 values in [-1, 1].
                x1[(i, levels as usize + k)] = rng.random_range(0..5) as f64 * 0.5 - 1.0;
            }
        }
        let gram = x1.transpose() * &x1;
        let eig = gram.symmetric_eigenvalues();
        if eig.min() > 1e-8 * eig.max() {
            break;
        }
    }
    let x2 = indicator(n, units, &unit);
    let (area, period) = match kind {
        SynthKind::Iid => (Vec::new(), Vec::new()),
        SynthKind::Car => (unit.clone(), vec![0; n]),
        SynthKind::SpaceTime => {
            let j = adjacency.as_ref().unwrap().len();
            // Time-major blocks: unit = t * J + area.
            (
                unit.iter().map(|u| u % j).collect(),
                unit.iter().map(|u| u / j).collect(),
            )
        }
    };
    let beta: Vec<f64> = (0..p1)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let effects: Vec<f64> = (0..units)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mut v = effects[unit[i]];
            for k in 0..p1 {
                v += x1[(i, k)] * beta[k];
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            v + noise[i].sqrt() * e
        })
        .collect();
    let model = validate_spec(ModelSpec::new(x1, x2, noise, structure))?;
    Ok(SynthInstance {
        model,
        y,
        unit,
        level,
        area,
        period,
        adjacency,
    })
}

/// Balanced two-factor design: every (county, basement) cell has `n` rows.
/// Fixed effects are two basement intercepts plus a county-level covariate
/// in the last column; random effects are iid county intercepts.
pub fn balanced_two_factor(
    counties: usize,
    n: usize,
    sigma2: f64,
    phi2: f64,
    seed: u64,
) -> Result<SynthInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = counties * 2 * n;
    let u: Vec<f64> = (0..counties).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x1 = DMatrix::zeros(total, 3);
    let mut unit = Vec::with_capacity(total);
    let mut level = Vec::with_capacity(total);
    let mut row = 0;
    for (c, &uc) in u.iter().enumerate() {
        for b in 0..2u32 {
            for _ in 0..n {
                x1[(row, b as usize)] = 1.0;
                x1[(row, 2)] = uc;
                unit.push(c);
                level.push(b);
                row += 1;
            }
        }
    }
    let y: Vec<f64> = (0..total)
        .map(|i| x1[(i, 0)] * 1.0 + x1[(i, 2)] * 0.7 + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let model = validate_spec(ModelSpec::new(
        x1,
        indicator(total, counties, &unit),
        vec![phi2; total],
        CovarianceStructure::IidBlocks(vec![IidBlock {
            size: counties,
            sigma2,
        }]),
    ))?;
    Ok(SynthInstance {
        model,
        y,
        unit,
        level,
        area: Vec::new(),
        period: Vec::new(),
        adjacency: None,
    })
}

/// Space-time grid with one observation per (area, period), laid out
/// time-major, intercept-only fixed effects and per-observation noise.
pub fn spacetime_grid(
    rows: usize,
    cols: usize,
    periods: usize,
    rho_space: f64,
    rho_time: f64,
    sigma2: f64,
    noise: Vec<f64>,
) -> Result<SynthInstance> {
    let adj = Arc::new(Adjacency::grid(rows, cols));
    let j = adj.len();
    let n = j * periods;
    let unit: Vec<usize> = (0..n).collect();
    let structure = CovarianceStructure::SpaceTimeAr(SpaceTimeParams {
        sigma2,
        rho_space,
        rho_time,
        adjacency: Arc::clone(&adj),
        periods,
    });
    let model = validate_spec(ModelSpec::new(
        DMatrix::from_element(n, 1, 1.0),
        indicator(n, n, &unit),
        noise,
        structure,
    ))?;
    Ok(SynthInstance {
        model,
        y: vec![0.0; n],
        level: vec![0; n],
        area: unit.iter().map(|u| u % j).collect(),
        period: unit.iter().map(|u| u / j).collect(),
        unit,
        adjacency: Some(adj),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::detect_clusters;
    use crate::partition::RelationshipPartition;

    #[test]
    fn generators_are_deterministic() {
        for kind in SynthKind::ALL {
            let a = random_instance(5, kind, 120).unwrap();
            let b = random_instance(5, kind, 120).unwrap();
            assert_eq!(a.y, b.y);
            assert_eq!(a.model.spec().fixed_design, b.model.spec().fixed_design);
            assert!(a.model.n_obs() <= 120);
        }
    }

    #[test]
    fn rules_build_partitions() {
        for kind in SynthKind::ALL {
            for seed in 0..5 {
                let inst = random_instance(seed, kind, 80).unwrap();
                let clusters = detect_clusters(&inst.model);
                RelationshipPartition::new(&clusters, inst.rules()).unwrap();
            }
        }
    }

    #[test]
    fn spacetime_grid_groups() {
        let inst = spacetime_grid(3, 3, 3, 0.5, 0.5, 1.0, vec![1.0; 27]).unwrap();
        let clusters = detect_clusters(&inst.model);
        let p = RelationshipPartition::new(&clusters, inst.rules()).unwrap();
        // 3 space x 3 time bins; (0, 0) is the borrower cluster itself.
        assert_eq!(p.n_groups(), 8);
        assert_eq!(p.n_groups_with_borrower(), 9);
    }
}
