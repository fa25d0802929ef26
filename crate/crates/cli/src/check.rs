//! Oracle suites behind `bfdecomp check`.

use clap::ValueEnum;
use serde::Serialize;

use bfdecomp::decompose::{compute_scale, decompose_all, weight_row, DecomposeOptions};
use bfdecomp::model::{detect_clusters, ValidatedModel};
use bfdecomp::oracles::{
    case_deleted_fit, dense_weights, hat_decomposition, oneway_weights, refit_without,
    OneWayProblem,
};
use bfdecomp::partition::RelationshipPartition;
use bfdecomp::synth::{random_instance, SynthKind};
use bfdecomp::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Oneway,
    Dense,
    Hat,
    Deletion,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub suite: Suite,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Cases the oracle could not evaluate (singular deletions).
    #[serde(skip_serializing_if = "is_zero")]
    pub skipped: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

const SYNTH_CASES: u64 = 20;

/// The problems to check: the loaded model, or seeded synthetic instances.
fn problems(given: Option<(ValidatedModel, Vec<f64>)>) -> Result<Vec<(ValidatedModel, Vec<f64>)>> {
    if let Some(p) = given {
        return Ok(vec![p]);
    }
    (0..SYNTH_CASES)
        .map(|seed| {
            let kind = SynthKind::ALL[(seed % 3) as usize];
            let inst = random_instance(seed, kind, 150)?;
            Ok((inst.model, inst.y))
        })
        .collect()
}

/// Seeded one-way problems with estimated grand mean, J up to 30.
fn oneway_problems() -> Vec<OneWayProblem> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    (0..100)
        .map(|_| {
            let j = rng.random_range(2..=30);
            OneWayProblem {
                sizes: (0..j).map(|_| rng.random_range(1..=8)).collect(),
                noise_variances: (0..j).map(|_| rng.random_range(0.2..3.0)).collect(),
                sigma2: rng.random_range(0.1..3.0),
                known_mean: None,
            }
        })
        .collect()
}

fn full_weights(model: &ValidatedModel) -> Result<nalgebra::DMatrix<f64>> {
    let scale = compute_scale(model)?;
    let clusters = detect_clusters(model);
    let partition = RelationshipPartition::single_group(&clusters);
    let opts = DecomposeOptions {
        keep_full: true,
        ..Default::default()
    };
    decompose_all(model, &scale, &clusters, &partition, &opts)?
        .weights
        .ok_or_else(|| Error::Unsupported("full weights were not retained".into()))
}

pub fn run_suite(suite: Suite, given: Option<(ValidatedModel, Vec<f64>)>) -> Result<CheckOutcome> {
    let mut max_error: f64 = 0.0;
    let mut cases = 0;
    let mut skipped = 0;
    let tolerance = match suite {
        Suite::Oneway => 1e-10,
        Suite::Dense | Suite::Hat => 1e-9,
        Suite::Deletion => 1e-8,
    };
    match suite {
        Suite::Oneway => {
            for p in oneway_problems() {
                let closed = oneway_weights(&p)?.expand();
                let model = p.to_model()?;
                let scale = compute_scale(&model)?;
                for i in 0..model.n_obs() {
                    let row = weight_row(&model, &scale, i)?;
                    for (j, v) in row.weights.iter().enumerate() {
                        let c = closed[(i, j)];
                        max_error = max_error.max((v - c).abs() / c.abs());
                    }
                }
                cases += 1;
            }
        }
        Suite::Dense => {
            for (model, _) in problems(given)? {
                let diff = (full_weights(&model)? - dense_weights(&model)?).amax();
                max_error = max_error.max(diff);
                cases += 1;
            }
        }
        Suite::Hat => {
            for (model, _) in problems(given)? {
                let hat = hat_decomposition(&model)?;
                let n = model.n_obs();
                let w = full_weights(&model)?;
                let rebuilt = &hat.h + &hat.h2 * (nalgebra::DMatrix::identity(n, n) - &hat.h);
                max_error = max_error.max((w - rebuilt).amax());
                cases += 1;
            }
        }
        Suite::Deletion => {
            for (model, y) in problems(given)? {
                let scale = compute_scale(&model)?;
                let clusters = detect_clusters(&model);
                for j in 0..clusters.n_clusters() {
                    let (Ok(fast), Ok(slow)) = (
                        case_deleted_fit(&model, &scale, &clusters, &y, j),
                        refit_without(&model, &y, clusters.members(j)),
                    ) else {
                        skipped += 1;
                        continue;
                    };
                    let diff = fast
                        .fitted
                        .iter()
                        .zip(&slow.fitted)
                        .map(|(a, b)| (a - b).abs())
                        .fold((&fast.coefficients - &slow.coefficients).amax(), f64::max);
                    max_error = max_error.max(diff);
                    cases += 1;
                }
            }
        }
    }
    Ok(CheckOutcome {
        suite,
        cases,
        max_error,
        tolerance,
        pass: cases > 0 && max_error < tolerance,
        skipped,
    })
}
