//! The JSON report: one record per observation plus model metadata and
//! optional influence and smoothing sections.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glmm::VarianceMode;
use crate::influence::InfluenceReport;
use crate::io::bundle::RuleSpec;
use crate::io::smooth::GridSection;
use crate::reml::VarianceWarning;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub metadata: Metadata,
    pub records: Vec<Record>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub influence: Option<InfluenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub response: String,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub fixed_names: Vec<String>,
    pub n_random: usize,
    /// Standard deviations (`phi`, `sigma...`) and correlations (`rho_s`, `rho_t`) used.
    pub variance: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_mode: Option<VarianceMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_fit: Option<FitSummary>,
    pub rules: Vec<RuleSpec>,
    /// Lender groups in partition order.
    pub group_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub condition_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub log_restricted_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<VarianceWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupValues {
    pub borrowing: f64,
    pub pssbf: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariate {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub cluster: usize,
    pub cluster_size: usize,
    pub shrinkage: f64,
    pub pooling: f64,
    pub ssbf: f64,
    pub groups: BTreeMap<String, GroupValues>,
    pub fitted: f64,
    pub covariates: BTreeMap<String, Covariate>,
}

impl Report {
    /// Record count and group-key consistency.
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersionMismatch(format!(
                "expected schema version {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        if self.records.len() != self.metadata.n_obs {
            return Err(Error::SchemaVersionMismatch(format!(
                "metadata says {} observations, report has {} records",
                self.metadata.n_obs,
                self.records.len()
            )));
        }
        let expected: BTreeSet<&str> = self
            .metadata
            .group_labels
            .iter()
            .map(String::as_str)
            .collect();
        for r in &self.records {
            if !r
                .groups
                .keys()
                .map(String::as_str)
                .eq(expected.iter().copied())
            {
                return Err(Error::SchemaVersionMismatch(format!(
                    "record `{}` has group keys {:?}, expected {:?}",
                    r.id,
                    r.groups.keys().collect::<Vec<_>>(),
                    expected
                )));
            }
        }
        Ok(())
    }
}

/// Compact JSON writer that prints every float with 17 significant digits.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn to_json_bytes(report: &Report) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    report.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

pub fn from_json_slice(bytes: &[u8]) -> Result<Report> {
    let probe: VersionProbe = serde_json::from_slice(bytes)?;
    match probe.schema_version {
        Some(SCHEMA_VERSION) => {}
        other => {
            return Err(Error::SchemaVersionMismatch(format!(
                "expected schema version {SCHEMA_VERSION}, found {}",
                other.map_or("none".to_string(), |v| v.to_string())
            )))
        }
    }
    let report: Report = serde_json::from_slice(bytes)?;
    report.check()?;
    Ok(report)
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    std::fs::write(path, to_json_bytes(report)?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    from_json_slice(&std::fs::read(path)?)
}

/// Dense `W` as headerless CSV with 17 significant digits.
pub fn write_weights_csv<W: Write>(w: &DMatrix<f64>, mut out: W) -> Result<()> {
    let mut line = String::new();
    for i in 0..w.nrows() {
        line.clear();
        for j in 0..w.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.16e}", w[(i, j)]));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> Report {
        let groups = |b: f64| {
            BTreeMap::from([(
                "lenders".to_string(),
                GroupValues {
                    borrowing: b,
                    pssbf: b * b,
                    size: 1,
                },
            )])
        };
        Report {
            schema_version: SCHEMA_VERSION,
            metadata: Metadata {
                response: "y".into(),
                n_obs: 2,
                n_clusters: 2,
                fixed_names: vec!["(Intercept)".into()],
                n_random: 0,
                variance: BTreeMap::from([("phi".to_string(), 1.0)]),
                variance_mode: None,
                variance_fit: None,
                rules: Vec::new(),
                group_labels: vec!["lenders".into()],
                condition_on: Vec::new(),
            },
            records: vec![
                Record {
                    id: "a".into(),
                    cluster: 0,
                    cluster_size: 1,
                    shrinkage: 0.1 + 0.2,
                    pooling: 1.0 - (0.1 + 0.2),
                    ssbf: 0.49,
                    groups: groups(0.7),
                    fitted: -1.0 / 3.0,
                    covariates: BTreeMap::from([
                        ("x".to_string(), Covariate::Number(std::f64::consts::PI)),
                        ("g".to_string(), Covariate::Text("north".into())),
                    ]),
                },
                Record {
                    id: "b".into(),
                    cluster: 1,
                    cluster_size: 1,
                    shrinkage: 0.5,
                    pooling: 0.5,
                    ssbf: 0.25,
                    groups: groups(0.5),
                    fitted: 1e-300,
                    covariates: BTreeMap::new(),
                },
            ],
            influence: None,
            grid: None,
        }
    }

    #[test]
    fn round_trip_exact() {
        let r = tiny();
        let bytes = to_json_bytes(&r).unwrap();
        assert_eq!(from_json_slice(&bytes).unwrap(), r);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("3.0000000000000004e-1"), "{text}");
        assert!(!text.contains("influence"));
    }

    #[test]
    fn mismatched_groups_rejected() {
        let mut r = tiny();
        r.records[1].groups = BTreeMap::new();
        let bytes = to_json_bytes(&r).unwrap();
        assert!(matches!(
            from_json_slice(&bytes),
            Err(Error::SchemaVersionMismatch(_))
        ));
    }

    #[test]
    fn wrong_version_rejected() {
        let mut r = tiny();
        r.schema_version = 99;
        let bytes = to_json_bytes(&r).unwrap();
        let err = from_json_slice(&bytes).unwrap_err().to_string();
        assert!(err.contains("99"), "{err}");
    }

    #[test]
    fn weights_csv_shape() {
        let w = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0 / 3.0, 2.0 / 3.0]);
        let mut out = Vec::new();
        write_weights_csv(&w, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
        assert_eq!(back, 1.0 / 3.0);
    }
}
