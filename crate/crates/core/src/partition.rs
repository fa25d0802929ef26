//! Relationship groups: labelling every lender of a borrower by the outcomes of
//! a list of pairwise rules.
//!
//! A lender's label is the tuple of rule outcomes. The borrower cluster is never
//! labelled; it is the implicit "shrinkage" group. Only tuples that occur for at
//! least one (borrower, lender) pair become groups, so e.g. two `column_equal`
//! rules on county and basement yield three lender groups when
//! same-county/same-basement observations always share a cluster.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::covariance::Adjacency;
use crate::error::{Error, Result};
use crate::model::ClusterIndex;

/// Ascending lower bin edges; the last bin is open-ended.
#[derive(Debug, Clone, PartialEq)]
pub struct Bins {
    edges: Vec<f64>,
}

impl Bins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::parse("bins", "at least one bin edge is required"));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::parse(
                "bins",
                "edges must be finite and strictly increasing",
            ));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    fn len(&self) -> usize {
        self.edges.len()
    }

    fn locate(&self, value: f64) -> Option<usize> {
        if value.is_nan() || value < self.edges[0] {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= value) - 1)
    }

    fn label(&self, k: usize) -> String {
        let lo = self.edges[k];
        match self.edges.get(k + 1) {
            None => format!("{lo}+"),
            Some(&hi) if hi - lo == 1.0 && lo.fract() == 0.0 => format!("{lo}"),
            Some(&hi) => format!("[{lo},{hi})"),
        }
    }
}

/// A pairwise rule with its per-observation inputs already resolved.
#[derive(Debug, Clone)]
pub enum RelationshipRule {
    /// Same vs different category.
    ColumnEqual { name: String, codes: Vec<u32> },
    /// Hop distance between the observations' graph nodes, binned.
    GraphDistance {
        name: String,
        node_of: Vec<usize>,
        adjacency: Arc<Adjacency>,
        bins: Bins,
    },
    /// Absolute difference of a numeric column, binned.
    Lag {
        name: String,
        values: Vec<f64>,
        bins: Bins,
    },
}

impl RelationshipRule {
    pub fn name(&self) -> &str {
        match self {
            RelationshipRule::ColumnEqual { name, .. }
            | RelationshipRule::GraphDistance { name, .. }
            | RelationshipRule::Lag { name, .. } => name,
        }
    }

    fn n_obs(&self) -> usize {
        match self {
            RelationshipRule::ColumnEqual { codes, .. } => codes.len(),
            RelationshipRule::GraphDistance { node_of, .. } => node_of.len(),
            RelationshipRule::Lag { values, .. } => values.len(),
        }
    }

    fn n_outcomes(&self) -> usize {
        match self {
            RelationshipRule::ColumnEqual { .. } => 2,
            RelationshipRule::GraphDistance { bins, .. } | RelationshipRule::Lag { bins, .. } => {
                bins.len()
            }
        }
    }

    fn outcome_label(&self, k: usize) -> String {
        match self {
            RelationshipRule::ColumnEqual { .. } => {
                if k == 0 { "same" } else { "different" }.to_string()
            }
            RelationshipRule::GraphDistance { bins, .. } | RelationshipRule::Lag { bins, .. } => {
                bins.label(k)
            }
        }
    }
}

/// Resolved rule plus lookup tables.
#[derive(Debug, Clone)]
struct CompiledRule {
    rule: RelationshipRule,
    // Hop distances between graph nodes, row-major; f64::INFINITY if unreachable.
    node_distances: Option<(usize, Vec<f64>)>,
}

impl CompiledRule {
    fn new(rule: RelationshipRule) -> Result<Self> {
        let node_distances = match &rule {
            RelationshipRule::GraphDistance {
                node_of, adjacency, ..
            } => {
                let n = adjacency.len();
                if let Some(&bad) = node_of.iter().find(|&&v| v >= n) {
                    return Err(Error::IndexOutOfRange { index: bad, len: n });
                }
                let mut table = vec![f64::INFINITY; n * n];
                for s in 0..n {
                    for (t, d) in adjacency.distances_from(s).into_iter().enumerate() {
                        if let Some(d) = d {
                            table[s * n + t] = d as f64;
                        }
                    }
                }
                Some((n, table))
            }
            _ => None,
        };
        Ok(Self {
            rule,
            node_distances,
        })
    }

    fn outcome(&self, i: usize, j: usize) -> Option<usize> {
        match &self.rule {
            RelationshipRule::ColumnEqual { codes, .. } => Some(usize::from(codes[i] != codes[j])),
            RelationshipRule::GraphDistance { node_of, bins, .. } => {
                let (n, table) = self.node_distances.as_ref().expect("compiled");
                bins.locate(table[node_of[i] * n + node_of[j]])
            }
            RelationshipRule::Lag { values, bins, .. } => {
                bins.locate((values[i] - values[j]).abs())
            }
        }
    }

    fn offending_value(&self, i: usize, j: usize) -> f64 {
        match &self.rule {
            RelationshipRule::ColumnEqual { .. } => f64::NAN,
            RelationshipRule::GraphDistance { node_of, .. } => {
                let (n, table) = self.node_distances.as_ref().expect("compiled");
                table[node_of[i] * n + node_of[j]]
            }
            RelationshipRule::Lag { values, .. } => (values[i] - values[j]).abs(),
        }
    }
}

/// One relationship group: a tuple of rule outcomes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupKey {
    pub outcomes: Vec<usize>,
}

/// Labelling of every (borrower, lender) pair into relationship groups.
#[derive(Debug, Clone)]
pub struct RelationshipPartition {
    rules: Vec<CompiledRule>,
    radix: Vec<usize>,
    groups: Vec<GroupKey>,
    labels: Vec<String>,
    // Mixed-radix outcome code -> group index.
    code_to_group: Vec<Option<usize>>,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.outcomes.iter().map(|o| o.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl RelationshipPartition {
    /// Scan every (borrower, lender) pair, validating bin coverage and
    /// collecting the occurring outcome tuples.
    pub fn new(clusters: &ClusterIndex, rules: Vec<RelationshipRule>) -> Result<Self> {
        let n = clusters.n_obs();
        for rule in &rules {
            if rule.n_obs() != n {
                return Err(Error::Dimension(format!(
                    "rule `{}` has {} values for {n} observations",
                    rule.name(),
                    rule.n_obs()
                )));
            }
        }
        let compiled = rules
            .into_iter()
            .map(CompiledRule::new)
            .collect::<Result<Vec<_>>>()?;
        let radix: Vec<usize> = compiled.iter().map(|r| r.rule.n_outcomes()).collect();
        let n_codes: usize = radix.iter().product();
        let mut seen = vec![false; n_codes];
        let mut partition = Self {
            rules: compiled,
            radix,
            groups: Vec::new(),
            labels: Vec::new(),
            code_to_group: Vec::new(),
        };
        for i in 0..n {
            let ci = clusters.cluster_of(i);
            for j in 0..n {
                if clusters.cluster_of(j) == ci {
                    continue;
                }
                seen[partition.code(i, j)?] = true;
            }
        }
        let mut code_to_group = vec![None; n_codes];
        let mut by_code = BTreeMap::new();
        for (code, _) in seen.iter().enumerate().filter(|(_, s)| **s) {
            by_code.insert(code, partition.decode(code));
        }
        for (code, key) in by_code {
            code_to_group[code] = Some(partition.groups.len());
            partition.labels.push(partition.describe(&key));
            partition.groups.push(key);
        }
        partition.code_to_group = code_to_group;
        Ok(partition)
    }

    /// Partition with no rules: every lender falls into a single group.
    pub fn single_group(clusters: &ClusterIndex) -> Self {
        Self::new(clusters, Vec::new()).expect("no rules cannot fail")
    }

    fn code(&self, i: usize, j: usize) -> Result<usize> {
        let mut code = 0;
        for (rule, &r) in self.rules.iter().zip(&self.radix) {
            let k = rule.outcome(i, j).ok_or_else(|| Error::BinGap {
                rule: rule.rule.name().to_string(),
                value: rule.offending_value(i, j),
            })?;
            code = code * r + k;
        }
        Ok(code)
    }

    fn decode(&self, mut code: usize) -> GroupKey {
        let mut outcomes = vec![0; self.radix.len()];
        for (slot, &r) in outcomes.iter_mut().zip(&self.radix).rev() {
            *slot = code % r;
            code /= r;
        }
        GroupKey { outcomes }
    }

    fn describe(&self, key: &GroupKey) -> String {
        if self.rules.is_empty() {
            return "lenders".to_string();
        }
        self.rules
            .iter()
            .zip(&key.outcomes)
            .map(|(r, &k)| format!("{}:{}", r.rule.name(), r.rule.outcome_label(k)))
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Lender groups (borrower cluster excluded).
    pub fn groups(&self) -> &[GroupKey] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Lender groups plus the borrower cluster.
    pub fn n_groups_with_borrower(&self) -> usize {
        self.groups.len() + 1
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn rule_names(&self) -> Vec<&str> {
        self.rules.iter().map(|r| r.rule.name()).collect()
    }

    /// Group of lender `j` relative to borrower `i`. The caller guarantees `j`
    /// is outside `i`'s cluster.
    pub fn group_of(&self, i: usize, j: usize) -> usize {
        let code = self.code(i, j).expect("pairs validated at construction");
        self.code_to_group[code].expect("occurring code")
    }

    /// Index of the group whose label is `label`.
    pub fn find(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{detect_clusters, validate_spec, ModelSpec};
    use nalgebra::DMatrix;

    fn clusters_from_rows(rows: &[&[f64]]) -> ClusterIndex {
        let p = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let x = DMatrix::from_row_slice(rows.len(), p, &flat);
        let model = validate_spec(ModelSpec::fixed_only(x, vec![1.0; rows.len()])).unwrap();
        detect_clusters(&model)
    }

    #[test]
    fn bins_locate_and_label() {
        let b = Bins::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(b.locate(0.0), Some(0));
        assert_eq!(b.locate(1.0), Some(1));
        assert_eq!(b.locate(7.0), Some(2));
        assert_eq!(b.locate(f64::INFINITY), Some(2));
        assert_eq!(b.locate(-0.5), None);
        assert_eq!(b.label(0), "0");
        assert_eq!(b.label(2), "2+");
        assert!(Bins::new(vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn one_way_has_single_lender_group() {
        // Cluster indicator design: one-hot columns define the rows.
        let c = clusters_from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let rule = RelationshipRule::ColumnEqual {
            name: "g".into(),
            codes: vec![0, 0, 1],
        };
        let p = RelationshipPartition::new(&c, vec![rule]).unwrap();
        assert_eq!(p.labels(), &["g:different".to_string()]);
    }

    #[test]
    fn two_factor_groups() {
        // county x basement cells; rows identical within a cell.
        let rows: Vec<[f64; 4]> = vec![
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [1.0, 0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0, 1.0],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let c = clusters_from_rows(&refs);
        let rules = vec![
            RelationshipRule::ColumnEqual {
                name: "county".into(),
                codes: vec![0, 0, 1, 1],
            },
            RelationshipRule::ColumnEqual {
                name: "basement".into(),
                codes: vec![0, 1, 0, 1],
            },
        ];
        let p = RelationshipPartition::new(&c, rules).unwrap();
        assert_eq!(p.n_groups(), 3);
        assert_eq!(
            p.labels(),
            &[
                "county:same|basement:different".to_string(),
                "county:different|basement:same".to_string(),
                "county:different|basement:different".to_string(),
            ]
        );
        assert_eq!(p.group_of(0, 3), 2);
        assert_eq!(p.group_of(0, 1), 0);
    }

    #[test]
    fn bin_gap_detected() {
        let c = clusters_from_rows(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let rule = RelationshipRule::Lag {
            name: "year".into(),
            values: vec![0.0, 1.0],
            bins: Bins::new(vec![2.0, 3.0]).unwrap(),
        };
        assert!(matches!(
            RelationshipPartition::new(&c, vec![rule]),
            Err(Error::BinGap { .. })
        ));
    }
}
