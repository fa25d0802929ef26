//! Problem bundles: a CSV data table plus a JSON model description,
//! assembled into design matrices, a covariance structure and rules.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::covariance::{CarParams, CovarianceStructure, IidBlock, SpaceTimeParams};
use crate::decompose::Target;
use crate::error::{Error, Result};
use crate::glmm::{poisson_pseudo_observations, PseudoData, VarianceMode};
use crate::io::table::{read_adjacency_edges, read_adjacency_matrix, DataTable, LabelledAdjacency};
use crate::model::ModelSpec;
use crate::partition::{Bins, RelationshipRule};

pub const INTERCEPT: &str = "(Intercept)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermType {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedTerm {
    pub column: String,
    #[serde(rename = "type")]
    pub kind: TermType,
    /// A categorical whose full indicator set stands in for the intercept.
    #[serde(default)]
    pub intercept_set: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Iid,
    Car,
    SpacetimeAr,
}

/// A number or the string `"fit"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Value(f64),
    Directive(Fit),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fit {
    Fit,
}

impl Param {
    pub fn value(self) -> Option<f64> {
        match self {
            Param::Value(v) => Some(v),
            Param::Directive(_) => None,
        }
    }

    fn is_fit(self) -> bool {
        matches!(self, Param::Directive(_))
    }
}

impl Default for Param {
    fn default() -> Self {
        Param::Directive(Fit::Fit)
    }
}

/// Standard deviations `phi` and `sigma`, correlations `rho_s` and `rho_t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceSpec {
    #[serde(default)]
    pub phi: Param,
    #[serde(default)]
    pub sigma: Param,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_s: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_t: Option<Param>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTerm {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    /// `[area, time]` for space-time terms.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    pub structure: StructureKind,
    /// Per-term `sigma` for iid terms; overrides the global value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<TermParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermParams {
    #[serde(default)]
    pub sigma: Option<Param>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleType {
    ColumnEqual,
    GraphDistance,
    Lag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(rename = "type")]
    pub kind: RuleType,
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Lower bin edges; defaults to `[0, 1, 2]` (0, 1, 2+).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<f64>>,
}

impl RuleSpec {
    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyFormat {
    Matrix,
    Edges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencySpec {
    /// Relative paths resolve against the spec file's directory.
    pub path: PathBuf,
    pub format: AdjacencyFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSd {
    Common(f64),
    PerColumn(Vec<f64>),
}

/// The JSON model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub response: String,
    /// Exposure column; its presence makes the response a Poisson count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub fixed: Vec<FixedTerm>,
    #[serde(default)]
    pub random: Vec<RandomTerm>,
    #[serde(default)]
    pub variance: VarianceSpec,
    #[serde(default)]
    pub variance_mode: VarianceMode,
    #[serde(default)]
    pub relationship_rules: Vec<RuleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<AdjacencySpec>,
    /// Fixed-effect columns whose contribution is removed from the estimates.
    #[serde(default)]
    pub condition_on: Vec<String>,
    /// Prior standard deviations of the fixed effects; flat when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_prior_sd: Option<PriorSd>,
}

impl SpecDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("model spec", e.to_string()))
    }
}

/// Which variance parameters the spec leaves to REML.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitDirectives {
    pub phi: bool,
    pub sigma: bool,
    pub rho: bool,
}

impl FitDirectives {
    pub fn any(&self) -> bool {
        self.phi || self.sigma || self.rho
    }
}

/// Everything needed to run the decomposition pipeline.
#[derive(Debug, Clone)]
pub struct ProblemBundle {
    pub document: SpecDocument,
    pub table: DataTable,
    pub adjacency: Option<Arc<LabelledAdjacency>>,
    pub ids: Vec<String>,
    /// Response on the modelling scale (pseudo-responses for counts).
    pub response: Vec<f64>,
    pub pseudo: Option<PseudoData>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    /// Model at the spec's variance values (placeholders where fitting).
    pub spec: ModelSpec,
    pub fit: FitDirectives,
    pub rules: Vec<RelationshipRule>,
    pub target: Target,
    /// Columns echoed into report records.
    pub echo_columns: Vec<String>,
}

/// Read the data CSV and the JSON spec, then assemble.
pub fn load_problem(data_path: &Path, spec_path: &Path) -> Result<ProblemBundle> {
    let table = DataTable::from_path(data_path)?;
    let text = std::fs::read_to_string(spec_path)?;
    let document = SpecDocument::from_json(&text)?;
    let adjacency = match &document.adjacency {
        None => None,
        Some(a) => {
            let path = if a.path.is_absolute() {
                a.path.clone()
            } else {
                spec_path.parent().unwrap_or(Path::new(".")).join(&a.path)
            };
            let file = std::fs::File::open(&path)?;
            let source = path.display().to_string();
            let graph = match a.format {
                AdjacencyFormat::Matrix => read_adjacency_matrix(file, &source)?,
                AdjacencyFormat::Edges => {
                    let extra = spatial_column(&document)
                        .map(|c| table.text(c))
                        .transpose()?
                        .unwrap_or_default();
                    read_adjacency_edges(file, &source, &extra)?
                }
            };
            Some(Arc::new(graph))
        }
    };
    assemble(document, table, adjacency)
}

fn spatial_column(doc: &SpecDocument) -> Option<&str> {
    doc.random.iter().find_map(|t| match t.structure {
        StructureKind::Car => t.column.as_deref(),
        StructureKind::SpacetimeAr => t
            .columns
            .first()
            .map(String::as_str)
            .or(t.column.as_deref()),
        StructureKind::Iid => None,
    })
}

fn check_rho(p: Option<Param>, name: &str) -> Result<Param> {
    match p {
        Some(Param::Value(v)) if !(0.0..1.0).contains(&v) => Err(Error::RhoOutOfRange(v)),
        Some(p) => Ok(p),
        None => Err(Error::parse(
            "model spec",
            format!("variance.{name} is required"),
        )),
    }
}

fn positive(p: Param, name: &str) -> Result<f64> {
    match p.value() {
        Some(v) if v > 0.0 && v.is_finite() => Ok(v),
        Some(v) => Err(Error::parse(
            "model spec",
            format!("{name} must be positive, got {v}"),
        )),
        // Placeholder; REML replaces it.
        None => Ok(1.0),
    }
}

/// Build the bundle from an already-parsed table and spec.
pub fn assemble(
    document: SpecDocument,
    table: DataTable,
    adjacency: Option<Arc<LabelledAdjacency>>,
) -> Result<ProblemBundle> {
    let n = table.n_rows();
    if n == 0 {
        return Err(Error::EmptyInput("data table has no rows"));
    }
    let ids: Vec<String> = match &document.id {
        Some(c) => table.text(c)?.into_iter().map(str::to_string).collect(),
        None => (0..n).map(|i| i.to_string()).collect(),
    };

    // Response and base noise.
    let (response, base_noise, pseudo) = match &document.offset {
        None => (table.numeric(&document.response)?, vec![1.0; n], None),
        Some(off) => {
            let counts = table.counts(&document.response)?;
            let offsets = table.numeric(off)?;
            let pseudo = poisson_pseudo_observations(&counts, &offsets, document.variance_mode)?;
            (
                pseudo.pseudo_response.clone(),
                pseudo.pseudo_variance.clone(),
                Some(pseudo),
            )
        }
    };

    // Fixed design.
    let has_intercept_set = document.fixed.iter().any(|t| t.intercept_set);
    let mut fixed_cols: Vec<Vec<f64>> = Vec::new();
    let mut fixed_names: Vec<String> = Vec::new();
    let mut term_columns: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    if !has_intercept_set {
        fixed_cols.push(vec![1.0; n]);
        fixed_names.push(INTERCEPT.to_string());
    }
    let mut seen_intercept_set = false;
    for term in &document.fixed {
        let start = fixed_cols.len();
        match term.kind {
            TermType::Numeric => {
                if term.intercept_set {
                    return Err(Error::parse(
                        "model spec",
                        format!("numeric term `{}` cannot be an intercept set", term.column),
                    ));
                }
                fixed_cols.push(table.numeric(&term.column)?);
                fixed_names.push(term.column.clone());
            }
            TermType::Categorical => {
                let (levels, codes) = table.categorical(&term.column)?;
                // The first intercept set keeps all levels; everything else is
                // reference-coded against its first level.
                let full = term.intercept_set && !seen_intercept_set;
                seen_intercept_set |= term.intercept_set;
                let skip = usize::from(!full);
                for (k, level) in levels.iter().enumerate().skip(skip) {
                    fixed_cols.push(
                        codes
                            .iter()
                            .map(|&c| f64::from(u8::from(c as usize == k)))
                            .collect(),
                    );
                    fixed_names.push(format!("{}[{}]", term.column, level));
                }
            }
        }
        term_columns
            .entry(term.column.clone())
            .or_default()
            .extend(start..fixed_cols.len());
    }
    let p1 = fixed_cols.len();
    let x1 = DMatrix::from_fn(n, p1, |i, j| fixed_cols[j][i]);

    // Conditioning targets.
    let mut conditioned = Vec::new();
    for c in &document.condition_on {
        let cols = term_columns
            .get(c)
            .ok_or_else(|| Error::UnknownColumn(c.clone()))?;
        conditioned.extend(cols.iter().copied());
    }
    conditioned.sort_unstable();
    let target = if conditioned.is_empty() {
        Target::Full
    } else {
        Target::Conditioned(conditioned)
    };

    // Random design and structure.
    let var = &document.variance;
    let mut fit = FitDirectives {
        phi: var.phi.is_fit(),
        sigma: false,
        rho: false,
    };
    let phi2 = positive(var.phi, "phi")?.powi(2);
    let noise: Vec<f64> = base_noise.iter().map(|b| b * phi2).collect();
    let mut col_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut random_names = Vec::new();
    let mut blocks = Vec::new();
    let mut spatial: Option<CovarianceStructure> = None;
    for term in &document.random {
        let offset = random_names.len();
        match term.structure {
            StructureKind::Iid => {
                let column = term
                    .column
                    .as_ref()
                    .ok_or_else(|| Error::parse("model spec", "iid random term needs `column`"))?;
                let (levels, codes) = table.categorical(column)?;
                let sigma = term
                    .params
                    .as_ref()
                    .and_then(|p| p.sigma)
                    .unwrap_or(var.sigma);
                fit.sigma |= sigma.is_fit();
                blocks.push(IidBlock {
                    size: levels.len(),
                    sigma2: positive(sigma, "sigma")?.powi(2),
                });
                for (i, &c) in codes.iter().enumerate() {
                    col_of[i].push(offset + c as usize);
                }
                random_names.extend(levels.iter().map(|l| format!("{column}[{l}]")));
            }
            StructureKind::Car | StructureKind::SpacetimeAr => {
                if spatial.is_some() || !blocks.is_empty() || document.random.len() > 1 {
                    return Err(Error::Unsupported(
                        "a CAR or space-time term must be the only random term".into(),
                    ));
                }
                let adj = adjacency.as_ref().ok_or_else(|| {
                    Error::parse("model spec", "CAR and space-time terms need `adjacency`")
                })?;
                let area_col = match term.structure {
                    StructureKind::Car => term.column.as_deref(),
                    _ => term.columns.first().map(String::as_str),
                }
                .ok_or_else(|| Error::parse("model spec", "spatial term needs its area column"))?;
                let areas = table.text(area_col)?;
                let node_of: Vec<usize> = areas
                    .iter()
                    .map(|a| {
                        adj.node(a).ok_or_else(|| {
                            Error::parse(
                                format!("column `{area_col}`"),
                                format!("area `{a}` is not a node of the adjacency"),
                            )
                        })
                    })
                    .collect::<Result<_>>()?;
                fit.sigma |= var.sigma.is_fit();
                let sigma2 = positive(var.sigma, "sigma")?.powi(2);
                let rho_s = check_rho(var.rho_s, "rho_s")?;
                fit.rho |= rho_s.is_fit();
                let rho_space = rho_s.value().unwrap_or(0.5);
                let j = adj.labels.len();
                if term.structure == StructureKind::Car {
                    for (i, &node) in node_of.iter().enumerate() {
                        col_of[i].push(node);
                    }
                    random_names.extend(adj.labels.iter().map(|l| format!("{area_col}[{l}]")));
                    spatial = Some(CovarianceStructure::Car(CarParams {
                        sigma2,
                        rho: rho_space,
                        adjacency: Arc::new(adj.graph.clone()),
                    }));
                } else {
                    let time_col = term.columns.get(1).ok_or_else(|| {
                        Error::parse(
                            "model spec",
                            "space-time term needs `columns: [area, time]`",
                        )
                    })?;
                    let times = table.numeric(time_col)?;
                    let mut periods: Vec<f64> = times.clone();
                    periods.sort_by(f64::total_cmp);
                    periods.dedup();
                    let rho_t = check_rho(var.rho_t, "rho_t")?;
                    fit.rho |= rho_t.is_fit();
                    for (i, (&node, t)) in node_of.iter().zip(&times).enumerate() {
                        let k = periods.binary_search_by(|p| p.total_cmp(t)).unwrap();
                        col_of[i].push(k * j + node);
                    }
                    for p in &periods {
                        random_names
                            .extend(adj.labels.iter().map(|l| format!("{area_col}[{l}]@{p}")));
                    }
                    spatial = Some(CovarianceStructure::SpaceTimeAr(SpaceTimeParams {
                        sigma2,
                        rho_space,
                        rho_time: rho_t.value().unwrap_or(0.5),
                        adjacency: Arc::new(adj.graph.clone()),
                        periods: periods.len(),
                    }));
                }
            }
        }
    }
    let p2 = random_names.len();
    let mut coo = CooMatrix::new(n, p2);
    for (i, cols) in col_of.iter().enumerate() {
        for &c in cols {
            coo.push(i, c, 1.0);
        }
    }
    let structure = spatial.unwrap_or(CovarianceStructure::IidBlocks(blocks));

    let mut spec = ModelSpec::new(x1, CsrMatrix::from(&coo), noise, structure);
    if let Some(sd) = &document.fixed_prior_sd {
        let sds = match sd {
            PriorSd::Common(s) => vec![*s; p1],
            PriorSd::PerColumn(v) if v.len() == p1 => v.clone(),
            PriorSd::PerColumn(v) => {
                return Err(Error::Dimension(format!(
                    "fixed_prior_sd has {} entries for {p1} fixed columns",
                    v.len()
                )))
            }
        };
        if sds.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::parse(
                "model spec",
                "fixed_prior_sd entries must be positive",
            ));
        }
        spec = spec.with_fixed_prior_precision(DMatrix::from_diagonal(
            &nalgebra::DVector::from_iterator(p1, sds.iter().map(|s| 1.0 / (s * s))),
        ));
    }

    // Relationship rules.
    let mut rules = Vec::new();
    for r in &document.relationship_rules {
        let name = r.label().to_string();
        let bins = || Bins::new(r.bins.clone().unwrap_or_else(|| vec![0.0, 1.0, 2.0]));
        rules.push(match r.kind {
            RuleType::ColumnEqual => RelationshipRule::ColumnEqual {
                name,
                codes: table.categorical(&r.column)?.1,
            },
            RuleType::Lag => RelationshipRule::Lag {
                name,
                values: table.numeric(&r.column)?,
                bins: bins()?,
            },
            RuleType::GraphDistance => {
                let adj = adjacency.as_ref().ok_or_else(|| {
                    Error::parse("model spec", "graph_distance rules need `adjacency`")
                })?;
                let node_of = table
                    .text(&r.column)?
                    .iter()
                    .map(|a| {
                        adj.node(a).ok_or_else(|| {
                            Error::parse(
                                format!("column `{}`", r.column),
                                format!("`{a}` is not a node"),
                            )
                        })
                    })
                    .collect::<Result<_>>()?;
                RelationshipRule::GraphDistance {
                    name,
                    node_of,
                    adjacency: Arc::new(adj.graph.clone()),
                    bins: bins()?,
                }
            }
        });
    }

    // Echo every referenced column once, in spec order.
    let mut echo_columns: Vec<String> = Vec::new();
    let mut push = |c: &str| {
        if !echo_columns.iter().any(|e| e == c) {
            echo_columns.push(c.to_string());
        }
    };
    push(&document.response);
    if let Some(o) = &document.offset {
        push(o);
    }
    for t in &document.fixed {
        push(&t.column);
    }
    for t in &document.random {
        if let Some(c) = &t.column {
            push(c);
        }
        for c in &t.columns {
            push(c);
        }
    }
    for r in &document.relationship_rules {
        push(&r.column);
    }

    Ok(ProblemBundle {
        document,
        table,
        adjacency,
        ids,
        response,
        pseudo,
        fixed_names,
        random_names,
        spec,
        fit,
        rules,
        target,
        echo_columns,
    })
}

impl ProblemBundle {
    pub fn n_obs(&self) -> usize {
        self.table.n_rows()
    }

    /// The same problem on the data with `deleted` rows removed.
    pub fn without_rows(&self, deleted: &[usize]) -> Result<ProblemBundle> {
        assemble(
            self.document.clone(),
            self.table.without_rows(deleted)?,
            self.adjacency.clone(),
        )
    }
}
