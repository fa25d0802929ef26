//! In-memory CSV tables and adjacency files.

use std::collections::BTreeSet;
use std::path::Path;

use crate::covariance::Adjacency;
use crate::error::{Error, Result};

/// A CSV file held as strings; columns are typed on access.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    /// 1-based source line of each row, for error messages.
    lines: Vec<u64>,
}

impl DataTable {
    pub fn from_reader<R: std::io::Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(source, e.to_string()))?;
            lines.push(rec.position().map_or(0, |p| p.line()));
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self {
            headers,
            rows,
            lines,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file, &path.display().to_string())
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn text(&self, name: &str) -> Result<Vec<&str>> {
        let c = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[c].as_str()).collect())
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column_index(name)?;
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(r, line)| {
                r[c].parse::<f64>().map_err(|_| {
                    Error::parse(
                        format!("line {line}, column `{name}`"),
                        format!("cannot parse `{}` as a number", r[c]),
                    )
                })
            })
            .collect()
    }

    pub fn counts(&self, name: &str) -> Result<Vec<u64>> {
        let c = self.column_index(name)?;
        self.rows
            .iter()
            .zip(&self.lines)
            .map(|(r, line)| {
                let v: f64 = r[c].parse().map_err(|_| {
                    Error::parse(
                        format!("line {line}, column `{name}`"),
                        format!("`{}` is not a count", r[c]),
                    )
                })?;
                if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                    return Err(Error::parse(
                        format!("line {line}, column `{name}`"),
                        format!("`{}` is not a non-negative integer", r[c]),
                    ));
                }
                Ok(v as u64)
            })
            .collect()
    }

    /// True when every value of the column parses as a number.
    pub fn is_numeric(&self, name: &str) -> Result<bool> {
        let c = self.column_index(name)?;
        Ok(self.rows.iter().all(|r| r[c].parse::<f64>().is_ok()))
    }

    /// Sorted distinct values and the code of each row.
    pub fn categorical(&self, name: &str) -> Result<(Vec<String>, Vec<u32>)> {
        let values = self.text(name)?;
        let levels: Vec<String> = values
            .iter()
            .copied()
            .collect::<BTreeSet<&str>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let codes = values
            .iter()
            .map(|v| levels.binary_search_by(|l| l.as_str().cmp(v)).unwrap() as u32)
            .collect();
        Ok((levels, codes))
    }

    /// Copy without the listed rows.
    pub fn without_rows(&self, deleted: &[usize]) -> Result<Self> {
        let n = self.n_rows();
        let mut keep = vec![true; n];
        for &d in deleted {
            if d >= n {
                return Err(Error::IndexOutOfRange { index: d, len: n });
            }
            keep[d] = false;
        }
        Ok(Self {
            headers: self.headers.clone(),
            rows: self
                .rows
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(r, _)| r.clone())
                .collect(),
            lines: self
                .lines
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(l, _)| *l)
                .collect(),
        })
    }
}

/// Adjacency graph with node labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledAdjacency {
    pub labels: Vec<String>,
    pub graph: Adjacency,
}

impl LabelledAdjacency {
    pub fn node(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Full 0/1 matrix with a header row of node labels.
pub fn read_adjacency_matrix<R: std::io::Read>(
    reader: R,
    source: &str,
) -> Result<LabelledAdjacency> {
    let table = DataTable::from_reader(reader, source)?;
    let labels = table.headers().to_vec();
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .zip(&table.lines)
        .map(|(r, line)| {
            r.iter()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::parse(
                            format!("{source} line {line}"),
                            format!("`{v}` is not 0 or 1"),
                        )
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.len() != labels.len() {
        return Err(Error::AsymmetricAdjacency(format!(
            "{} labels but {} rows",
            labels.len(),
            rows.len()
        )));
    }
    Ok(LabelledAdjacency {
        labels,
        graph: Adjacency::from_dense(&rows)?,
    })
}

/// Two-column undirected edge list with a header. Nodes are the labels that
/// appear in the edges plus `extra`, sorted.
pub fn read_adjacency_edges<R: std::io::Read>(
    reader: R,
    source: &str,
    extra: &[&str],
) -> Result<LabelledAdjacency> {
    let table = DataTable::from_reader(reader, source)?;
    if table.headers().len() != 2 {
        return Err(Error::parse(
            source,
            "edge list must have exactly two columns",
        ));
    }
    let mut nodes: BTreeSet<String> = extra.iter().map(|s| s.to_string()).collect();
    for r in &table.rows {
        nodes.insert(r[0].clone());
        nodes.insert(r[1].clone());
    }
    let labels: Vec<String> = nodes.into_iter().collect();
    let index = |l: &str| labels.binary_search_by(|x| x.as_str().cmp(l)).unwrap();
    let edges: Vec<(usize, usize)> = table
        .rows
        .iter()
        .map(|r| (index(&r[0]), index(&r[1])))
        .collect();
    let graph = Adjacency::from_edges(labels.len(), &edges)?;
    Ok(LabelledAdjacency { labels, graph })
}
