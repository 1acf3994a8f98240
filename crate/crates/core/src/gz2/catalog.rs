//! GZ2 vote-fraction catalog parsing.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use super::DecisionTree;
use crate::error::{Error, Result};

/// Slack allowed on per-task fraction sums.
pub const SUM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogRow {
    pub galaxy_id: String,
    /// 37 fractions in flat tree order (`Class1.1` .. `Class11.6`).
    pub fractions: Vec<f64>,
}

impl CatalogRow {
    /// Checks ranges and per-task sums against the tree.
    pub fn validate(&self, tree: &DecisionTree) -> std::result::Result<(), String> {
        if self.fractions.len() != tree.num_answers() {
            return Err(format!("expected {} fractions, got {}", tree.num_answers(), self.fractions.len()));
        }
        let names = tree.column_names();
        for (v, name) in self.fractions.iter().zip(&names) {
            if !(0.0..=1.0).contains(v) {
                return Err(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        for t in 1..=tree.tasks().len() {
            let s: f64 = tree.task_range(t).map(|i| self.fractions[i]).sum();
            if s > 1.0 + SUM_TOLERANCE {
                return Err(format!("task {t} fractions sum to {s}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowRejection {
    /// 1-based record number, header excluded.
    pub record: usize,
    pub galaxy_id: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CatalogParse {
    pub rows: Vec<CatalogRow>,
    pub rejected: Vec<RowRejection>,
}

/// Parses a catalog with a `GalaxyID` column plus one column per answer.
/// Extra columns are ignored. Bad rows are collected in `rejected`; the
/// parse only fails outright on a schema problem or when every row is bad.
pub fn parse_catalog<R: Read>(reader: R, tree: &DecisionTree) -> Result<CatalogParse> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_col = find("GalaxyID").ok_or_else(|| Error::Schema("missing column GalaxyID".into()))?;
    let names = tree.column_names();
    let missing: Vec<&str> = names.iter().filter(|n| find(n).is_none()).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!("missing columns: {}", missing.join(", "))));
    }
    let cols: Vec<usize> = names.iter().map(|n| find(n).unwrap()).collect();

    let mut out = CatalogParse::default();
    let mut seen = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let record_no = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(RowRejection {
                    record: record_no,
                    galaxy_id: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        let reject = |reason: String| RowRejection {
            record: record_no,
            galaxy_id: Some(id.clone()),
            reason,
        };
        if id.is_empty() {
            out.rejected.push(reject("empty GalaxyID".into()));
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, String> = cols
            .iter()
            .zip(&names)
            .map(|(&c, name)| {
                let raw = record.get(c).unwrap_or("");
                raw.parse::<f64>().map_err(|_| format!("{name} = {raw:?} is not a number"))
            })
            .collect();
        let row = match parsed {
            Ok(fractions) => CatalogRow {
                galaxy_id: id.clone(),
                fractions,
            },
            Err(reason) => {
                out.rejected.push(reject(reason));
                continue;
            }
        };
        if let Err(reason) = row.validate(tree) {
            out.rejected.push(reject(reason));
            continue;
        }
        if !seen.insert(id.clone()) {
            out.rejected.push(reject("duplicate GalaxyID".into()));
            continue;
        }
        out.rows.push(row);
    }
    if out.rows.is_empty() {
        if !out.rejected.is_empty() {
            return Err(Error::Schema(format!(
                "all {} catalog rows were rejected; first: record {}: {}",
                out.rejected.len(),
                out.rejected[0].record,
                out.rejected[0].reason
            )));
        }
        log::warn!("catalog has a header but no rows");
    }
    for r in &out.rejected {
        log::warn!("catalog record {} rejected: {}", r.record, r.reason);
    }
    Ok(out)
}

pub fn read_catalog(path: &Path, tree: &DecisionTree) -> Result<CatalogParse> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(std::io::BufReader::new(file), tree)
}
