//! Clean-sample selection by vote-fraction thresholds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CatalogRow, DecisionTree, NUM_CLASSES};
use crate::error::{Error, Result};

/// How a clause combines the fractions of several answers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// The summed fraction must reach the threshold.
    #[default]
    Sum,
    /// Any single answer reaching the threshold suffices.
    Any,
}

/// `combine(answers) >= min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Clause {
    /// Column names such as `Class1.1`.
    pub answers: Vec<String>,
    pub min: f64,
    #[serde(default)]
    pub combine: Combine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationRule {
    pub class: u8,
    pub name: String,
    #[serde(rename = "clause")]
    pub clauses: Vec<Clause>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    #[serde(rename = "rule")]
    pub rules: Vec<CurationRule>,
}

#[derive(Clone, Debug)]
struct Compiled {
    class: u8,
    clauses: Vec<(Vec<usize>, f64, Combine)>,
}

fn clause(answers: &[&str], min: f64) -> Clause {
    Clause {
        answers: answers.iter().map(|s| s.to_string()).collect(),
        min,
        combine: Combine::Sum,
    }
}

fn rule(class: u8, name: &str, clauses: Vec<Clause>) -> CurationRule {
    CurationRule {
        class,
        name: name.to_string(),
        clauses,
    }
}

impl RuleSet {
    /// The seven clean-sample rules. `class6_combine` picks how the
    /// disturbed/irregular/other/merger/dust-lane fractions are combined.
    pub fn gz2(class6_combine: Combine) -> Self {
        let smooth = |round: &str| vec![clause(&["Class1.1"], 0.469), clause(&[round], 0.5), clause(&["Class6.2"], 0.5)];
        let spiral = |bar: &str| {
            vec![
                clause(&["Class1.2"], 0.430),
                clause(&["Class2.2"], 0.715),
                clause(&[bar], 0.715),
                clause(&["Class4.1"], 0.619),
            ]
        };
        let mut odd = clause(&["Class8.3", "Class8.4", "Class8.5", "Class8.6", "Class8.7"], 0.5);
        odd.combine = class6_combine;
        RuleSet {
            rules: vec![
                rule(0, "completely round smooth", smooth("Class7.1")),
                rule(1, "in-between smooth", smooth("Class7.2")),
                rule(2, "cigar-shaped smooth", smooth("Class7.3")),
                rule(
                    3,
                    "lenticular",
                    vec![clause(&["Class1.2"], 0.430), clause(&["Class2.1"], 0.602), clause(&["Class6.2"], 0.5)],
                ),
                rule(4, "barred spiral", spiral("Class3.1")),
                rule(5, "unbarred spiral", spiral("Class3.2")),
                rule(6, "irregular", vec![clause(&["Class6.1"], 0.420), odd]),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let rules: RuleSet = toml::from_str(text).map_err(|e| Error::Config(format!("rules: {e}")))?;
        rules.compile(&DecisionTree::gz2())?;
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("rule sets serialize")
    }

    fn compile(&self, tree: &DecisionTree) -> Result<Vec<Compiled>> {
        let mut out = Vec::with_capacity(self.rules.len());
        for r in &self.rules {
            if r.class as usize >= NUM_CLASSES {
                return Err(Error::Config(format!("rule {:?}: class {} out of range", r.name, r.class)));
            }
            if r.clauses.is_empty() {
                return Err(Error::Config(format!("rule {:?} has no clauses", r.name)));
            }
            let mut clauses = Vec::with_capacity(r.clauses.len());
            for c in &r.clauses {
                if !(c.min > 0.0 && c.min < 1.0) {
                    return Err(Error::Config(format!("rule {:?}: threshold {} not in (0, 1)", r.name, c.min)));
                }
                if c.answers.is_empty() {
                    return Err(Error::Config(format!("rule {:?}: clause without answers", r.name)));
                }
                let idx = c
                    .answers
                    .iter()
                    .map(|a| {
                        tree.index_of_column(a)
                            .ok_or_else(|| Error::Config(format!("rule {:?}: unknown answer {a}", r.name)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                clauses.push((idx, c.min, c.combine));
            }
            out.push(Compiled {
                class: r.class,
                clauses,
            });
        }
        Ok(out)
    }
}

impl Compiled {
    fn matches(&self, f: &[f64]) -> bool {
        self.clauses.iter().all(|(idx, min, combine)| match combine {
            Combine::Sum => idx.iter().map(|&i| f[i]).sum::<f64>() >= *min,
            Combine::Any => idx.iter().any(|&i| f[i] >= *min),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct LabeledSample {
    pub galaxy_id: String,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curation {
    /// Sorted by galaxy id.
    pub samples: Vec<LabeledSample>,
    /// Rows matching more than one class, with the classes they matched.
    pub ambiguous: Vec<(String, Vec<u8>)>,
}

impl Curation {
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label as usize] += 1;
        }
        counts
    }
}

/// Labels rows matching exactly one class. Rows matching several classes
/// are dropped and reported; rows matching none are excluded silently.
pub fn select_clean(rows: &[CatalogRow], rules: &RuleSet) -> Result<Curation> {
    let tree = DecisionTree::gz2();
    let compiled = rules.compile(&tree)?;
    let mut labeled = BTreeMap::new();
    let mut ambiguous = BTreeMap::new();
    for row in rows {
        if row.fractions.len() != tree.num_answers() {
            return Err(Error::Schema(format!("row {} has {} fractions", row.galaxy_id, row.fractions.len())));
        }
        let mut classes: Vec<u8> = compiled.iter().filter(|r| r.matches(&row.fractions)).map(|r| r.class).collect();
        classes.sort_unstable();
        classes.dedup();
        match classes.len() {
            0 => {}
            1 => {
                labeled.insert(row.galaxy_id.clone(), classes[0]);
            }
            _ => {
                log::debug!("galaxy {} matches classes {classes:?}; dropped", row.galaxy_id);
                ambiguous.insert(row.galaxy_id.clone(), classes);
            }
        }
    }
    if !ambiguous.is_empty() {
        log::info!("{} rows matched more than one class and were dropped", ambiguous.len());
    }
    Ok(Curation {
        samples: labeled
            .into_iter()
            .map(|(galaxy_id, label)| LabeledSample { galaxy_id, label })
            .collect(),
        ambiguous: ambiguous.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_with(pairs: &[(&str, f64)]) -> CatalogRow {
        let tree = DecisionTree::gz2();
        let mut fractions = vec![0.0; 37];
        for (name, v) in pairs {
            fractions[tree.index_of_column(name).unwrap()] = *v;
        }
        CatalogRow {
            galaxy_id: "g".into(),
            fractions,
        }
    }

    #[test]
    fn completely_round_smooth() {
        let r = row_with(&[("Class1.1", 0.5), ("Class7.1", 0.6), ("Class6.2", 0.6)]);
        let c = select_clean(&[r], &RuleSet::gz2(Combine::Sum)).unwrap();
        assert_eq!(c.samples, vec![LabeledSample { galaxy_id: "g".into(), label: 0 }]);
    }

    #[test]
    fn no_match_is_excluded() {
        let r = row_with(&[("Class1.1", 0.4), ("Class7.1", 0.6), ("Class6.2", 0.6)]);
        let c = select_clean(&[r], &RuleSet::gz2(Combine::Sum)).unwrap();
        assert!(c.samples.is_empty() && c.ambiguous.is_empty());
    }

    #[test]
    fn class6_sum_versus_any() {
        let r = row_with(&[("Class6.1", 0.5), ("Class8.4", 0.3), ("Class8.6", 0.3)]);
        let sum = select_clean(std::slice::from_ref(&r), &RuleSet::gz2(Combine::Sum)).unwrap();
        assert_eq!(sum.samples[0].label, 6);
        let any = select_clean(&[r], &RuleSet::gz2(Combine::Any)).unwrap();
        assert!(any.samples.is_empty());
    }

    #[test]
    fn multiple_matches_are_dropped() {
        let r = row_with(&[
            ("Class1.1", 0.5),
            ("Class7.1", 0.6),
            ("Class6.2", 0.5),
            ("Class6.1", 0.45),
            ("Class8.5", 0.6),
        ]);
        let c = select_clean(&[r], &RuleSet::gz2(Combine::Sum)).unwrap();
        assert!(c.samples.is_empty());
        assert_eq!(c.ambiguous, vec![("g".to_string(), vec![0, 6])]);
    }

    #[test]
    fn rules_round_trip_through_toml() {
        let rules = RuleSet::gz2(Combine::Sum);
        assert_eq!(RuleSet::from_toml(&rules.to_toml()).unwrap(), rules);
        let bad = rules.to_toml().replace("0.469", "1.5");
        assert!(matches!(RuleSet::from_toml(&bad), Err(Error::Config(_))));
        let unknown = rules.to_toml().replace("Class7.1", "Class7.9");
        assert!(RuleSet::from_toml(&unknown).is_err());
    }
}
