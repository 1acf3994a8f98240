use std::fmt;

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};

/// Square count matrix; entry `(x, y)` counts samples of true class `x`
/// predicted as `y`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != k) {
            return Err(shape_err!("confusion matrix row has {} entries, expected {k}", r.len()));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Support of class `c`.
    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|y| self.get(c, y)).sum()
    }

    /// Number of samples predicted as `c`.
    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|x| self.get(x, c)).sum()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(shape_err!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        if p >= classes || l >= classes {
            return Err(invalid!("sample {i}: class out of range 0..{classes} (predicted {p}, label {l})"));
        }
        cm.counts[l * classes + p] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub total: u64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub classes: Vec<ClassMetrics>,
}

fn ratio(num: f64, den: f64, undefined: &mut bool) -> f64 {
    if den == 0.0 {
        *undefined = true;
        0.0
    } else {
        num / den
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if cm.classes == 0 || total == 0 {
        return Err(invalid!("cannot report on an empty confusion matrix"));
    }
    let classes: Vec<ClassMetrics> = (0..cm.classes)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let mut undefined = false;
            let precision = ratio(tp, cm.col_sum(c) as f64, &mut undefined);
            let recall = ratio(tp, cm.row_sum(c) as f64, &mut undefined);
            let f1 = ratio(2.0 * precision * recall, precision + recall, &mut undefined);
            ClassMetrics {
                class: c,
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
                undefined,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / classes.len() as f64;
    Ok(ClassificationReport {
        accuracy: cm.trace() as f64 / total as f64,
        total,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        classes,
    })
}

impl ClassificationReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>7} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support")?;
        for m in &self.classes {
            writeln!(
                f,
                "{:>7} {:>9.4} {:>9.4} {:>9.4} {:>8}{}",
                m.class,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                if m.undefined { "  (undefined, scored 0)" } else { "" }
            )?;
        }
        writeln!(
            f,
            "{:>7} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1, self.total
        )?;
        write!(f, "accuracy {:.4} ({} samples)", self.accuracy, self.total)
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>6}", "t\\p")?;
        for y in 0..self.classes {
            write!(f, " {y:>6}")?;
        }
        for x in 0..self.classes {
            write!(f, "\n{x:>6}")?;
            for y in 0..self.classes {
                write!(f, " {:>6}", self.get(x, y))?;
            }
        }
        Ok(())
    }
}
