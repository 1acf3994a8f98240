//! The 11-task, 37-answer GZ2 questionnaire and vote-mass propagation.

use super::{CatalogRow, NUM_ANSWERS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Next {
    /// 1-based task number.
    Task(usize),
    End,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub label: String,
    pub next: Next,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub question: String,
    pub answers: Vec<Answer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    tasks: Vec<Task>,
    /// Flat index of each task's first answer.
    offsets: Vec<usize>,
    order: Vec<usize>,
}

fn task(question: &str, answers: &[(&str, Next)]) -> Task {
    Task {
        question: question.to_string(),
        answers: answers
            .iter()
            .map(|&(label, next)| Answer {
                label: label.to_string(),
                next,
            })
            .collect(),
    }
}

impl DecisionTree {
    /// Validates links and computes a topological order. Task 1 is the root.
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("decision tree has no tasks".into()));
        }
        let n = tasks.len();
        let mut offsets = Vec::with_capacity(n);
        let mut total = 0;
        let mut indegree = vec![0usize; n];
        for (i, t) in tasks.iter().enumerate() {
            if t.answers.is_empty() {
                return Err(Error::Config(format!("task {} has no answers", i + 1)));
            }
            offsets.push(total);
            total += t.answers.len();
            for a in &t.answers {
                if let Next::Task(j) = a.next {
                    if j == 0 || j > n {
                        return Err(Error::Config(format!("task {} links to unknown task {j}", i + 1)));
                    }
                    indegree[j - 1] += 1;
                }
            }
        }
        // Kahn's algorithm; lowest task number first for a stable order.
        let mut order = Vec::with_capacity(n);
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        while let Some(pos) = ready.iter().enumerate().min_by_key(|(_, &t)| t).map(|(p, _)| p) {
            let t = ready.swap_remove(pos);
            order.push(t);
            for a in &tasks[t].answers {
                if let Next::Task(j) = a.next {
                    indegree[j - 1] -= 1;
                    if indegree[j - 1] == 0 {
                        ready.push(j - 1);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::Config("decision tree links contain a cycle".into()));
        }
        Ok(DecisionTree {
            tasks,
            offsets,
            order,
        })
    }

    /// The GZ2 tree: answers route to follow-up tasks or end.
    pub fn gz2() -> Self {
        use Next::{End, Task as T};
        let tasks = vec![
            task(
                "Is the galaxy simply smooth and rounded, with no sign of a disk?",
                &[("smooth", T(7)), ("features or disk", T(2)), ("star or artifact", End)],
            ),
            task("Could this be a disk viewed edge-on?", &[("yes", T(9)), ("no", T(3))]),
            task(
                "Is there a sign of a bar feature through the centre of the galaxy?",
                &[("yes", T(4)), ("no", T(4))],
            ),
            task("Is there any sign of a spiral arm pattern?", &[("yes", T(10)), ("no", T(5))]),
            task(
                "How prominent is the central bulge, compared with the rest of the galaxy?",
                &[
                    ("no bulge", T(6)),
                    ("just noticeable", T(6)),
                    ("obvious", T(6)),
                    ("dominant", T(6)),
                ],
            ),
            task("Is there anything odd?", &[("yes", T(8)), ("no", End)]),
            task(
                "How rounded is it?",
                &[("completely round", T(6)), ("in between", T(6)), ("cigar-shaped", T(6))],
            ),
            task(
                "Is the odd feature a ring, or is the galaxy disturbed or irregular?",
                &[
                    ("ring", End),
                    ("lens or arc", End),
                    ("disturbed", End),
                    ("irregular", End),
                    ("other", End),
                    ("merger", End),
                    ("dust lane", End),
                ],
            ),
            task(
                "Does the galaxy have a bulge at its centre? If so, what shape?",
                &[("rounded", T(6)), ("boxy", T(6)), ("no bulge", T(6))],
            ),
            task(
                "How tightly wound do the spiral arms appear?",
                &[("tight", T(11)), ("medium", T(11)), ("loose", T(11))],
            ),
            task(
                "How many spiral arms are there?",
                &[
                    ("1", T(5)),
                    ("2", T(5)),
                    ("3", T(5)),
                    ("4", T(5)),
                    ("more than four", T(5)),
                    ("can't tell", T(5)),
                ],
            ),
        ];
        let tree = DecisionTree::new(tasks).expect("GZ2 tree is valid");
        debug_assert_eq!(tree.num_answers(), NUM_ANSWERS);
        tree
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn num_answers(&self) -> usize {
        self.tasks.iter().map(|t| t.answers.len()).sum()
    }

    /// Flat index of (1-based task, 1-based answer).
    pub fn index(&self, task: usize, answer: usize) -> Option<usize> {
        let t = self.tasks.get(task.checked_sub(1)?)?;
        (answer >= 1 && answer <= t.answers.len()).then(|| self.offsets[task - 1] + answer - 1)
    }

    /// Range of flat indices belonging to a 1-based task.
    pub fn task_range(&self, task: usize) -> std::ops::Range<usize> {
        let start = self.offsets[task - 1];
        start..start + self.tasks[task - 1].answers.len()
    }

    /// Catalog column names `Class{task}.{answer}` in flat order.
    pub fn column_names(&self) -> Vec<String> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| (1..=task.answers.len()).map(move |a| format!("Class{}.{a}", t + 1)))
            .collect()
    }

    /// Flat index for a `Class{t}.{a}` column name.
    pub fn index_of_column(&self, name: &str) -> Option<usize> {
        let rest = name.strip_prefix("Class")?;
        let (t, a) = rest.split_once('.')?;
        self.index(t.parse().ok()?, a.parse().ok()?)
    }

    /// Task indices (0-based) in dependency order.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }
}

/// Weights each answer by the vote mass reaching its task: the root task
/// keeps its raw fractions, and a task's inbound mass is the sum of the
/// weights of every answer linking to it (capped at 1).
pub fn propagate_tree(row: &CatalogRow, tree: &DecisionTree) -> Result<Vec<f64>> {
    let n = tree.num_answers();
    if row.fractions.len() != n {
        return Err(Error::Schema(format!(
            "row {} has {} fractions, tree has {n} answers",
            row.galaxy_id,
            row.fractions.len()
        )));
    }
    let mut mass = vec![0.0f64; tree.tasks.len()];
    mass[0] = 1.0;
    let mut out = vec![0.0; n];
    for &t in tree.topological_order() {
        let inbound = mass[t].min(1.0);
        for (a, answer) in tree.tasks[t].answers.iter().enumerate() {
            let idx = tree.offsets[t] + a;
            let w = row.fractions[idx] * inbound;
            out[idx] = w;
            if let Next::Task(j) = answer.next {
                mass[j - 1] += w;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn row(fractions: Vec<f64>) -> CatalogRow {
        CatalogRow {
            galaxy_id: "1".into(),
            fractions,
        }
    }

    #[test]
    fn gz2_shape() {
        let tree = DecisionTree::gz2();
        assert_eq!(tree.tasks().len(), 11);
        assert_eq!(tree.num_answers(), 37);
        let cols = tree.column_names();
        assert_eq!(cols.first().unwrap(), "Class1.1");
        assert_eq!(cols.last().unwrap(), "Class11.6");
        assert_eq!(tree.index_of_column("Class7.1"), Some(15));
        assert_eq!(tree.index_of_column("Class12.1"), None);
        assert_eq!(tree.topological_order()[0], 0);
    }

    #[test]
    fn star_or_artifact_ends_everything() {
        let tree = DecisionTree::gz2();
        let mut f = vec![0.5; 37];
        f[0] = 0.0;
        f[1] = 0.0;
        f[2] = 1.0;
        let w = propagate_tree(&row(f), &tree).unwrap();
        assert_eq!(&w[..3], &[0.0, 0.0, 1.0]);
        assert!(w[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smooth_chain_to_roundness() {
        let tree = DecisionTree::gz2();
        let mut f = vec![0.0; 37];
        f[0] = 0.8;
        f[1] = 0.2;
        let i = tree.index(7, 1).unwrap();
        f[i] = 0.5;
        let w = propagate_tree(&row(f), &tree).unwrap();
        assert!((w[i] - 0.4).abs() < 1e-12);
        assert_eq!(w[0], 0.8);
    }

    #[test]
    fn cycle_is_a_configuration_error() {
        let tasks = vec![
            task("a", &[("x", Next::Task(2))]),
            task("b", &[("y", Next::Task(1))]),
        ];
        assert!(matches!(DecisionTree::new(tasks), Err(Error::Config(_))));
        let dangling = vec![task("a", &[("x", Next::Task(5))])];
        assert!(DecisionTree::new(dangling).is_err());
    }

    /// Per-task fractions that sum to at most 1.
    fn valid_fractions() -> impl Strategy<Value = Vec<f64>> {
        let tree = DecisionTree::gz2();
        let sizes: Vec<usize> = tree.tasks().iter().map(|t| t.answers.len()).collect();
        sizes
            .into_iter()
            .map(|k| {
                (proptest::collection::vec(0.0f64..1.0, k), 0.0f64..=1.0).prop_map(|(raw, total)| {
                    let s: f64 = raw.iter().sum::<f64>().max(1e-12);
                    raw.into_iter().map(|v| v / s * total).collect::<Vec<f64>>()
                })
            })
            .collect::<Vec<_>>()
            .prop_map(|parts| parts.concat())
    }

    proptest! {
        #[test]
        fn weights_bounded_by_raw_and_mass(f in valid_fractions()) {
            let tree = DecisionTree::gz2();
            let w = propagate_tree(&row(f.clone()), &tree).unwrap();
            for i in tree.task_range(1) {
                prop_assert_eq!(w[i], f[i]);
            }
            for i in 3..37 {
                prop_assert!(w[i] >= 0.0 && w[i] <= f[i] + 1e-12);
            }
            for t in 1..=11 {
                let s: f64 = tree.task_range(t).map(|i| w[i]).sum();
                prop_assert!(s <= 1.0 + 1e-9);
            }
        }
    }
}
