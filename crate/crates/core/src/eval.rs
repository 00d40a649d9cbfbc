//! Stream evaluation: the accuracy matrix, its summary metrics, and an
//! evaluator that scores each test point against each task exactly once.
//!
//! Bank entries are frozen, so a test point's score under task `k` never
//! changes after `k` is stored. Caching the running best task per point
//! turns the full matrix into O(points x tasks) work instead of
//! O(points x tasks²).

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::bank::{TaskEntry, TaskId};
use crate::error::{Error, Result};
use crate::pdf::Label;
use crate::stream::{Samples, TaskStream};

/// `a[i][j]`: accuracy on task `j`'s test set after training tasks
/// `0..=i` (zero-based). Row `i` has `i + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::contract(format!("accuracy row {} has {} entries, expected {}", i + 1, row.len(), i + 1)));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::contract(format!("accuracy {v} in row {} is outside [0, 1]", i + 1)));
            }
        }
        Ok(Self { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i)?.get(j).copied()
    }

    /// Mean accuracy over all tasks seen after `t` tasks (1-based).
    pub fn average_accuracy_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.rows.len() {
            return Err(Error::contract(format!("no accuracy row for {t} tasks (have {})", self.rows.len())));
        }
        let row = &self.rows[t - 1];
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    pub fn average_accuracy(&self) -> Result<f64> {
        self.average_accuracy_at(self.rows.len())
    }

    /// Mean over the first `T-1` tasks of the drop from their best earlier
    /// accuracy to their final accuracy.
    pub fn average_forgetting(&self) -> Result<f64> {
        let t = self.rows.len();
        if t < 2 {
            return Err(Error::contract(format!("forgetting needs at least 2 tasks, have {t}")));
        }
        let last = &self.rows[t - 1];
        let total: f64 = (0..t - 1)
            .map(|j| {
                let best = (j..t - 1).map(|k| self.rows[k][j]).fold(f64::NEG_INFINITY, f64::max);
                best - last[j]
            })
            .sum();
        Ok(total / (t - 1) as f64)
    }

    /// Average accuracy after each task: the incremental curve.
    pub fn curve(&self) -> Vec<f64> {
        (1..=self.rows.len()).map(|t| self.average_accuracy_at(t).expect("row exists")).collect()
    }
}

/// Pooled metrics over the test points of every seen task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageMetrics {
    pub task_id: TaskId,
    /// Predicted task is the true task.
    pub tp_acc: f64,
    /// The true task's entry picks the right class.
    pub wp_acc: f64,
    /// Final predicted class is right.
    pub overall_acc: f64,
}

#[derive(Debug, Clone)]
struct PointState {
    best_entry: usize,
    best_score: f64,
    predicted: Label,
    wp_correct: bool,
}

/// Best class log density and within-task decision of each row.
fn score(entry: &TaskEntry, samples: &Samples, clip: f64) -> Result<Vec<(f64, Label)>> {
    let z = entry.params().embed(&samples.tensor().expect("non-empty test split"))?;
    (0..samples.len())
        .into_par_iter()
        .map(|r| {
            let logs = entry.class_log_densities(z.row(r), clip)?;
            let best = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((best, entry.classify_logs(&logs).label))
        })
        .collect()
}

#[derive(Debug)]
pub struct IncrementalEvaluator<'a> {
    stream: &'a TaskStream,
    clip: f64,
    /// Per seen task, per test point.
    points: Vec<Vec<PointState>>,
    matrix: Vec<Vec<f64>>,
    stages: Vec<StageMetrics>,
}

impl<'a> IncrementalEvaluator<'a> {
    pub fn new(stream: &'a TaskStream, clip: f64) -> Self {
        Self {
            stream,
            clip,
            points: Vec::new(),
            matrix: Vec::new(),
            stages: Vec::new(),
        }
    }

    /// Scores everything affected by the last of `entries`, which must be
    /// the bank prefix ending at the next unseen stream task.
    pub fn absorb(&mut self, entries: &[TaskEntry]) -> Result<()> {
        let k = self.points.len();
        if entries.len() != k + 1 {
            return Err(Error::contract(format!("evaluator expects {} entries, got {}", k + 1, entries.len())));
        }
        let task = self
            .stream
            .tasks()
            .get(k)
            .ok_or_else(|| Error::contract(format!("bank has more tasks than the stream ({})", self.stream.len())))?;
        let entry = &entries[k];
        if entry.task_id() != task.task_id() || entry.labels() != task.label_set() {
            return Err(Error::contract(format!(
                "bank task {} does not match stream task {}",
                entry.task_id(),
                task.task_id()
            )));
        }
        if task.test().is_empty() {
            return Err(Error::contract(format!("task {} has no test rows", task.task_id())));
        }

        for (j, states) in self.points.iter_mut().enumerate() {
            let scores = score(entry, self.stream.tasks()[j].test(), self.clip)?;
            for (state, (s, label)) in states.iter_mut().zip(scores) {
                if s > state.best_score {
                    *state = PointState {
                        best_entry: k,
                        best_score: s,
                        predicted: label,
                        ..*state
                    };
                }
            }
        }

        let test = task.test();
        let mut fresh: Vec<PointState> = Vec::new();
        for (e, prior) in entries.iter().enumerate() {
            let scores = score(prior, test, self.clip)?;
            if e == 0 {
                fresh = scores
                    .iter()
                    .map(|&(s, label)| PointState {
                        best_entry: 0,
                        best_score: s,
                        predicted: label,
                        wp_correct: false,
                    })
                    .collect();
            } else {
                for (state, &(s, label)) in fresh.iter_mut().zip(&scores) {
                    if s > state.best_score {
                        state.best_entry = e;
                        state.best_score = s;
                        state.predicted = label;
                    }
                }
            }
            if e == k {
                for (state, (&(_, label), &truth)) in fresh.iter_mut().zip(scores.iter().zip(test.labels())) {
                    state.wp_correct = label == truth;
                }
            }
        }
        self.points.push(fresh);

        let (mut n, mut tp, mut wp, mut overall) = (0usize, 0usize, 0usize, 0usize);
        let mut row = Vec::with_capacity(k + 1);
        for (j, states) in self.points.iter().enumerate() {
            let truth = self.stream.tasks()[j].test().labels();
            let correct = states.iter().zip(truth).filter(|(s, &y)| s.predicted == y).count();
            row.push(correct as f64 / states.len() as f64);
            n += states.len();
            overall += correct;
            tp += states.iter().filter(|s| s.best_entry == j).count();
            wp += states.iter().filter(|s| s.wp_correct).count();
        }
        self.matrix.push(row);
        self.stages.push(StageMetrics {
            task_id: task.task_id(),
            tp_acc: tp as f64 / n as f64,
            wp_acc: wp as f64 / n as f64,
            overall_acc: overall as f64 / n as f64,
        });
        Ok(())
    }

    /// Current predicted `(task_id, label)` of every test point of task `j`
    /// (zero-based stream index).
    pub fn predictions(&self, j: usize) -> Option<Vec<(TaskId, Label)>> {
        let tasks = self.stream.tasks();
        Some(
            self.points
                .get(j)?
                .iter()
                .map(|s| (tasks[s.best_entry].task_id(), s.predicted))
                .collect(),
        )
    }

    pub fn finish(self) -> Result<(AccuracyMatrix, Vec<StageMetrics>)> {
        Ok((AccuracyMatrix::new(self.matrix)?, self.stages))
    }
}

/// Evaluates a stored bank on the first `bank.len()` tasks of a stream as
/// if they had been trained in order.
pub fn evaluate_bank(entries: &[TaskEntry], clip: f64, stream: &TaskStream) -> Result<(AccuracyMatrix, Vec<StageMetrics>)> {
    if entries.is_empty() {
        return Err(Error::contract("cannot evaluate an empty model bank"));
    }
    let mut ev = IncrementalEvaluator::new(stream, clip);
    for k in 0..entries.len() {
        ev.absorb(&entries[..=k])?;
    }
    ev.finish()
}

pub const METRICS_HEADER: &str = "task,tp_acc,wp_acc,overall_acc";

pub fn metrics_csv(stages: &[StageMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for s in stages {
        writeln!(out, "{},{:.6},{:.6},{:.6}", s.task_id, s.tp_acc, s.wp_acc, s.overall_acc).unwrap();
    }
    out
}

pub fn write_metrics_csv(stages: &[StageMetrics], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, metrics_csv(stages))?;
    Ok(())
}

/// Plain-text report of the final metrics and the accuracy matrix.
pub fn summary(matrix: &AccuracyMatrix, stages: &[StageMetrics]) -> String {
    let mut out = String::new();
    writeln!(out, "tasks: {}", matrix.tasks()).unwrap();
    if let Ok(a) = matrix.average_accuracy() {
        writeln!(out, "average_accuracy: {a:.6}").unwrap();
    }
    match matrix.average_forgetting() {
        Ok(f) => writeln!(out, "average_forgetting: {f:.6}").unwrap(),
        Err(_) => writeln!(out, "average_forgetting: n/a").unwrap(),
    }
    if let Some(last) = stages.last() {
        writeln!(out, "tp_acc: {:.6}\nwp_acc: {:.6}\noverall_acc: {:.6}", last.tp_acc, last.wp_acc, last.overall_acc).unwrap();
    }
    writeln!(out, "accuracy matrix:").unwrap();
    for row in matrix.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(out, "  {}", cells.join(" ")).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_accuracy_examples() {
        let m = AccuracyMatrix::new(vec![vec![1.0], vec![1.0, 1.0], vec![1.0, 0.9, 0.8]]).unwrap();
        assert!((m.average_accuracy().unwrap() - 0.9).abs() < 1e-15);
        let ones = AccuracyMatrix::new(vec![vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(ones.average_accuracy().unwrap(), 1.0);
        assert_eq!(m.curve().len(), 3);
    }

    #[test]
    fn forgetting_examples() {
        let drop = AccuracyMatrix::new(vec![vec![1.0], vec![0.6, 0.9]]).unwrap();
        assert!((drop.average_forgetting().unwrap() - 0.4).abs() < 1e-15);
        let flat = AccuracyMatrix::new(vec![vec![0.7], vec![0.7, 0.5], vec![0.7, 0.5, 0.9]]).unwrap();
        assert_eq!(flat.average_forgetting().unwrap(), 0.0);
        let one = AccuracyMatrix::new(vec![vec![0.7]]).unwrap();
        assert!(matches!(one.average_forgetting(), Err(Error::Contract(_))));
    }

    #[test]
    fn matrix_shape_is_checked() {
        assert!(AccuracyMatrix::new(vec![vec![1.0], vec![1.0]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![1.5]]).is_err());
        let empty = AccuracyMatrix::new(vec![]).unwrap();
        assert!(empty.average_accuracy().is_err());
    }

    #[test]
    fn csv_layout() {
        let s = StageMetrics {
            task_id: 1,
            tp_acc: 1.0,
            wp_acc: 0.5,
            overall_acc: 0.5,
        };
        assert_eq!(metrics_csv(&[s]), "task,tp_acc,wp_acc,overall_acc\n1,1.000000,0.500000,0.500000\n");
    }
}
