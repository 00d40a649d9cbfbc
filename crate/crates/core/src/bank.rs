//! The model bank: one frozen network and set of class densities per task.
//!
//! Prediction runs in two stages. Task prediction embeds the input with
//! every stored network and picks the task whose best class log density is
//! highest. Within-task prediction then applies Bayes' rule with the task's
//! class priors. The reported combined probability is the product of the
//! within-task posterior and a softmax over per-task best log densities;
//! the softmax never influences the decision itself.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::kde::{log_pdf_density, KernelSpec};
use crate::network::NetworkParams;
use crate::pdf::{ClassPdf, Label};
use crate::tensor::Tensor;

pub type TaskId = u32;

/// Frozen parameters and class densities of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry {
    task_id: TaskId,
    params: NetworkParams,
    class_pdfs: Vec<ClassPdf>,
}

/// Within-task Bayes decision.
#[derive(Debug, Clone, PartialEq)]
pub struct WithinTask {
    pub label: Label,
    /// `(label, posterior)` in label order.
    pub posteriors: Vec<(Label, f64)>,
}

impl WithinTask {
    pub fn posterior_of(&self, label: Label) -> Option<f64> {
        self.posteriors.iter().find(|(l, _)| *l == label).map(|(_, p)| *p)
    }
}

impl TaskEntry {
    pub fn new(task_id: TaskId, params: NetworkParams, mut class_pdfs: Vec<ClassPdf>) -> Result<Self> {
        if class_pdfs.is_empty() {
            return Err(Error::contract(format!("task {task_id} has no class densities")));
        }
        class_pdfs.sort_by_key(ClassPdf::label);
        if class_pdfs.windows(2).any(|w| w[0].label() == w[1].label()) {
            return Err(Error::contract(format!("task {task_id} has duplicate class labels")));
        }
        let kernel = class_pdfs[0].kernel();
        if class_pdfs.iter().any(|p| p.kernel() != kernel) {
            return Err(Error::contract(format!("task {task_id} mixes kernel dimensions or bandwidths")));
        }
        if params.embed_dim() != kernel.dim() {
            return Err(Error::shape(
                "task_entry",
                format!("network embeds to {} dims, densities live in {}", params.embed_dim(), kernel.dim()),
            ));
        }
        let total: f64 = class_pdfs.iter().map(ClassPdf::prior).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("task {task_id} priors sum to {total}, not 1")));
        }
        Ok(Self {
            task_id,
            params,
            class_pdfs,
        })
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn class_pdfs(&self) -> &[ClassPdf] {
        &self.class_pdfs
    }

    pub fn labels(&self) -> Vec<Label> {
        self.class_pdfs.iter().map(ClassPdf::label).collect()
    }

    pub fn kernel(&self) -> KernelSpec {
        self.class_pdfs[0].kernel()
    }

    /// Clipped log density of every class at embedding `z`, in label order.
    pub fn class_log_densities(&self, z: &[f64], clip: f64) -> Result<Vec<f64>> {
        self.class_pdfs.iter().map(|p| log_pdf_density(p, z, clip)).collect()
    }

    /// Bayes rule `P[Y=j | z] ∝ π_j k_j(z)`, evaluated in log space so it
    /// stays defined when every density is at the clip floor.
    pub fn classify(&self, z: &[f64], clip: f64) -> Result<WithinTask> {
        let logs = self.class_log_densities(z, clip)?;
        Ok(self.classify_logs(&logs))
    }

    pub(crate) fn classify_logs(&self, class_logs: &[f64]) -> WithinTask {
        let scores: Vec<f64> = self
            .class_pdfs
            .iter()
            .zip(class_logs)
            .map(|(p, l)| p.prior().ln() + l)
            .collect();
        let best = argmax_first(&scores);
        WithinTask {
            label: self.class_pdfs[best].label(),
            posteriors: self.class_pdfs.iter().map(ClassPdf::label).zip(softmax(&scores)).collect(),
        }
    }
}

/// Softmax of log scores, shifted by the maximum.
fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Index of the largest value; ties go to the earliest index.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Task-prediction outcome: the winner and every task's best class log
/// density, in bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub task_id: TaskId,
    pub scores: Vec<(TaskId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub task_id: TaskId,
    pub class_label: Label,
    /// Best class log density of the winning task.
    pub tp_score: f64,
    /// Softmax weight of the winning task over per-task best log densities.
    pub tp_probability: f64,
    pub wp_posterior: f64,
    /// `ln tp_probability + ln wp_posterior`.
    pub combined_log_prob: f64,
}

impl Prediction {
    pub fn combined_probability(&self) -> f64 {
        self.combined_log_prob.exp()
    }
}

/// Per-input class log densities under every task of a bank.
#[derive(Debug, Clone)]
struct Scan {
    /// `[task][class]`
    class_logs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBank {
    kernel: KernelSpec,
    clip: f64,
    entries: Vec<TaskEntry>,
}

impl ModelBank {
    /// An empty bank; every task must use `kernel`'s dimension and bandwidth.
    pub fn new(kernel: KernelSpec, clip: f64) -> Result<Self> {
        if !clip.is_finite() {
            return Err(Error::config("clip_threshold", "must be finite"));
        }
        Ok(Self {
            kernel,
            clip,
            entries: Vec::new(),
        })
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn entries(&self) -> &[TaskEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, task_id: TaskId) -> Option<&TaskEntry> {
        self.entries.iter().find(|e| e.task_id == task_id)
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.params.input_dim())
    }

    /// A bank holding only the first `count` entries.
    pub fn prefix(&self, count: usize) -> Self {
        Self {
            kernel: self.kernel,
            clip: self.clip,
            entries: self.entries[..count.min(self.entries.len())].to_vec(),
        }
    }

    /// Appends a task. Earlier entries are never modified.
    pub fn add_task(&mut self, entry: TaskEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.task_id <= last.task_id {
                return Err(Error::contract(format!(
                    "task id {} is not greater than the last stored id {}",
                    entry.task_id, last.task_id
                )));
            }
        }
        if entry.kernel() != self.kernel {
            return Err(Error::contract(format!(
                "task {} uses dim {} / bandwidth {}, bank uses dim {} / bandwidth {}",
                entry.task_id,
                entry.kernel().dim(),
                entry.kernel().bandwidth(),
                self.kernel.dim(),
                self.kernel.bandwidth()
            )));
        }
        if let Some(d) = self.input_dim() {
            if entry.params.input_dim() != d {
                return Err(Error::shape("add_task", format!("input dimension {} differs from bank's {d}", entry.params.input_dim())));
            }
        }
        let seen: BTreeSet<Label> = self.entries.iter().flat_map(TaskEntry::labels).collect();
        if let Some(dup) = entry.labels().into_iter().find(|l| seen.contains(l)) {
            return Err(Error::contract(format!(
                "label {dup} of task {} already belongs to an earlier task",
                entry.task_id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    fn check_ready(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::contract("prediction needs a non-empty model bank"));
        }
        Ok(())
    }

    fn scan(&self, x: &Tensor) -> Result<Vec<Scan>> {
        self.check_ready()?;
        let mut scans = vec![Scan { class_logs: Vec::with_capacity(self.entries.len()) }; x.rows()];
        for entry in &self.entries {
            let z = entry.params.embed(x)?;
            for (r, scan) in scans.iter_mut().enumerate() {
                scan.class_logs.push(entry.class_log_densities(z.row(r), self.clip)?);
            }
        }
        Ok(scans)
    }

    fn best_per_task(scan: &Scan) -> Vec<f64> {
        scan.class_logs
            .iter()
            .map(|logs| logs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    fn decide(&self, scan: &Scan) -> Prediction {
        let best = Self::best_per_task(scan);
        let winner = argmax_first(&best);
        let entry = &self.entries[winner];
        let wp = entry.classify_logs(&scan.class_logs[winner]);
        let wp_posterior = wp.posterior_of(wp.label).expect("winner is in its own task");
        let tp_probability = softmax(&best)[winner];
        Prediction {
            task_id: entry.task_id,
            class_label: wp.label,
            tp_score: best[winner],
            tp_probability,
            wp_posterior,
            combined_log_prob: tp_probability.ln() + wp_posterior.ln(),
        }
    }

    /// Task prediction for one raw input row.
    pub fn predict_task(&self, x: &[f64]) -> Result<TaskScores> {
        let scan = self.scan(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        let best = Self::best_per_task(&scan[0]);
        let winner = argmax_first(&best);
        Ok(TaskScores {
            task_id: self.entries[winner].task_id,
            scores: self.entries.iter().map(|e| e.task_id).zip(best).collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&t)?.remove(0))
    }

    /// Predictions for every row of `x`; row results equal [`Self::predict`]
    /// on that row alone.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self.scan(x)?.iter().map(|s| self.decide(s)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::DEFAULT_CLIP;
    use crate::network::{Activation, Linear};

    fn identity(d: usize) -> NetworkParams {
        NetworkParams::new(vec![], Linear::identity(d), Activation::Tanh).unwrap()
    }

    fn single_anchor_task(id: TaskId, classes: &[(Label, f64, f64)]) -> TaskEntry {
        let pdfs = classes
            .iter()
            .map(|&(l, a, p)| ClassPdf::from_anchors(l, Tensor::from_rows(&[[a]]).unwrap(), 1.0, p).unwrap())
            .collect();
        TaskEntry::new(id, identity(1), pdfs).unwrap()
    }

    fn bank() -> ModelBank {
        ModelBank::new(KernelSpec::new(1, 1.0).unwrap(), DEFAULT_CLIP).unwrap()
    }

    #[test]
    fn add_task_contracts() {
        let mut b = bank();
        b.add_task(single_anchor_task(1, &[(0, 0.0, 0.5), (1, 1.0, 0.5)])).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.add_task(single_anchor_task(2, &[(1, 3.0, 1.0)])).is_err());
        assert!(b.add_task(single_anchor_task(1, &[(5, 3.0, 1.0)])).is_err());
        let wide = TaskEntry::new(
            3,
            identity(2),
            vec![ClassPdf::from_anchors(9, Tensor::from_rows(&[[0.0, 0.0]]).unwrap(), 1.0, 1.0).unwrap()],
        )
        .unwrap();
        assert!(b.add_task(wide).is_err());
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn entry_contracts() {
        let pdf = |l, p| ClassPdf::from_anchors(l, Tensor::from_rows(&[[0.0]]).unwrap(), 1.0, p).unwrap();
        assert!(TaskEntry::new(1, identity(1), vec![]).is_err());
        assert!(TaskEntry::new(1, identity(1), vec![pdf(0, 0.5), pdf(0, 0.5)]).is_err());
        assert!(TaskEntry::new(1, identity(1), vec![pdf(0, 0.5), pdf(1, 0.4)]).is_err());
        assert!(TaskEntry::new(1, identity(2), vec![pdf(0, 1.0)]).is_err());
    }

    #[test]
    fn empty_bank_cannot_predict() {
        assert!(matches!(bank().predict(&[0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_task_bank() {
        let mut b = bank();
        b.add_task(single_anchor_task(4, &[(0, 0.0, 0.5), (1, 3.0, 0.5)])).unwrap();
        for x in [-10.0, 0.0, 2.0, 50.0] {
            let p = b.predict(&[x]).unwrap();
            assert_eq!(p.task_id, 4);
            assert_eq!(p.tp_probability, 1.0);
            assert!((p.combined_probability() - p.wp_posterior).abs() < 1e-15);
        }
    }

    #[test]
    fn nearest_task_wins() {
        let mut b = bank();
        for (id, a) in [(1, 0.0), (2, 10.0), (3, 20.0)] {
            b.add_task(single_anchor_task(id, &[(id, a, 1.0)])).unwrap();
        }
        let s = b.predict_task(&[9.4]).unwrap();
        assert_eq!(s.task_id, 2);
        // Brute-force table: log K(x - a) for every task.
        let k = KernelSpec::new(1, 1.0).unwrap();
        for ((_, got), a) in s.scores.iter().zip([0.0, 10.0, 20.0]) {
            assert!((got - k.log_kernel_h(&[9.4 - a]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn within_task_posteriors() {
        let one = single_anchor_task(1, &[(0, 0.0, 1.0)]);
        assert_eq!(one.classify(&[3.0], DEFAULT_CLIP).unwrap().posteriors, vec![(0, 1.0)]);

        let sym = single_anchor_task(1, &[(0, -1.0, 0.5), (1, 1.0, 0.5)]);
        let w = sym.classify(&[0.0], DEFAULT_CLIP).unwrap();
        assert_eq!(w.label, 0);
        assert_eq!(w.posteriors, vec![(0, 0.5), (1, 0.5)]);

        let skew = single_anchor_task(1, &[(0, -1.0, 0.75), (1, 1.0, 0.25)]);
        let w = skew.classify(&[0.0], DEFAULT_CLIP).unwrap();
        assert_eq!(w.label, 0);
        assert!((w.posterior_of(0).unwrap() - 0.75).abs() < 1e-15);
        assert!((w.posterior_of(1).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn underflowed_densities_fall_back_to_clipped_scores() {
        let t = single_anchor_task(1, &[(0, -1.0, 0.3), (1, 1.0, 0.7)]);
        // Both densities sit at the clip floor; the prior decides.
        let w = t.classify(&[1e6], DEFAULT_CLIP).unwrap();
        assert_eq!(w.label, 1);
        assert!((w.posteriors.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combined_probability_is_a_product() {
        let mut b = bank();
        b.add_task(single_anchor_task(1, &[(0, 0.0, 0.5), (1, 1.5, 0.5)])).unwrap();
        b.add_task(single_anchor_task(2, &[(2, 2.0, 0.5), (3, 4.0, 0.5)])).unwrap();
        for x in [-1.0, 0.7, 1.2, 2.5, 3.0] {
            let p = b.predict(&[x]).unwrap();
            assert!((p.combined_probability() - p.tp_probability * p.wp_posterior).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&p.wp_posterior));
        }
    }

    #[test]
    fn batch_and_single_predictions_match() {
        let mut b = bank();
        b.add_task(single_anchor_task(1, &[(0, 0.0, 0.5), (1, 1.5, 0.5)])).unwrap();
        b.add_task(single_anchor_task(2, &[(2, 2.0, 0.5), (3, 4.0, 0.5)])).unwrap();
        let xs = Tensor::from_rows(&[[0.1], [1.9], [3.3]]).unwrap();
        let batch = b.predict_batch(&xs).unwrap();
        for (r, p) in batch.iter().enumerate() {
            assert_eq!(p, &b.predict(xs.row(r)).unwrap());
        }
    }
}
