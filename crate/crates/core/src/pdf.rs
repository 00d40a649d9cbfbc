//! Per-class densities: prior estimation, randomized anchor generation and
//! the immutable [`ClassPdf`] record.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kde::KernelSpec;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Class label within the whole stream.
pub type Label = u32;

/// Per-dimension mean and (population) variance of a class's source rows.
/// Kept for inspection only; density evaluation never reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl FeatureStats {
    pub fn of(rows: &Tensor) -> Self {
        let (n, d) = (rows.rows(), rows.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(rows.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut variance = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in variance.iter_mut().zip(rows.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        variance.iter_mut().for_each(|s| *s /= n as f64);
        Self { mean, variance }
    }
}

/// One class's kernel density: anchors, bandwidth and prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPdf {
    label: Label,
    anchors: Tensor,
    kernel: KernelSpec,
    prior: f64,
    stats: FeatureStats,
}

impl ClassPdf {
    pub fn new(label: Label, anchors: Tensor, bandwidth: f64, prior: f64, stats: FeatureStats) -> Result<Self> {
        if anchors.shape().len() != 2 || anchors.numel() == 0 {
            return Err(Error::contract(format!("class {label}: anchor set must be a non-empty matrix")));
        }
        if !anchors.is_finite() {
            return Err(Error::contract(format!("class {label}: non-finite anchor entry")));
        }
        if !(prior > 0.0 && prior <= 1.0) {
            return Err(Error::contract(format!("class {label}: prior {prior} outside (0, 1]")));
        }
        if stats.mean.len() != anchors.cols() || stats.variance.len() != anchors.cols() {
            return Err(Error::contract(format!("class {label}: diagnostics do not match anchor width")));
        }
        let kernel = KernelSpec::new(anchors.cols(), bandwidth)?;
        Ok(Self {
            label,
            anchors,
            kernel,
            prior,
            stats,
        })
    }

    /// Builds a density directly from anchors; diagnostics describe the
    /// anchors themselves.
    pub fn from_anchors(label: Label, anchors: Tensor, bandwidth: f64, prior: f64) -> Result<Self> {
        if anchors.numel() == 0 {
            return Err(Error::contract(format!("class {label}: empty anchor set")));
        }
        let stats = FeatureStats::of(&anchors);
        Self::new(label, anchors, bandwidth, prior, stats)
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn anchors(&self) -> &Tensor {
        &self.anchors
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn bandwidth(&self) -> f64 {
        self.kernel.bandwidth()
    }

    pub fn kernel(&self) -> KernelSpec {
        self.kernel
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    /// Floats held by the anchor matrix.
    pub fn storage_floats(&self) -> usize {
        self.anchors.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorEntry {
    pub label: Label,
    pub count: usize,
    pub prior: f64,
}

/// Relative class frequencies `n_j / n` of one task, ordered by label.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTable {
    entries: Vec<PriorEntry>,
}

impl PriorTable {
    pub fn entries(&self) -> &[PriorEntry] {
        &self.entries
    }

    pub fn get(&self, label: Label) -> Option<f64> {
        self.entries.iter().find(|e| e.label == label).map(|e| e.prior)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn estimate_priors(labels: &[Label]) -> Result<PriorTable> {
    if labels.is_empty() {
        return Err(Error::contract("cannot estimate priors from an empty label list"));
    }
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    let entries = counts
        .into_iter()
        .map(|(label, count)| PriorEntry {
            label,
            count,
            prior: count as f64 / n,
        })
        .collect();
    Ok(PriorTable { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Source rows drawn uniformly with replacement.
    #[default]
    WithReplacement,
    /// A random subset of distinct rows; needs `count <= rows`.
    WithoutReplacement,
}

/// How anchors are drawn for every class of a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorConfig {
    pub count: usize,
    pub sampling: Sampling,
    /// Perturb sampled rows with N(0, h²) noise. Off only for diagnostics.
    pub add_noise: bool,
}

impl AnchorConfig {
    pub fn new(count: usize) -> Self {
        Self {
            count,
            sampling: Sampling::WithReplacement,
            add_noise: true,
        }
    }
}

/// Draws `count` anchors: uniformly chosen source rows plus independent
/// Gaussian noise of standard deviation `noise_std` per coordinate.
pub fn generate_anchors(features: &Tensor, count: usize, noise_std: f64, sampling: Sampling, seed: u64) -> Result<Tensor> {
    if features.numel() == 0 || features.shape().len() != 2 {
        return Err(Error::contract("anchor generation needs a non-empty feature matrix"));
    }
    if count == 0 {
        return Err(Error::contract("anchor count must be at least 1"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::contract(format!("noise std must be finite and non-negative, got {noise_std}")));
    }
    let rows = features.rows();
    let mut rng = seeded(seed);
    let picks: Vec<usize> = match sampling {
        Sampling::WithReplacement => (0..count).map(|_| rng.random_range(0..rows)).collect(),
        Sampling::WithoutReplacement => {
            if count > rows {
                return Err(Error::contract(format!(
                    "cannot draw {count} distinct anchors from {rows} rows"
                )));
            }
            sample_indices(&mut rng, rows, count).into_vec()
        }
    };
    let mut out = features.select_rows(&picks)?;
    if noise_std > 0.0 {
        for v in out.data_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += noise_std * eps;
        }
    }
    Ok(out)
}

/// Builds one class's density from its embedded training features.
pub fn build_class_pdf(
    embedded: &Tensor,
    label: Label,
    prior: f64,
    kernel: KernelSpec,
    anchors: &AnchorConfig,
    seed: u64,
) -> Result<ClassPdf> {
    if embedded.shape().len() != 2 || embedded.cols() != kernel.dim() {
        return Err(Error::shape(
            "build_class_pdf",
            format!("features {:?} do not match embedding dimension {}", embedded.shape(), kernel.dim()),
        ));
    }
    let noise = if anchors.add_noise { kernel.bandwidth() } else { 0.0 };
    let points = generate_anchors(embedded, anchors.count, noise, anchors.sampling, seed)?;
    ClassPdf::new(label, points, kernel.bandwidth(), prior, FeatureStats::of(embedded))
}

/// Builds every class density of a task from its embedded training set.
/// Each class draws from its own seed derived from `seed` and its label.
pub fn build_task_pdfs(
    embedded: &Tensor,
    labels: &[Label],
    kernel: KernelSpec,
    anchors: &AnchorConfig,
    seed: u64,
) -> Result<Vec<ClassPdf>> {
    if embedded.rows() != labels.len() {
        return Err(Error::shape(
            "build_task_pdfs",
            format!("{} embedded rows for {} labels", embedded.rows(), labels.len()),
        ));
    }
    let priors = estimate_priors(labels)?;
    priors
        .entries()
        .iter()
        .map(|entry| {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == entry.label)
                .map(|(i, _)| i)
                .collect();
            let class_rows = embedded.select_rows(&rows)?;
            build_class_pdf(
                &class_rows,
                entry.label,
                entry.prior,
                kernel,
                anchors,
                derive_seed(seed, entry.label as u64),
            )
        })
        .collect()
}
