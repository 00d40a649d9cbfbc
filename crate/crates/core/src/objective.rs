//! The GKDE training loss. Each sample is pulled toward its own class
//! density and pushed away from every other class density of the task:
//!
//! `L(z) = −π_y k̂_y(z) + Σ_{j≠y} π_j k̂_j(z)`
//!
//! where `k̂_j` is the anchor-mean Gaussian density of class `j` with every
//! per-anchor log kernel clipped below at `γ` before exponentiation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_gradient, relative_error, Tape, Var};
use crate::error::{Error, Result};
use crate::kde::{clipped_log_kernels, pairwise_sum, DEFAULT_CLIP};
use crate::network::NetworkParams;
use crate::pdf::{ClassPdf, Label};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Which prior weights the repulsion terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepulsionPrior {
    /// Each foreign class `j` is weighted by its own prior `π_j`.
    #[default]
    PerClass,
    /// Every foreign class is weighted by the sample's class prior `π_y`.
    AnchorClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub clip_threshold: f64,
    pub reduction: Reduction,
    pub repulsion_prior: RepulsionPrior,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            clip_threshold: DEFAULT_CLIP,
            reduction: Reduction::Mean,
            repulsion_prior: RepulsionPrior::PerClass,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.clip_threshold.is_finite() {
            return Err(Error::config("clip_threshold", "must be finite"));
        }
        Ok(())
    }
}

/// Signed prior weight of class `pdfs[j]` in the loss of each sample.
fn class_weights(pdfs: &[ClassPdf], labels: &[Label], config: &LossConfig) -> Result<Vec<Vec<f64>>> {
    let own: Vec<f64> = labels
        .iter()
        .map(|&y| {
            pdfs.iter()
                .find(|p| p.label() == y)
                .map(ClassPdf::prior)
                .ok_or_else(|| Error::contract(format!("label {y} has no class density in this task")))
        })
        .collect::<Result<_>>()?;
    Ok(pdfs
        .iter()
        .map(|pdf| {
            labels
                .iter()
                .zip(&own)
                .map(|(&y, &own_prior)| {
                    if y == pdf.label() {
                        -pdf.prior()
                    } else {
                        match config.repulsion_prior {
                            RepulsionPrior::PerClass => pdf.prior(),
                            RepulsionPrior::AnchorClass => own_prior,
                        }
                    }
                })
                .collect()
        })
        .collect())
}

fn validate(pdfs: &[ClassPdf], batch: usize, dim: usize, labels: &[Label], config: &LossConfig) -> Result<()> {
    config.validate()?;
    if batch == 0 || labels.is_empty() {
        return Err(Error::contract("loss needs a non-empty batch"));
    }
    if batch != labels.len() {
        return Err(Error::shape("gkde_loss", format!("{batch} embeddings for {} labels", labels.len())));
    }
    if pdfs.is_empty() {
        return Err(Error::contract("loss needs at least one class density"));
    }
    for (i, p) in pdfs.iter().enumerate() {
        if p.dim() != dim {
            return Err(Error::shape("gkde_loss", format!("class {} has dimension {}, embeddings have {dim}", p.label(), p.dim())));
        }
        if pdfs[..i].iter().any(|q| q.label() == p.label()) {
            return Err(Error::contract(format!("duplicate class density for label {}", p.label())));
        }
    }
    Ok(())
}

/// Records the loss for embeddings `z` (`[batch, d]`) on `tape`.
pub fn gkde_loss(tape: &mut Tape, pdfs: &[ClassPdf], z: Var, labels: &[Label], config: &LossConfig) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("gkde_loss", "embeddings must be a matrix"));
    }
    let batch = shape[0];
    validate(pdfs, batch, shape[1], labels, config)?;
    let weights = class_weights(pdfs, labels, config)?;

    let mut total: Option<Var> = None;
    for (pdf, w) in pdfs.iter().zip(weights) {
        let spec = pdf.kernel();
        let h = spec.bandwidth();
        let anchors = tape.constant(pdf.anchors().clone());
        let dist = tape.sq_dist(z, anchors)?;
        let scaled = tape.scale(dist, -1.0 / (2.0 * h * h));
        let log_k = tape.add_scalar(scaled, spec.log_normalizer());
        let clipped = tape.clamp_min(log_k, config.clip_threshold);
        let k = tape.exp(clipped);
        let sums = tape.sum_rows(k)?;
        let density = tape.scale(sums, 1.0 / pdf.anchor_count() as f64);
        let w = tape.constant(Tensor::matrix(batch, 1, w)?);
        let term = tape.mul(density, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let per_sample = total.expect("at least one class density");
    let summed = tape.sum(per_sample);
    Ok(match config.reduction {
        Reduction::Sum => summed,
        Reduction::Mean => tape.scale(summed, 1.0 / batch as f64),
    })
}

/// The same loss evaluated directly from the density module, off-tape.
pub fn gkde_loss_value(pdfs: &[ClassPdf], z: &Tensor, labels: &[Label], config: &LossConfig) -> Result<f64> {
    if z.shape().len() != 2 {
        return Err(Error::shape("gkde_loss", "embeddings must be a matrix"));
    }
    let batch = z.rows();
    validate(pdfs, batch, z.cols(), labels, config)?;
    let weights = class_weights(pdfs, labels, config)?;
    let mut per_sample = vec![0.0; batch];
    for (pdf, w) in pdfs.iter().zip(&weights) {
        for (b, acc) in per_sample.iter_mut().enumerate() {
            let logs = clipped_log_kernels(pdf, z.row(b), config.clip_threshold)?;
            let vals: Vec<f64> = logs.iter().map(|v| v.exp()).collect();
            *acc += w[b] * pairwise_sum(&vals) / vals.len() as f64;
        }
    }
    let total: f64 = per_sample.iter().sum();
    Ok(match config.reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / batch as f64,
    })
}

/// Loss value and parameter gradients (canonical order) for one batch.
pub fn loss_and_gradients(
    net: &NetworkParams,
    pdfs: &[ClassPdf],
    x: &Tensor,
    labels: &[Label],
    config: &LossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (z, params) = net.record(&mut tape, x)?;
    let loss = gkde_loss(&mut tape, pdfs, z, labels, config)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    let grads = params
        .iter()
        .map(|&p| grads.get(p).cloned().ok_or_else(|| Error::contract("missing parameter gradient")))
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

/// Worst relative disagreement between tape gradients and central finite
/// differences, over coordinates whose gradient magnitude exceeds `floor`.
pub fn loss_gradient_check(
    net: &NetworkParams,
    pdfs: &[ClassPdf],
    x: &Tensor,
    labels: &[Label],
    config: &LossConfig,
    step: f64,
    floor: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_gradients(net, pdfs, x, labels, config)?;
    let params: Vec<Tensor> = net.tensors().into_iter().cloned().collect();
    let numeric = finite_difference_gradient(
        |p| {
            let perturbed = net.with_tensors(p)?;
            gkde_loss_value(pdfs, &perturbed.embed(x)?, labels, config)
        },
        &params,
        step,
    )?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&ga, &gn) in a.data().iter().zip(n.data()) {
            if ga.abs() > floor {
                worst = worst.max(relative_error(ga, gn));
            }
        }
    }
    Ok(worst)
}
