//! Scalar-bandwidth Gaussian kernel density evaluation in linear and log
//! space.
//!
//! The kernel is the standard normal density scaled by `h` in every
//! coordinate:
//!
//! `K_h(δ) = h^-d (2π)^(-d/2) exp(-‖δ‖² / 2h²)`
//!
//! and a class density is the arithmetic mean of `K_h` over its anchors.
//! The log-space path clips each per-anchor log kernel at a floor `γ`
//! before the log-sum-exp, which keeps every result finite.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdf::ClassPdf;
use crate::tensor::sq_distance;

/// Default per-anchor log-kernel floor.
pub const DEFAULT_CLIP: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    dim: usize,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(dim: usize, bandwidth: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::config("bandwidth", format!("must be positive and finite, got {bandwidth}")));
        }
        Ok(Self { dim, bandwidth })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `-d ln h - (d/2) ln 2π`, the log of the kernel at its center.
    pub fn log_normalizer(&self) -> f64 {
        let d = self.dim as f64;
        -d * self.bandwidth.ln() - 0.5 * d * (2.0 * PI).ln()
    }

    fn check(&self, delta_len: usize) -> Result<()> {
        if delta_len != self.dim {
            return Err(Error::shape(
                "kernel",
                format!("offset has length {delta_len}, kernel dimension is {}", self.dim),
            ));
        }
        Ok(())
    }

    /// Log kernel from a precomputed squared distance.
    #[inline]
    pub fn log_kernel_sq(&self, sq_norm: f64) -> f64 {
        self.log_normalizer() - sq_norm / (2.0 * self.bandwidth * self.bandwidth)
    }

    pub fn kernel_h(&self, delta: &[f64]) -> Result<f64> {
        self.check(delta.len())?;
        let sq: f64 = delta.iter().map(|v| v * v).sum();
        let d = self.dim as f64;
        let h = self.bandwidth;
        Ok(h.powf(-d) * (2.0 * PI).powf(-0.5 * d) * (-sq / (2.0 * h * h)).exp())
    }

    pub fn log_kernel_h(&self, delta: &[f64]) -> Result<f64> {
        self.check(delta.len())?;
        Ok(self.log_kernel_sq(delta.iter().map(|v| v * v).sum()))
    }
}

/// Roughness `R(K) = ∫K²` and second moment `μ₂(K) = ∫z²K` of a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConstants {
    pub roughness: f64,
    pub second_moment: f64,
}

impl KernelConstants {
    /// Constants of the product standard-normal kernel in `dim` dimensions.
    /// `μ₂` is per coordinate, so it is 1 regardless of `dim`.
    pub fn gaussian(dim: usize) -> Self {
        Self {
            roughness: (4.0 * PI).powf(-0.5 * dim as f64),
            second_moment: 1.0,
        }
    }
}

/// Pairwise (cascade) summation; order-dependent only through rounding.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// `ln Σ exp(v)` without overflow or underflow of the dominant term.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let shifted: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    max + pairwise_sum(&shifted).ln()
}

fn check_query(pdf: &ClassPdf, z: &[f64]) -> Result<()> {
    if z.len() != pdf.dim() {
        return Err(Error::shape(
            "density",
            format!("query has length {}, density dimension is {}", z.len(), pdf.dim()),
        ));
    }
    Ok(())
}

/// Mean of `K_h(z - a)` over the anchors of `pdf`.
pub fn pdf_density(pdf: &ClassPdf, z: &[f64]) -> Result<f64> {
    check_query(pdf, z)?;
    let spec = pdf.kernel();
    let anchors = pdf.anchors();
    let values: Vec<f64> = (0..anchors.rows())
        .map(|i| spec.log_kernel_sq(sq_distance(z, anchors.row(i))).exp())
        .collect();
    Ok(pairwise_sum(&values) / values.len() as f64)
}

/// Per-anchor log kernels, each clipped below at `clip`.
pub fn clipped_log_kernels(pdf: &ClassPdf, z: &[f64], clip: f64) -> Result<Vec<f64>> {
    check_query(pdf, z)?;
    let spec = pdf.kernel();
    let anchors = pdf.anchors();
    Ok((0..anchors.rows())
        .map(|i| spec.log_kernel_sq(sq_distance(z, anchors.row(i))).max(clip))
        .collect())
}

/// Log of the clipped anchor-mean density; finite for every finite `z`.
pub fn log_pdf_density(pdf: &ClassPdf, z: &[f64], clip: f64) -> Result<f64> {
    let logs = clipped_log_kernels(pdf, z, clip)?;
    Ok(log_sum_exp(&logs) - (logs.len() as f64).ln())
}
