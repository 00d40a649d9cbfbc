#![allow(dead_code)]

use std::f64::consts::PI;

use gkde_core::bank::{ModelBank, TaskEntry};
use gkde_core::kde::{KernelSpec, DEFAULT_CLIP};
use gkde_core::network::{NetworkConfig, NetworkParams};
use gkde_core::pdf::ClassPdf;
use gkde_core::tensor::Tensor;
use gkde_core::rng::{seeded, Rng as ChaCha};
use rand::Rng;

pub struct BankSpec {
    pub tasks: usize,
    pub classes: usize,
    pub anchors: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub bandwidth: f64,
    /// Every task reuses one network.
    pub shared: bool,
}

/// Random networks and anchors with equal priors inside each task.
pub fn random_bank(spec: &BankSpec, seed: u64) -> ModelBank {
    let mut rng = seeded(seed);
    let kernel = KernelSpec::new(spec.embed_dim, spec.bandwidth).unwrap();
    let mut bank = ModelBank::new(kernel, DEFAULT_CLIP).unwrap();
    let cfg = NetworkConfig {
        hidden: vec![6],
        ..NetworkConfig::new(spec.input_dim, spec.embed_dim)
    };
    let shared = NetworkParams::init(&cfg, seed ^ 0xabc).unwrap();
    for t in 0..spec.tasks {
        let net = if spec.shared {
            shared.clone()
        } else {
            NetworkParams::init(&cfg, seed.wrapping_add(t as u64 + 1)).unwrap()
        };
        let pdfs = (0..spec.classes)
            .map(|c| {
                let data = (0..spec.anchors * spec.embed_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
                let anchors = Tensor::matrix(spec.anchors, spec.embed_dim, data).unwrap();
                ClassPdf::from_anchors((t * spec.classes + c) as u32, anchors, spec.bandwidth, 1.0 / spec.classes as f64)
                    .unwrap()
            })
            .collect();
        bank.add_task(TaskEntry::new(t as u32 + 1, net, pdfs).unwrap()).unwrap();
    }
    bank
}

/// Mean of Gaussian kernels written out term by term.
pub fn naive_density(anchors: &Tensor, z: &[f64], h: f64) -> f64 {
    let d = z.len() as f64;
    let norm = 1.0 / ((2.0 * PI).sqrt() * h).powf(d);
    let mut total = 0.0;
    for i in 0..anchors.rows() {
        let mut sq = 0.0;
        for (k, zk) in z.iter().enumerate() {
            let diff = zk - anchors.row(i)[k];
            sq += diff * diff;
        }
        total += norm * (-sq / (2.0 * h * h)).exp();
    }
    total / anchors.rows() as f64
}

pub fn random_rows(rng: &mut ChaCha, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}
