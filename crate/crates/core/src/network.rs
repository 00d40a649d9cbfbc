//! Feature extractor (a small MLP) followed by a linear projection head,
//! and the Adam optimizer that trains them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// A dense layer computing `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [1, weight.cols()] {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[1, dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.zip_broadcast(&self.bias, "linear", |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl NetworkConfig {
    /// Two tanh hidden layers of width 64.
    pub fn new(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            embed_dim,
            activation: Activation::Tanh,
        }
    }
}

/// Extractor layers (θ) and projection head (ψ).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    extractor: Vec<Linear>,
    projection: Linear,
    activation: Activation,
}

impl NetworkParams {
    pub fn new(extractor: Vec<Linear>, projection: Linear, activation: Activation) -> Result<Self> {
        let mut width = extractor.first().map_or(projection.in_dim(), Linear::in_dim);
        for (i, layer) in extractor.iter().chain(std::iter::once(&projection)).enumerate() {
            if layer.in_dim() != width {
                return Err(Error::shape(
                    "network",
                    format!("layer {i} expects width {}, previous layer gives {width}", layer.in_dim()),
                ));
            }
            width = layer.out_dim();
        }
        Ok(Self {
            extractor,
            projection,
            activation,
        })
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.embed_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::config("network", "all layer widths must be positive"));
        }
        let mut rng = seeded(seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
            Linear {
                weight: Tensor::matrix(fan_in, fan_out, w).expect("sized"),
                bias: Tensor::zeros(&[1, fan_out]),
            }
        };
        let mut extractor = Vec::with_capacity(config.hidden.len());
        let mut width = config.input_dim;
        for &h in &config.hidden {
            extractor.push(layer(width, h));
            width = h;
        }
        let projection = layer(width, config.embed_dim);
        Self::new(extractor, projection, config.activation)
    }

    pub fn extractor(&self) -> &[Linear] {
        &self.extractor
    }

    pub fn projection(&self) -> &Linear {
        &self.projection
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.first().unwrap_or(&self.projection).in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.out_dim()
    }

    /// Parameter tensors in canonical order: each extractor layer's weight
    /// then bias, then the projection's weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.projection))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Same architecture with replacement tensors in canonical order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::contract(format!("expected {} tensors, got {}", slots.len(), tensors.len())));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("with_tensors", format!("{:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::shape(
                "embed",
                format!("input {:?} does not match input dimension {}", x.shape(), self.input_dim()),
            ));
        }
        Ok(())
    }

    /// `f_ψ(φ_θ(x))` for a `[batch, input_dim]` matrix.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.extractor {
            let act = self.activation;
            h = layer.forward(&h)?.map(|v| act.apply(v));
        }
        self.projection.forward(&h)
    }

    pub fn embed_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.embed(&t)?.into_data())
    }

    /// Records the forward pass on `tape`. Returns the embedding and the
    /// parameter leaves in canonical order.
    pub fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<(Var, Vec<Var>)> {
        self.check_input(x)?;
        let mut params = Vec::with_capacity(2 * (self.extractor.len() + 1));
        let mut h = tape.constant(x.clone());
        for layer in &self.extractor {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            params.extend([w, b]);
            let xw = tape.matmul(h, w)?;
            let pre = tape.add(xw, b)?;
            h = match self.activation {
                Activation::Tanh => tape.tanh(pre),
                Activation::Relu => tape.relu(pre),
            };
        }
        let w = tape.leaf(self.projection.weight.clone());
        let b = tape.leaf(self.projection.bias.clone());
        params.extend([w, b]);
        let xw = tape.matmul(h, w)?;
        let z = tape.add(xw, b)?;
        Ok((z, params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecay {
    /// `p ← p − lr·wd·p` after the Adam update.
    #[default]
    Decoupled,
    /// `wd·p` added to the gradient before the moment updates.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            decay: WeightDecay::Decoupled,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &NetworkParams) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update. `grads` follows the canonical
    /// parameter order of [`NetworkParams::tensors`].
    pub fn step(&mut self, params: &mut NetworkParams, grads: &[Tensor]) -> Result<()> {
        let slots = params.tensors_mut();
        if grads.len() != slots.len() || slots.len() != self.first_moment.len() {
            return Err(Error::contract(format!(
                "adam needs {} gradients, got {}",
                self.first_moment.len(),
                grads.len()
            )));
        }
        for (p, g) in slots.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
            decay,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (k, (p, g)) in slots.into_iter().zip(grads).enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let mut gi = g.data()[i];
                if decay == WeightDecay::L2 {
                    gi += wd * *pv;
                }
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                if decay == WeightDecay::Decoupled {
                    *pv -= lr * wd * *pv;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_net(p: f64) -> NetworkParams {
        let proj = Linear::new(Tensor::matrix(1, 1, vec![p]).unwrap(), Tensor::zeros(&[1, 1])).unwrap();
        NetworkParams::new(vec![], proj, Activation::Tanh).unwrap()
    }

    #[test]
    fn identity_network() {
        let net = NetworkParams::new(vec![], Linear::identity(2), Activation::Tanh).unwrap();
        assert_eq!(net.embed_row(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn scalar_linear_map() {
        assert_eq!(scalar_net(2.0).embed_row(&[3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = NetworkParams::init(&NetworkConfig::new(3, 2), 0).unwrap();
        assert!(net.embed_row(&[1.0, 2.0]).is_err());
        let l1 = Linear::identity(3);
        assert!(NetworkParams::new(vec![l1], Linear::identity(2), Activation::Tanh).is_err());
    }

    /// Layer-by-layer forward written with plain loops.
    fn oracle_forward(net: &NetworkParams, x: &[f64]) -> Vec<f64> {
        let dense = |l: &Linear, h: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|j| l.bias.data()[j] + (0..l.in_dim()).map(|i| h[i] * l.weight.get(i, j)).sum::<f64>())
                .collect()
        };
        let mut h = x.to_vec();
        for l in net.extractor() {
            h = dense(l, &h).into_iter().map(f64::tanh).collect();
        }
        dense(net.projection(), &h)
    }

    #[test]
    fn random_mlp_matches_oracle_and_is_batch_consistent() {
        let cfg = NetworkConfig {
            input_dim: 5,
            hidden: vec![7, 6],
            embed_dim: 3,
            activation: Activation::Tanh,
        };
        let mut net = NetworkParams::init(&cfg, 42).unwrap();
        // Nonzero biases so the oracle exercises them.
        let tensors: Vec<Tensor> = net.tensors().into_iter().map(|t| t.map(|v| v + 0.05)).collect();
        net = net.with_tensors(&tensors).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|r| (0..5).map(|c| (r * 5 + c) as f64 * 0.1 - 1.0).collect()).collect();
        let batch = net.embed(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let want = oracle_forward(&net, row);
            for (a, b) in batch.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(batch.row(r), net.embed_row(row).unwrap().as_slice());
        }
        let mut tape = Tape::new();
        let (z, params) = net.record(&mut tape, &Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(tape.value(z), &batch);
        assert_eq!(params.len(), 6);
        assert_eq!(net.param_count(), 5 * 7 + 7 + 7 * 6 + 6 + 6 * 3 + 3);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let cfg = NetworkConfig::new(16, 8);
        let a = NetworkParams::init(&cfg, 1).unwrap();
        assert_eq!(a, NetworkParams::init(&cfg, 1).unwrap());
        assert_ne!(a, NetworkParams::init(&cfg, 2).unwrap());
        let first = &a.extractor()[0];
        assert!(first.weight.data().iter().all(|w| w.abs() <= 0.25));
        assert!(first.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn adam_first_step() {
        let mut net = scalar_net(0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &net).unwrap();
        let grads = [Tensor::matrix(1, 1, vec![1.0]).unwrap(), Tensor::zeros(&[1, 1])];
        adam.step(&mut net, &grads).unwrap();
        let p = net.projection().weight.data()[0];
        assert!((p + 4.99999995e-4).abs() < 1e-15, "{p}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_decay_only_step() {
        let mut net = scalar_net(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, &net).unwrap();
        let zeros: Vec<Tensor> = net.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam.step(&mut net, &zeros).unwrap();
        assert!((net.projection().weight.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_missing_gradients() {
        let mut net = scalar_net(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &net).unwrap();
        assert!(matches!(adam.step(&mut net, &[Tensor::zeros(&[1, 1])]), Err(Error::Contract(_))));
        let bad = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(bad, &net).is_err());
    }

    proptest! {
        #[test]
        fn zero_gradients_without_decay_are_identity(seed in 0u64..1000, steps in 1usize..5) {
            let cfg = NetworkConfig { input_dim: 3, hidden: vec![4], embed_dim: 2, activation: Activation::Relu };
            let mut net = NetworkParams::init(&cfg, seed).unwrap();
            let before = net.clone();
            let adam_cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
            let mut adam = AdamState::new(adam_cfg, &net).unwrap();
            let zeros: Vec<Tensor> = net.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for _ in 0..steps {
                adam.step(&mut net, &zeros).unwrap();
            }
            prop_assert_eq!(net, before);
        }
    }
}
