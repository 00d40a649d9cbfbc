//! Per-task training and the full stream loop.

use serde::{Deserialize, Serialize};

use crate::bank::{ModelBank, TaskEntry};
use crate::error::{Error, Result};
use crate::eval::{AccuracyMatrix, IncrementalEvaluator, StageMetrics};
use crate::kde::{KernelSpec, DEFAULT_CLIP};
use crate::network::{Activation, AdamConfig, AdamState, NetworkConfig, NetworkParams};
use crate::objective::{loss_and_gradients, LossConfig, Reduction, RepulsionPrior};
use crate::pdf::{build_task_pdfs, AnchorConfig, ClassPdf};
use crate::rng::derive_seed;
use crate::stream::{StreamCursor, TaskDataset, TaskStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub bandwidth: f64,
    pub anchors_per_class: usize,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub adam: AdamConfig,
    pub reduction: Reduction,
    pub repulsion_prior: RepulsionPrior,
    pub refresh_anchors_every_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            bandwidth: 0.5,
            anchors_per_class: 500,
            clip_threshold: DEFAULT_CLIP,
            epochs: 1,
            warmup_epochs: 0,
            batch_size: 128,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            adam: AdamConfig::default(),
            reduction: Reduction::Mean,
            repulsion_prior: RepulsionPrior::PerClass,
            refresh_anchors_every_epoch: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=1024).contains(&self.embed_dim) {
            return Err(Error::config("embed_dim", format!("must lie in [1, 1024], got {}", self.embed_dim)));
        }
        self.kernel()?;
        if self.anchors_per_class == 0 {
            return Err(Error::config("anchors_per_class", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        self.adam.validate()?;
        self.loss().validate()
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.embed_dim, self.bandwidth)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            clip_threshold: self.clip_threshold,
            reduction: self.reduction,
            repulsion_prior: self.repulsion_prior,
        }
    }

    /// Training passes each task may take from the stream.
    pub fn passes_per_task(&self) -> usize {
        self.warmup_epochs + self.epochs
    }

    fn network(&self, input_dim: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLog {
    pub task_id: u32,
    /// Mean batch loss of every training pass, warm-up included.
    pub pass_losses: Vec<f64>,
}

fn run_pass(
    net: &mut NetworkParams,
    adam: &mut AdamState,
    pdfs: &[ClassPdf],
    task: &TaskDataset,
    x: &Tensor,
    batches: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<f64> {
    let loss_cfg = config.loss();
    let labels = task.train().labels();
    let mut total = 0.0;
    for batch in batches {
        let xb = x.select_rows(batch)?;
        let yb: Vec<_> = batch.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = loss_and_gradients(net, pdfs, &xb, &yb, &loss_cfg)?;
        adam.step(net, &grads)?;
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// Trains a fresh network on the cursor's current task and freezes it
/// into a bank entry.
pub fn train_task(task: &TaskDataset, cursor: &mut StreamCursor<'_>, config: &TrainConfig) -> Result<(TaskEntry, TaskLog)> {
    config.validate()?;
    let kernel = config.kernel()?;
    let anchors = AnchorConfig::new(config.anchors_per_class);
    let seed = derive_seed(config.seed, task.task_id() as u64);
    let mut net = NetworkParams::init(&config.network(task.input_dim()), derive_seed(seed, 1))?;
    let mut adam = AdamState::new(config.adam, &net)?;
    let x = task.train().tensor().expect("training split is never empty");
    let labels = task.train().labels();
    let mut log = TaskLog {
        task_id: task.task_id(),
        pass_losses: Vec::new(),
    };
    let mut pass_seed = derive_seed(seed, 2);

    let build = |net: &NetworkParams, salt: u64| build_task_pdfs(&net.embed(&x)?, labels, kernel, &anchors, derive_seed(seed, 1000 + salt));

    for w in 0..config.warmup_epochs {
        let pdfs = build(&net, w as u64)?;
        pass_seed = derive_seed(pass_seed, w as u64);
        let batches = cursor.pass(config.batch_size, pass_seed)?;
        log.pass_losses.push(run_pass(&mut net, &mut adam, &pdfs, task, &x, &batches, config)?);
    }

    let frozen_salt = config.warmup_epochs as u64;
    let mut pdfs = build(&net, frozen_salt)?;
    for e in 0..config.epochs {
        if e > 0 && config.refresh_anchors_every_epoch {
            pdfs = build(&net, frozen_salt + e as u64)?;
        }
        pass_seed = derive_seed(pass_seed, 500 + e as u64);
        let batches = cursor.pass(config.batch_size, pass_seed)?;
        log.pass_losses.push(run_pass(&mut net, &mut adam, &pdfs, task, &x, &batches, config)?);
    }
    Ok((TaskEntry::new(task.task_id(), net, pdfs)?, log))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub bank: ModelBank,
    pub matrix: AccuracyMatrix,
    /// Metrics over all seen tasks after each task, in stream order.
    pub stages: Vec<StageMetrics>,
    pub logs: Vec<TaskLog>,
}

impl TrainReport {
    pub fn average_accuracy(&self) -> Result<f64> {
        self.matrix.average_accuracy()
    }

    pub fn average_forgetting(&self) -> Result<f64> {
        self.matrix.average_forgetting()
    }
}

/// Trains every task of `stream` in order into a fresh bank, evaluating
/// all seen test sets after each task.
pub fn train_stream(stream: &TaskStream, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut bank = ModelBank::new(config.kernel()?, config.clip_threshold)?;
    let mut evaluator = IncrementalEvaluator::new(stream, config.clip_threshold);
    let mut cursor = stream.cursor(config.passes_per_task());
    let mut logs = Vec::with_capacity(stream.len());
    while let Some(task) = cursor.next_task() {
        let (entry, log) = train_task(task, &mut cursor, config)?;
        bank.add_task(entry)?;
        evaluator.absorb(bank.entries())?;
        logs.push(log);
    }
    let (matrix, stages) = evaluator.finish()?;
    Ok(TrainReport {
        bank,
        matrix,
        stages,
        logs,
    })
}
