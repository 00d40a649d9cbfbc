use std::fs;
use std::path::{Path, PathBuf};

use gkde_core::network::{Activation, AdamConfig};
use gkde_core::objective::RepulsionPrior;
use gkde_core::stream::{BlobConfig, CsvOptions, LabelColumn};
use gkde_core::train::TrainConfig;
use gkde_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a training or evaluation run needs. Loaded from flat JSON;
/// command-line flags override individual keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// CSV input; when absent a synthetic blob stream is generated.
    pub data: Option<PathBuf>,
    pub partition: Option<PathBuf>,
    pub label_column: String,
    pub header: bool,

    pub tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub samples_per_class: usize,
    pub cluster_std: f64,
    pub center_spread: f64,

    pub embed_dim: usize,
    pub bandwidth: f64,
    pub anchors_per_class: usize,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub refresh_anchors_every_epoch: bool,
    pub repulsion_prior: RepulsionPrior,
    pub seed: u64,

    pub bank_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let blobs = BlobConfig::new(5, 2, 16, 8.0, 0);
        Self {
            data: None,
            partition: None,
            label_column: "label".into(),
            header: true,
            tasks: blobs.tasks,
            classes_per_task: blobs.classes_per_task,
            input_dim: blobs.dim,
            separation: blobs.separation,
            samples_per_class: blobs.samples_per_class,
            cluster_std: blobs.cluster_std,
            center_spread: blobs.center_spread,
            embed_dim: train.embed_dim,
            bandwidth: train.bandwidth,
            anchors_per_class: train.anchors_per_class,
            clip_threshold: train.clip_threshold,
            epochs: train.epochs,
            warmup_epochs: train.warmup_epochs,
            learning_rate: train.adam.learning_rate,
            weight_decay: train.adam.weight_decay,
            batch_size: train.batch_size,
            hidden: train.hidden,
            activation: train.activation,
            refresh_anchors_every_epoch: train.refresh_anchors_every_epoch,
            repulsion_prior: train.repulsion_prior,
            seed: train.seed,
            bank_path: None,
            metrics_path: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let fail = |field: &str, e: serde_json::Error| Error::config(field, format!("{}: {e}", path.display()));
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| fail("config", e))?;
        serde_json::from_value(value.clone()).map_err(|e| {
            // Retry key by key so type errors can name their field too.
            let field = value
                .as_object()
                .and_then(|map| {
                    map.iter().find_map(|(k, v)| {
                        let single = serde_json::Value::Object([(k.clone(), v.clone())].into_iter().collect());
                        serde_json::from_value::<Self>(single).is_err().then(|| k.clone())
                    })
                })
                .unwrap_or_else(|| "config".into());
            fail(&field, e)
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            embed_dim: self.embed_dim,
            bandwidth: self.bandwidth,
            anchors_per_class: self.anchors_per_class,
            clip_threshold: self.clip_threshold,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            hidden: self.hidden.clone(),
            activation: self.activation,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            refresh_anchors_every_epoch: self.refresh_anchors_every_epoch,
            repulsion_prior: self.repulsion_prior,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn blob_config(&self) -> BlobConfig {
        BlobConfig {
            tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            dim: self.input_dim,
            separation: self.separation,
            samples_per_class: self.samples_per_class,
            cluster_std: self.cluster_std,
            center_spread: self.center_spread,
            seed: self.seed,
        }
    }

    pub fn csv_options(&self) -> CsvOptions {
        CsvOptions {
            has_header: self.header,
            label_column: self.label_column.parse::<LabelColumn>().expect("infallible"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.data.is_some() != self.partition.is_some() {
            return Err(Error::config("partition", "`data` and `partition` must be given together"));
        }
        if self.data.is_none() {
            for (field, v) in [
                ("tasks", self.tasks),
                ("classes_per_task", self.classes_per_task),
                ("input_dim", self.input_dim),
                ("samples_per_class", self.samples_per_class),
            ] {
                if v == 0 {
                    return Err(Error::config(field, "must be at least 1"));
                }
            }
            if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
                return Err(Error::config("cluster_std", "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}
