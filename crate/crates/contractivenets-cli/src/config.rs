//! Run configuration: one JSON document per training/eval run, schema-checked
//! (unknown keys rejected), with CLI flags layered on top.

use crate::CliError;
use contractivenets::data::{
    dataset_from_idx, load_cifar10_binary, sequentialize, Dataset, SeqMode, SequencedDataset,
    SequentializeConfig, Split,
};
use contractivenets::samplers::SparseInitConfig;
use contractivenets::training::{ArchitectureConfig, ScheduleEntry, TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "CONTRACTIVENETS_DATA";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub architecture: ArchSection,
    pub training: TrainSection,
    #[serde(default)]
    pub io: IoSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// "mnist" or "cifar10".
    pub dataset: String,
    pub mode: SeqMode,
    #[serde(default)]
    pub permutation_seed: Option<u64>,
    #[serde(default = "one")]
    pub downsample: usize,
    /// Optional cap on training items (the test split is never truncated).
    #[serde(default)]
    pub train_limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub variant: Variant,
    pub p: usize,
    pub n_sub: usize,
    #[serde(default)]
    pub init: Option<SparseInitConfig>,
    #[serde(default = "one_f64")]
    pub feedback_density: f64,
    #[serde(default)]
    pub control_mode: bool,
    #[serde(default)]
    pub all_blocks: bool,
    #[serde(default = "one_f64")]
    pub tau: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Option<Vec<ScheduleEntry>>,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default = "one_f64")]
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Dataset root; falls back to $CONTRACTIVENETS_DATA, then ./data.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-5
}
fn default_batch() -> usize {
    128
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_pretty_json(&self) -> Result<String, CliError> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.architecture.seed = seed;
        self.training.seed = seed;
        if let Some(init) = self.architecture.init.as_mut() {
            init.seed = seed;
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        if let Some(d) = &self.io.data_dir {
            return d.clone();
        }
        if let Ok(env) = std::env::var(DATA_ENV) {
            return PathBuf::from(env);
        }
        PathBuf::from("data")
    }

    /// Load and sequentialize (train, test).
    pub fn load_datasets(&self) -> Result<(SequencedDataset, SequencedDataset), CliError> {
        let root = self.data_dir();
        let (mut train, test) = load_raw_datasets(&self.task.dataset, &root)?;
        if let Some(limit) = self.task.train_limit {
            train.images.truncate(limit);
            train.labels.truncate(limit);
        }
        let seq_cfg = SequentializeConfig {
            mode: self.task.mode,
            permutation_seed: self.task.permutation_seed,
            downsample: self.task.downsample,
        };
        let train_seq =
            sequentialize(&train, &seq_cfg).map_err(|e| CliError::Io(e.to_string()))?;
        let test_seq = sequentialize(&test, &seq_cfg).map_err(|e| CliError::Io(e.to_string()))?;
        Ok((train_seq, test_seq))
    }

    /// Resolve the architecture/training configs; `in_dim` comes from the
    /// sequentialized data.
    pub fn build_configs(&self, in_dim: usize) -> Result<(ArchitectureConfig, TrainConfig), CliError> {
        let arch = ArchitectureConfig {
            variant: self.architecture.variant,
            p: self.architecture.p,
            n_sub: self.architecture.n_sub,
            in_dim,
            out_dim: 10,
            init: self.architecture.init.clone(),
            feedback_density: self.architecture.feedback_density,
            control_mode: self.architecture.control_mode,
            all_blocks: self.architecture.all_blocks,
            tau: self.architecture.tau,
            seed: self.architecture.seed,
        };
        let mut cfg = TrainConfig::with_seed(self.training.seed);
        cfg.lr = self.training.lr;
        cfg.weight_decay = self.training.weight_decay;
        cfg.batch_size = self.training.batch_size;
        cfg.clip = self.training.clip;
        cfg.alpha = self.training.alpha;
        if let Some(s) = &self.training.schedule {
            cfg.schedule = s.clone();
        }
        Ok((arch, cfg))
    }
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.exists())
}

fn load_raw_datasets(dataset: &str, root: &Path) -> Result<(Dataset, Dataset), CliError> {
    match dataset {
        "mnist" => {
            let dir = if root.join("mnist").exists() {
                root.join("mnist")
            } else {
                root.to_path_buf()
            };
            let pick = |names: &[&str]| -> Result<PathBuf, CliError> {
                first_existing(&dir, names).ok_or_else(|| {
                    CliError::Io(format!(
                        "none of {names:?} found under {} (set {DATA_ENV} or io.data_dir)",
                        dir.display()
                    ))
                })
            };
            let train = dataset_from_idx(
                pick(&["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"])?,
                pick(&["train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz"])?,
                Split::Train,
            )
            .map_err(|e| CliError::Io(e.to_string()))?;
            let test = dataset_from_idx(
                pick(&["t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz"])?,
                pick(&["t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte.gz"])?,
                Split::Test,
            )
            .map_err(|e| CliError::Io(e.to_string()))?;
            Ok((train, test))
        }
        "cifar10" => {
            let dir = if root.join("cifar10").exists() {
                root.join("cifar10")
            } else {
                root.to_path_buf()
            };
            let mut train: Option<Dataset> = None;
            for k in 1..=5 {
                let p = dir.join(format!("data_batch_{k}.bin"));
                if !p.exists() {
                    return Err(CliError::Io(format!(
                        "{} not found (set {DATA_ENV} or io.data_dir)",
                        p.display()
                    )));
                }
                let part =
                    load_cifar10_binary(&p, Split::Train).map_err(|e| CliError::Io(e.to_string()))?;
                train = Some(match train.take() {
                    None => part,
                    Some(mut acc) => {
                        acc.images.extend(part.images);
                        acc.labels.extend(part.labels);
                        acc
                    }
                });
            }
            let test = load_cifar10_binary(dir.join("test_batch.bin"), Split::Test)
                .map_err(|e| CliError::Io(e.to_string()))?;
            Ok((train.expect("five batches"), test))
        }
        other => Err(CliError::Usage(format!(
            "unknown dataset '{other}' (expected mnist or cifar10)"
        ))),
    }
}
