//! Experiment configuration.
//!
//! Configs are plain TOML. Every field has a default, so a config file only
//! needs to name what it changes; the built-in defaults are 100 total
//! clients, 5 selected per round, batch size 64, learning rate 0.1, and
//! 20 trials.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackOptions;
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::secure_agg::SaMode;

/// Environment variable naming the default directory for dataset files.
pub const DATA_DIR_ENV: &str = "FEDFISH_DATA_DIR";

const MNIST_CLASSES: usize = 10;
const MNIST_SIDE: usize = 28;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Seeded Gaussian class blobs; needs no files.
    Synthetic {
        n_classes: usize,
        dim: usize,
        /// Blob seed; when absent, client data derives from the master seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// MNIST in IDX format: `train-images-idx3-ubyte` and
    /// `train-labels-idx1-ubyte` in one directory.
    Mnist {
        /// Directory holding the two IDX files. Falls back to
        /// `$FEDFISH_DATA_DIR`, then `./data`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
}

impl DatasetConfig {
    /// Resolved data directory; `None` for synthetic data.
    pub fn mnist_dir(&self) -> Option<PathBuf> {
        match self {
            DatasetConfig::Synthetic { .. } => None,
            DatasetConfig::Mnist { dir } => Some(
                dir.clone()
                    .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("data")),
            ),
        }
    }
}

fn default_kernel() -> usize {
    3
}

fn default_embedding() -> usize {
    128
}

/// Which architecture the trial trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Three fully connected layers; `hidden = [h1, h2]`, embeddings have
    /// dimension `h2`.
    Fcn3 { hidden: (usize, usize) },
    /// Conv -> batch norm -> relu -> flatten -> two fully connected layers;
    /// embeddings have dimension `embedding`.
    CnnBn {
        channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_embedding")]
        embedding: usize,
    },
}

/// One experiment: a dataset, an architecture, federation parameters, and
/// the attack/defense toggles, all fixed by a single master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Total client population the server samples from.
    pub clients_total: usize,
    /// Clients selected each round.
    pub clients_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Dirichlet concentration for per-client label skew; absent = uniform
    /// labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_skew_alpha: Option<f64>,
    pub sa_mode: SaMode,
    /// Whether the server distributes per-client fishing models and runs
    /// label inference on the aggregate.
    pub attack: bool,
    pub defense: DefenseConfig,
    pub trials: usize,
    pub seed: u64,
    /// Reciprocal-condition floor for the disaggregation system; absent =
    /// the attack module's default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition_threshold: Option<f64>,
    /// Also run a benign broadcast round with the same seed each trial and
    /// report gradient cosine similarity (doubles the round cost).
    pub stealth_metrics: bool,
    /// Default CSV output path for the `run` subcommand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                n_classes: 10,
                dim: 32,
                seed: None,
            },
            model: ModelConfig::Fcn3 { hidden: (64, 64) },
            clients_total: 100,
            clients_per_round: 5,
            batch_size: 64,
            learning_rate: 0.1,
            label_skew_alpha: None,
            sa_mode: SaMode::Ideal,
            attack: true,
            defense: DefenseConfig::None,
            trials: 20,
            seed: 17,
            condition_threshold: None,
            stealth_metrics: true,
            output: None,
        }
    }
}

/// Keys each kind-tagged table accepts. The serde side cannot reject
/// unknown keys inside a tagged enum, and a top-level key accidentally
/// placed after a `[model]` or `[dataset]` header would otherwise be
/// swallowed silently and the run would use defaults.
fn check_section_keys(doc: &toml::Value, section: &str, allowed: &[(&str, &[&str])]) -> Result<()> {
    let Some(table) = doc.get(section).and_then(|v| v.as_table()) else {
        return Ok(());
    };
    let kind = table.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    let Some((_, keys)) = allowed.iter().find(|(k, _)| *k == kind) else {
        return Ok(()); // unknown kind: let serde produce its own error
    };
    for key in table.keys() {
        if key != "kind" && !keys.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "unexpected key {key:?} in [{section}] (kind = {kind:?}); \
                 top-level settings must appear before the first [section] header"
            )));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parse and validate a TOML config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        check_section_keys(
            &doc,
            "dataset",
            &[
                ("synthetic", &["n_classes", "dim", "seed"]),
                ("mnist", &["dir"]),
            ],
        )?;
        check_section_keys(
            &doc,
            "model",
            &[
                ("fcn3", &["hidden"]),
                ("cnn_bn", &["channels", "kernel", "embedding"]),
            ],
        )?;
        let cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse, and validate a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Number of label classes the dataset produces.
    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic { n_classes, .. } => *n_classes,
            DatasetConfig::Mnist { .. } => MNIST_CLASSES,
        }
    }

    /// Flat feature count per sample.
    pub fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic { dim, .. } => *dim,
            DatasetConfig::Mnist { .. } => MNIST_SIDE * MNIST_SIDE,
        }
    }

    /// Image side length for the convolutional architecture; requires the
    /// flat feature count to be a perfect square.
    pub fn image_side(&self) -> Result<usize> {
        let dim = self.input_dim();
        let side = (dim as f64).sqrt().round() as usize;
        if side * side != dim {
            return Err(Error::Config(format!(
                "convolutional model needs a square input, but the dataset has {dim} features"
            )));
        }
        Ok(side)
    }

    /// Per-sample tensor shape the model consumes.
    pub fn sample_shape(&self) -> Result<Vec<usize>> {
        match &self.model {
            ModelConfig::Fcn3 { .. } => Ok(vec![self.input_dim()]),
            ModelConfig::CnnBn { .. } => {
                let side = self.image_side()?;
                Ok(vec![1, side, side])
            }
        }
    }

    /// Embedding dimension of the configured architecture.
    pub fn embedding_dim(&self) -> usize {
        match &self.model {
            ModelConfig::Fcn3 { hidden } => hidden.1,
            ModelConfig::CnnBn { embedding, .. } => *embedding,
        }
    }

    /// Build a fresh model with the configured architecture.
    pub fn build_model<R: Rng>(&self, rng: &mut R) -> Result<Model> {
        match &self.model {
            ModelConfig::Fcn3 { hidden } => {
                Model::fcn3(self.input_dim(), *hidden, self.num_classes(), rng)
            }
            ModelConfig::CnnBn {
                channels,
                kernel,
                embedding,
            } => {
                let side = self.image_side()?;
                Model::cnn_bn(
                    (1, side, side),
                    *channels,
                    *kernel,
                    *embedding,
                    self.num_classes(),
                    rng,
                )
            }
        }
    }

    /// Attack knobs for one trial, seeded by `seed`.
    pub fn attack_options(&self, seed: u64) -> AttackOptions {
        let mut options = AttackOptions {
            seed,
            ..AttackOptions::default()
        };
        if let Some(t) = self.condition_threshold {
            options.condition_threshold = t;
        }
        options
    }

    /// Stable 64-bit digest of the config (FNV-1a over its canonical JSON
    /// form), recorded in metric rows so reports are self-identifying.
    pub fn config_hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        if self.clients_total == 0 {
            return Err(Error::Config("client population must be positive".into()));
        }
        if self.clients_total > u32::MAX as usize {
            return Err(Error::Config(format!(
                "client population {} does not fit 32-bit client ids",
                self.clients_total
            )));
        }
        if self.clients_per_round == 0 {
            return Err(Error::Config("clients per round must be positive".into()));
        }
        if self.clients_per_round > self.clients_total {
            return Err(Error::Config(format!(
                "cannot select {} clients from a population of {}",
                self.clients_per_round, self.clients_total
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} is not a finite non-negative number",
                self.learning_rate
            )));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { n_classes, dim, .. } => {
                if *n_classes < 2 {
                    return Err(Error::Config(format!(
                        "synthetic data needs at least 2 classes, got {n_classes}"
                    )));
                }
                if *dim == 0 {
                    return Err(Error::Config("synthetic feature dimension must be positive".into()));
                }
            }
            DatasetConfig::Mnist { .. } => {
                let dir = self.dataset.mnist_dir().expect("mnist dataset has a directory");
                for name in [data_file::IMAGES, data_file::LABELS] {
                    let path = dir.join(name);
                    if !path.is_file() {
                        return Err(Error::Config(format!(
                            "MNIST file {} not found; set [dataset].dir or ${DATA_DIR_ENV}",
                            path.display()
                        )));
                    }
                }
            }
        }
        match &self.model {
            ModelConfig::Fcn3 { hidden } => {
                if hidden.0 == 0 || hidden.1 == 0 {
                    return Err(Error::Config("hidden layer widths must be positive".into()));
                }
            }
            ModelConfig::CnnBn {
                channels,
                kernel,
                embedding,
            } => {
                if *channels == 0 || *kernel == 0 || *embedding == 0 {
                    return Err(Error::Config(
                        "channels, kernel, and embedding must be positive".into(),
                    ));
                }
                let side = self.image_side()?;
                if side < *kernel {
                    return Err(Error::Config(format!(
                        "kernel {kernel} larger than the {side}x{side} input"
                    )));
                }
            }
        }
        if self.attack && self.clients_per_round > self.embedding_dim() + 1 {
            return Err(Error::Config(format!(
                "label inference needs clients per round <= embedding dimension + 1 \
                 ({} > {})",
                self.clients_per_round,
                self.embedding_dim() + 1
            )));
        }
        if let Some(alpha) = self.label_skew_alpha {
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(Error::Config(format!(
                    "label skew concentration must be a positive finite number, got {alpha}"
                )));
            }
        }
        if let Some(t) = self.condition_threshold {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::Config(format!(
                    "condition threshold must be a positive finite number, got {t}"
                )));
            }
        }
        self.sa_mode.validate()?;
        self.defense.validate()?;
        Ok(())
    }
}

/// Canonical MNIST file names, shared with the loader.
pub(crate) mod data_file {
    pub const IMAGES: &str = "train-images-idx3-ubyte";
    pub const LABELS: &str = "train-labels-idx1-ubyte";
}
