//! Experiment configuration: one TOML document per run.
//!
//! Seeds left out of the file are derived from the top-level `seed`, so a
//! config plus a seed fully determines every output. Relative paths are
//! resolved against the directory containing the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use saft_core::rng::{fnv1a, mix64};
use saft_core::{
    Dataset, Distribution, LayerKind, LayerSpec, NoiseMode, NoiseSpec, Optimizer, TrainConfig,
};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Synthetic data defaults to a larger sensitivity sample than image data.
const SYNTHETIC_SENSITIVITY_BATCH: usize = 256;
const IMAGE_SENSITIVITY_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Number of most sensitive layers to train.
    #[serde(default)]
    pub k: Option<usize>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub pretrain: Option<TrainSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sensitivity: SensitivitySection,
    #[serde(default)]
    pub compare: CompareSection,
    /// Directory that relative paths are resolved against. Not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        seed: Option<u64>,
        /// Reshape each sample, e.g. `[1, 4, 4]` for a convolutional model.
        #[serde(default)]
        sample_shape: Option<Vec<usize>>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-sample input shape, without the batch dimension.
    #[serde(default)]
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub init_seed: Option<u64>,
    /// Start from a saved `.saft` checkpoint instead of building from `layers`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub layers: Vec<LayerConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Linear {
        id: String,
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        id: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu {
        id: String,
    },
    Flatten {
        id: String,
    },
}

fn one() -> usize {
    1
}

impl LayerConfig {
    pub fn to_spec(&self) -> LayerSpec {
        match self {
            LayerConfig::Linear {
                id,
                in_features,
                out_features,
            } => LayerSpec::linear(id.clone(), *in_features, *out_features),
            LayerConfig::Conv2d {
                id,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => LayerSpec::new(
                id.clone(),
                LayerKind::Conv2d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel_h: *kernel,
                    kernel_w: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
            ),
            LayerConfig::Relu { id } => LayerSpec::relu(id.clone()),
            LayerConfig::Flatten { id } => LayerSpec::flatten(id.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionName {
    Gaussian,
    Uniform,
}

/// One noise setting. Gaussian takes `sigma`, uniform takes `r1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub distribution: DistributionName,
    pub mode: NoiseMode,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub r1: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub perturb_bias: bool,
}

impl NoiseConfig {
    pub fn to_spec(&self, fallback_seed: u64) -> Result<NoiseSpec> {
        let distribution = match (self.distribution, self.sigma, self.r1) {
            (DistributionName::Gaussian, Some(sigma), None) => Distribution::Gaussian { sigma },
            (DistributionName::Uniform, None, Some(r1)) => Distribution::Uniform { r1 },
            (DistributionName::Gaussian, _, _) => {
                return Err(CliError::config("gaussian noise takes exactly one of: sigma"))
            }
            (DistributionName::Uniform, _, _) => {
                return Err(CliError::config("uniform noise takes exactly one of: r1"))
            }
        };
        let spec = NoiseSpec {
            distribution,
            mode: self.mode,
            seed: self.seed.unwrap_or(fallback_seed),
            perturb_bias: self.perturb_bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn with_kind(&self, distribution: DistributionName, mode: NoiseMode, param: f64) -> Self {
        let (sigma, r1) = match distribution {
            DistributionName::Gaussian => (Some(param), None),
            DistributionName::Uniform => (None, Some(param)),
        };
        NoiseConfig {
            distribution,
            mode,
            sigma,
            r1,
            seed: self.seed,
            perturb_bias: self.perturb_bias,
        }
    }

    fn param(&self) -> f64 {
        self.sigma.or(self.r1).unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub eval_seed: Option<u64>,
    #[serde(default)]
    pub optimizer: Optimizer,
}

fn default_epochs() -> usize {
    3
}
fn default_lr() -> f64 {
    0.05
}
fn default_batch() -> usize {
    64
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            seed: None,
            eval_seed: None,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainSection {
    fn to_config(&self, seed: u64, eval_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed.unwrap_or(seed),
            optimizer: self.optimizer,
            eval_seed: self.eval_seed.unwrap_or(eval_seed),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySection {
    /// Training rows used for the analysis; defaults depend on the dataset kind.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub repeats: Option<usize>,
    #[serde(default)]
    pub kl_bins: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Noise settings to compare. Empty means all four distribution × mode
    /// combinations at the `[noise]` parameter.
    #[serde(default)]
    pub variants: Vec<NoiseConfig>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub k: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        if o.k.is_some() {
            self.k = o.k;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(CliError::config(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.model.checkpoint.is_none() {
            if self.model.layers.is_empty() {
                return Err(CliError::config("model needs either layers or a checkpoint"));
            }
            if self.model.input_shape.is_empty() {
                return Err(CliError::config("model.input_shape is required"));
            }
        }
        if self.k == Some(0) {
            return Err(CliError::config("k must be at least 1"));
        }
        if let DatasetConfig::Blobs {
            num_classes,
            per_class,
            dim,
            spread,
            ..
        } = &self.dataset
        {
            if *num_classes < 2 || *per_class == 0 || *dim == 0 || !(spread.is_finite() && *spread >= 0.0)
            {
                return Err(CliError::config(
                    "blobs need num_classes >= 2, positive per_class and dim, and a finite spread >= 0",
                ));
            }
        }
        self.noise_spec()?;
        for v in &self.compare.variants {
            v.to_spec(0)?;
        }
        self.train_config().validate()?;
        if let Some(p) = self.pretrain_config() {
            p.validate()?;
        }
        if self.sensitivity.batch_size == Some(0) || self.sensitivity.repeats == Some(0) {
            return Err(CliError::config("sensitivity batch_size and repeats must be positive"));
        }
        if matches!(self.sensitivity.kl_bins, Some(b) if b < 2) {
            return Err(CliError::config("sensitivity.kl_bins must be at least 2"));
        }
        Ok(())
    }

    /// Seed for a named purpose, derived from the top-level seed.
    pub fn derived_seed(&self, purpose: &str) -> u64 {
        mix64(self.seed ^ fnv1a(purpose.as_bytes()))
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        self.noise.to_spec(self.derived_seed("noise"))
    }

    /// Compare variants, each resolved against the configured seeds.
    pub fn compare_variants(&self) -> Result<Vec<NoiseSpec>> {
        let fallback = self.derived_seed("noise");
        if !self.compare.variants.is_empty() {
            return self.compare.variants.iter().map(|v| v.to_spec(fallback)).collect();
        }
        let p = self.noise.param();
        let mut out = Vec::with_capacity(4);
        for d in [DistributionName::Gaussian, DistributionName::Uniform] {
            for m in [NoiseMode::Multiplicative, NoiseMode::Additive] {
                out.push(self.noise.with_kind(d, m, p).to_spec(fallback)?);
            }
        }
        Ok(out)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train
            .to_config(self.derived_seed("train"), self.derived_seed("eval"))
    }

    pub fn pretrain_config(&self) -> Option<TrainConfig> {
        self.pretrain
            .as_ref()
            .map(|p| p.to_config(self.derived_seed("pretrain"), self.derived_seed("eval")))
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or_else(|| self.derived_seed("init"))
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.model.layers.iter().map(LayerConfig::to_spec).collect()
    }

    pub fn sensitivity_batch(&self) -> usize {
        self.sensitivity.batch_size.unwrap_or(match self.dataset {
            DatasetConfig::Blobs { .. } => SYNTHETIC_SENSITIVITY_BATCH,
            DatasetConfig::Idx { .. } => IMAGE_SENSITIVITY_BATCH,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Blobs {
                num_classes,
                per_class,
                dim,
                spread,
                seed,
                sample_shape,
            } => {
                let seed = seed.unwrap_or_else(|| self.derived_seed("dataset"));
                let data = saft_core::gen_blobs(*num_classes, *per_class, *dim, *spread, seed)?;
                Ok(match sample_shape {
                    Some(shape) => data.reshape_samples(shape)?,
                    None => data,
                })
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = saft_core::load_idx(self.resolve(train_images), self.resolve(train_labels))?;
                let test = saft_core::load_idx(self.resolve(test_images), self.resolve(test_labels))?;
                Ok(Dataset { train, test })
            }
        }
    }
}
