//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugPolicy;
use crate::data::{ChannelStats, PatchSpec};
use crate::error::{Error, Result};
use crate::eval::{DecoderConfig, ProbeConfig};
use crate::loss::{NegativePolicy, DEFAULT_TAU};
use crate::nn::Architecture;
use crate::train::{Method, OptimConfig, TrainSettings};

/// Default root for run directories when neither the config nor the command
/// line names one.
pub const OUTPUT_ROOT_ENV: &str = "FEWMAX_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run name; the run directory is `<output root>/<name>` unless `output_dir` is set.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Checkpoint of the pretrained anchor.
    #[serde(default)]
    pub anchor: Option<PathBuf>,
    /// Epochs between checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: AugPolicy,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_method() -> Method {
    Method::FewMax
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Source-domain manifest for anchor pretraining.
    #[serde(default)]
    pub source: Option<PathBuf>,
    /// Target-domain manifest the few-shot subset is drawn from.
    #[serde(default)]
    pub target: Option<PathBuf>,
    /// Labelled manifests for the linear probe, memory bank and decoder probe.
    #[serde(default)]
    pub eval_train: Option<PathBuf>,
    #[serde(default)]
    pub eval_test: Option<PathBuf>,
    /// Samples per class in the adaptation subset; 0 uses the whole target set.
    #[serde(default)]
    pub per_class: usize,
    /// Classes of the adaptation subset; empty means every labelled class.
    #[serde(default)]
    pub classes: Vec<usize>,
    /// Cut every sample into patches before use.
    #[serde(default)]
    pub patches: Option<PatchSpec>,
    #[serde(default)]
    pub normalization: Option<ChannelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 32],
            strides: vec![1, 2, 2],
            kernel: 3,
            hidden: 128,
            embed_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, in_channels: usize) -> Architecture {
        Architecture {
            in_channels,
            widths: self.widths.clone(),
            strides: self.strides.clone(),
            kernel: self.kernel,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub exclude_partner: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            exclude_partner: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub energy: bool,
    pub probe: bool,
    /// Neighbors per query; 0 disables retrieval.
    pub retrieval_k: usize,
    pub nrmse: bool,
    /// Landscape grid size; 0 disables the landscape.
    pub landscape_grid: usize,
    pub gradnorm: bool,
    /// Blends per sample in the gradient-norm probe batch.
    pub gradnorm_blends: usize,
    /// Samples in the landscape and gradient-norm batches.
    pub probe_batch: usize,
    /// Queries drawn in the retrieval montage.
    pub montage_queries: usize,
    pub linear: ProbeConfig,
    pub decoder: DecoderConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            energy: true,
            probe: true,
            retrieval_k: 5,
            nrmse: false,
            landscape_grid: 21,
            gradnorm: true,
            gradnorm_blends: 4,
            probe_batch: 32,
            montage_queries: 4,
            linear: ProbeConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl EvalConfig {
    /// Every evaluation switched off.
    pub fn none() -> Self {
        Self {
            energy: false,
            probe: false,
            retrieval_k: 0,
            nrmse: false,
            landscape_grid: 0,
            gradnorm: false,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.energy
            && !self.probe
            && self.retrieval_k == 0
            && !self.nrmse
            && self.landscape_grid == 0
            && !self.gradnorm
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub blend_count: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub anchor: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.anchor);
        fix(&mut self.output_dir);
        fix(&mut self.data.source);
        fix(&mut self.data.target);
        fix(&mut self.data.eval_train);
        fix(&mut self.data.eval_test);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.epochs {
            self.optim.epochs = e;
        }
        if let Some(m) = o.blend_count {
            self.augment.blend_count = m;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(a) = &o.anchor {
            self.anchor = Some(a.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.loss.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.loss.tau)));
        }
        self.model.architecture(1).validate()
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            method: self.method,
            policy: AugPolicy {
                seed: self.seed,
                ..self.augment.clone()
            },
            optim: OptimConfig {
                seed: self.seed,
                ..self.optim.clone()
            },
            tau: self.loss.tau,
            negatives: NegativePolicy {
                exclude_partner: self.loss.exclude_partner,
                ..NegativePolicy::default()
            },
        }
    }

    pub fn run_name(&self, default_prefix: &str) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{default_prefix}-seed{}", self.seed))
    }

    /// Directory every artifact of the run is written to.
    pub fn run_dir(&self, default_prefix: &str) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.run_name(default_prefix))
    }
}
