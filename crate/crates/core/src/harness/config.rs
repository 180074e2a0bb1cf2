use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::SynthConfig;
use crate::error::{Error, Result};
use crate::extractor::{AttentionKind, BackboneConfig, ExtractorConfig, MultidimAxis};
use crate::losses::{LossKind, MetricLossConfig};
use crate::nn::Activation;

pub const SEED_ENV: &str = "ZSLMETRIC_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Metric loss only.
    Base,
    /// Metric loss plus a fixed-weight energy-confusion term.
    Energy,
    /// Metric loss plus label-smoothed classification with fixed weight.
    SoftAdv,
    /// Metric loss against an adversarial classifier with scheduled weight.
    AdaptAdv,
}

impl Mode {
    pub fn uses_classifier(self) -> bool {
        matches!(self, Mode::SoftAdv | Mode::AdaptAdv)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Mode::Base),
            "energy" => Ok(Mode::Energy),
            "soft_adv" => Ok(Mode::SoftAdv),
            "adapt_adv" => Ok(Mode::AdaptAdv),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

fn d_seed() -> u64 {
    0
}
fn d_epochs() -> usize {
    30
}
fn d_mode() -> Mode {
    Mode::Base
}
fn d_batch() -> usize {
    64
}
fn d_per_class() -> usize {
    4
}
fn d_embedding() -> usize {
    64
}
fn d_true() -> bool {
    true
}
fn d_backbone_lr() -> f64 {
    1e-4
}
fn d_head_lr() -> f64 {
    1e-3
}
fn d_proxy_lr() -> f64 {
    0.01
}
fn d_classifier_lr() -> f64 {
    1e-3
}
fn d_smoothing() -> f64 {
    0.15
}
fn d_dropout() -> f64 {
    0.1
}
fn d_l_thresh() -> f64 {
    1.5
}
fn d_lambda0() -> f64 {
    0.5
}
fn d_grid() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}
fn d_train_fraction() -> f64 {
    0.5
}
fn d_val_fraction() -> f64 {
    0.2
}
fn d_ks() -> Vec<usize> {
    vec![1, 2, 4, 8]
}
fn d_extractor() -> ExtractorConfig {
    ExtractorConfig {
        backbone: BackboneConfig::default(),
        attention: AttentionKind::AdditiveSimple,
        sigma: Activation::Tanh,
        multidim_axis: MultidimAxis::Features,
        include_u: false,
    }
}
fn d_loss() -> MetricLossConfig {
    MetricLossConfig::new(LossKind::TripletHinge)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_mode")]
    pub mode: Mode,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Samples drawn per class in each balanced batch.
    #[serde(default = "d_per_class")]
    pub samples_per_class: usize,
    #[serde(default = "d_embedding")]
    pub embedding_dim: usize,
    #[serde(default = "d_true")]
    pub normalize_embeddings: bool,
    #[serde(default = "d_backbone_lr")]
    pub backbone_lr: f64,
    /// Attention and embedding layers.
    #[serde(default = "d_head_lr")]
    pub embedding_lr: f64,
    #[serde(default = "d_proxy_lr")]
    pub proxy_lr: f64,
    #[serde(default = "d_classifier_lr")]
    pub classifier_lr: f64,
    #[serde(default = "d_smoothing")]
    pub smoothing: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_l_thresh")]
    pub l_thresh: f64,
    /// Adversarial weight bound; also the fixed energy-confusion weight.
    #[serde(default = "d_lambda0")]
    pub lambda0: f64,
    #[serde(default = "d_grid")]
    pub lambda_grid: Vec<f64>,
    /// Defaults to half the feature length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_hidden: Option<usize>,
    #[serde(default = "d_train_fraction")]
    pub train_fraction: f64,
    /// Share of each seen class held out for validation.
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "d_ks")]
    pub eval_ks: Vec<usize>,
    #[serde(default = "d_extractor")]
    pub extractor: ExtractorConfig,
    #[serde(default = "d_loss")]
    pub loss: MetricLossConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// First eight bytes of the SHA-256 of the canonical TOML text.
    pub fn hash(&self) -> Result<u64> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        Ok(u64::from_be_bytes(b))
    }

    pub fn classes_per_batch(&self) -> usize {
        self.batch_size / self.samples_per_class.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("backbone_lr", self.backbone_lr),
            ("embedding_lr", self.embedding_lr),
            ("proxy_lr", self.proxy_lr),
            ("classifier_lr", self.classifier_lr),
        ];
        for (name, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {r}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config("samples_per_class must be at least 2".into()));
        }
        if self.classes_per_batch() < 2 {
            return Err(Error::Config(format!(
                "batch_size {} fits fewer than two classes of {}",
                self.batch_size, self.samples_per_class
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let lambda_ok = |l: f64| l > 0.0 && l <= 1.0;
        if !lambda_ok(self.lambda0) || !self.lambda_grid.iter().all(|&l| lambda_ok(l)) {
            return Err(Error::Config("lambda0 and lambda_grid entries must lie in (0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must be nonempty and positive".into()));
        }
        if self.classifier_hidden == Some(0) {
            return Err(Error::Config("classifier_hidden must be positive".into()));
        }
        self.extractor.backbone.validate()?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}
