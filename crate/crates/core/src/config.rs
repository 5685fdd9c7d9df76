//! Experiment configuration: a TOML document with a fixed schema.
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! The hash is the SHA-256 of the canonical re-serialization, not of the
//! file bytes, so formatting and comments do not change it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::degrade::SynthConfig;
use crate::error::{config, Error, Result};
use crate::guidance::GuidanceConfig;
use crate::losses::LossWeights;
use crate::quantizer::QuantizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            schedule: Schedule::Constant,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl OptimizerConfig {
    /// Step size at iteration `it` of `total`.
    pub fn lr_at(&self, it: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = it as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Defaults for the tokenizer stage, which trains from scratch.
    pub fn vqvae_default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 0.0,
            batch_size: 8,
            iterations: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return Err(config(format!("[{section}] needs lr > 0, weight_decay >= 0, eps > 0")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config(format!("[{section}] betas must lie in [0, 1)")));
        }
        if self.batch_size == 0 {
            return Err(config(format!("[{section}] batch_size must be positive")));
        }
        Ok(())
    }
}

fn vqvae_optimizer_default() -> OptimizerConfig {
    OptimizerConfig::vqvae_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub use_tsg: bool,
    pub use_cac: bool,
    pub use_toc: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_tsg: true,
            use_cac: true,
            use_toc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-lines manifest; when absent a synthetic corpus is generated in memory.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    /// LR crop side used for training and as the inference tile size.
    pub lr_crop: usize,
    pub scale: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synth: SynthConfig::default(),
            lr_crop: 16,
            scale: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub precision: Precision,
    /// Also fine-tune the tokenizer decoder during the autoregressive stage.
    pub unfreeze_decoder: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            unfreeze_decoder: false,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub quantizer: QuantizerConfig,
    pub backbone: BackboneConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default = "vqvae_optimizer_default")]
    pub vqvae_optimizer: OptimizerConfig,
    pub ablations: Ablations,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            guidance: GuidanceConfig::default(),
            quantizer: QuantizerConfig::default(),
            backbone: BackboneConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            vqvae_optimizer: OptimizerConfig::vqvae_default(),
            ablations: Ablations::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }

    /// Hash of the tokenizer-defining sections only; checkpoints from the
    /// first stage are compatible with any config sharing it.
    pub fn tokenizer_hash(&self) -> Result<String> {
        let q = toml::to_string(&self.quantizer).map_err(|e| config(e.to_string()))?;
        Ok(hex_digest(q.as_bytes()))
    }

    pub fn hr_size(&self) -> usize {
        self.data.lr_crop * self.data.scale
    }

    /// Token grid of the finest scale.
    pub fn latent_size(&self) -> usize {
        *self.quantizer.scales.last().unwrap_or(&0)
    }

    /// Side of the guidance feature grid (the backbone prefix).
    pub fn guidance_grid(&self) -> usize {
        self.data.lr_crop / 2
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.quantizer.validate()?;
        self.backbone.validate()?;
        self.loss.validate()?;
        self.optimizer.validate("optimizer")?;
        self.vqvae_optimizer.validate("vqvae_optimizer")?;
        if self.data.scale < 2 {
            return Err(config("data.scale must be at least 2"));
        }
        if self.data.lr_crop < 2 || self.data.lr_crop % 2 != 0 {
            return Err(config("data.lr_crop must be even and at least 2"));
        }
        let hr = self.hr_size();
        if self.latent_size() * self.quantizer.downsample() != hr {
            return Err(config(format!(
                "finest token grid {} times reduction {} must equal HR crop {hr}",
                self.latent_size(),
                self.quantizer.downsample()
            )));
        }
        if self.data.manifest.is_none() {
            self.data.synth.validate()?;
            if self.data.synth.scale != self.data.scale {
                return Err(config("data.synth.scale must equal data.scale"));
            }
        }
        if self.train.log_every == 0 {
            return Err(config("train.log_every must be positive"));
        }
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() -> Result<()> {
        let cfg = ExperimentConfig::from_toml("")?;
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.optimizer.lr, 5e-5);
        assert_eq!(cfg.optimizer.weight_decay, 5e-2);
        assert_eq!(cfg.optimizer.batch_size, 4);
        assert_eq!(cfg.loss.lambda_mse, 0.2);
        assert_eq!(cfg.loss.lambda_toc, 0.8);
        assert_eq!(cfg.loss.toc_patch, 8);
        assert_eq!(cfg.quantizer.rank, 8);
        assert_eq!(cfg.hr_size(), 64);
        Ok(())
    }

    #[test]
    fn round_trip_and_hash_ignore_formatting() -> Result<()> {
        let a = ExperimentConfig::from_toml("seed = 3\n[ablations]\nuse_toc = false\n")?;
        let b = ExperimentConfig::from_toml("# comment\nseed=3\n\n[ablations]\n  use_toc=false")?;
        assert_eq!(a.hash()?, b.hash()?);
        assert_eq!(ExperimentConfig::from_toml(&a.to_toml()?)?, a);
        assert_ne!(a.hash()?, ExperimentConfig::default().hash()?);
        assert_eq!(a.tokenizer_hash()?, ExperimentConfig::default().tokenizer_hash()?);
        assert_eq!(a.hash()?.len(), 64);
        Ok(())
    }

    #[test]
    fn rejects_unknown_keys_and_inconsistent_sizes() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[optimizer]\nlearning_rate = 1.0").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nlr_crop = 32").is_err());
        assert!(ExperimentConfig::from_toml("[backbone]\nwidth = 30\nheads = 4").is_err());
    }
}
