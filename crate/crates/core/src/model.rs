//! The assembled network: guidance, tokenizer with its codebook, condition
//! projection and the scale-wise transformer, sharing one parameter store.

use candle_core::{DType, Tensor};

use crate::backbone::{Backbone, BackboneShape, Sampler};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{validation, Result};
use crate::guidance::Guidance;
use crate::imaging::Image;
use crate::nn::{self, derive_seed, ParamStore};
use crate::quantizer::vqvae::VqVae;
use crate::quantizer::ConditionProjection;

const GUIDANCE_STREAM: u64 = 1;
const VQVAE_STREAM: u64 = 2;
const CONDITION_STREAM: u64 = 3;
const BACKBONE_STREAM: u64 = 4;

pub const VQVAE_PREFIX: &str = "vqvae.";

#[derive(Debug)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub guidance: Guidance,
    pub vqvae: VqVae,
    pub cond: ConditionProjection,
    pub backbone: Backbone,
}

impl Model {
    /// Fresh initialization. Each component draws from its own seed stream,
    /// so changing one component's size leaves the others untouched.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.train.precision.dtype());
        let rng = |stream| nn::seeded_rng(derive_seed(cfg.seed, stream));
        let guidance = Guidance::new(&mut store, &mut rng(GUIDANCE_STREAM), &cfg.guidance)?;
        let vqvae = VqVae::new(&mut store, &mut rng(VQVAE_STREAM), &cfg.quantizer)?;
        let cond = ConditionProjection::new(
            &mut store,
            &mut rng(CONDITION_STREAM),
            cfg.guidance.attn_dim,
            cfg.quantizer.rank,
        )?;
        let g = cfg.guidance_grid();
        let shape = BackboneShape {
            scales: cfg.quantizer.scale_grid(),
            vocab: cfg.quantizer.codebook_size,
            cond_dim: cfg.guidance.attn_dim,
            cond_grid: (g, g),
        };
        let backbone = Backbone::new(&mut store, &mut rng(BACKBONE_STREAM), &cfg.backbone, shape)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            guidance,
            vqvae,
            cond,
            backbone,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn checkpoint(&self, stage: &str, iteration: usize) -> Result<Checkpoint> {
        Checkpoint::from_store(
            &self.store,
            stage,
            iteration,
            self.cfg.to_toml()?,
            self.cfg.hash()?,
            self.cfg.tokenizer_hash()?,
        )
    }

    /// Rebuilds the model recorded in a checkpoint, restoring every parameter.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ExperimentConfig::from_toml(&ck.meta.config_toml)?;
        if cfg.hash()? != ck.meta.config_hash {
            return Err(validation("checkpoint config does not match its recorded hash"));
        }
        let model = Self::new(&cfg)?;
        let n = ck.restore_into(&model.store, &[""])?;
        if n != model.store.len() {
            return Err(validation(format!(
                "checkpoint restores {n} of {} parameters",
                model.store.len()
            )));
        }
        Ok(model)
    }

    /// Copies the tokenizer out of a first-stage checkpoint. The quantizer
    /// sections of both configurations must agree.
    pub fn load_tokenizer(&self, ck: &Checkpoint) -> Result<usize> {
        if ck.meta.tokenizer_hash != self.cfg.tokenizer_hash()? {
            return Err(validation(
                "tokenizer checkpoint was trained with a different quantizer configuration",
            ));
        }
        ck.restore_into(&self.store, &[VQVAE_PREFIX])
    }

    /// Guidance features for a batch of LR crops of the configured size.
    pub fn guidance_features(&self, lr: &[&Image]) -> Result<Tensor> {
        let c = self.cfg.data.lr_crop;
        for img in lr {
            if img.dims() != (c, c) {
                return Err(validation(format!(
                    "LR input {}x{} must be {c}x{c}",
                    img.height(),
                    img.width()
                )));
            }
        }
        self.guidance.forward(lr, self.cfg.ablations.use_tsg, self.dtype())
    }

    /// Generates SR crops for a batch of LR crops.
    pub fn super_resolve(&self, lr: &[&Image], sampler: Sampler, seed: u64) -> Result<Vec<Image>> {
        let f_tsg = self.guidance_features(lr)?;
        let tokens = self.backbone.generate(&f_tsg, sampler, seed)?;
        let cond = self.cond.forward(&f_tsg)?;
        let table = self.vqvae.codebook.lookup_table(&cond, self.cfg.ablations.use_cac)?;
        self.vqvae.decode_multiscale(&tokens, &table)
    }
}
