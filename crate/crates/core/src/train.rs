//! Two training stages: the tokenizer alone, then guidance, codebook
//! modulation and the transformer against the frozen tokenizer.

use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{debug, info};

use crate::backbone::LogitsPyramid;
use crate::config::{ExperimentConfig, OptimizerConfig};
use crate::dataio::{load_manifest, synthetic_id, Batch, BatchIter, LoadedPair, Split};
use crate::degrade::generate_corpus;
use crate::error::{validation, Error, Result};
use crate::imaging::Image;
use crate::losses::{ce_loss, mse_tensor, toc_loss_tensor, value};
use crate::model::Model;
use crate::nn::{self, derive_seed};
use crate::quantizer::{encode_multiscale, TokenMap};

const DATA_STREAM: u64 = 10;
const DROPOUT_STREAM: u64 = 11;

/// Per-iteration loss values with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub columns: Vec<&'static str>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossCurve {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, iteration: usize, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((iteration, values));
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["iteration"];
        header.extend(&self.columns);
        w.write_record(&header)?;
        for (it, vals) in &self.rows {
            let mut rec = vec![it.to_string()];
            rec.extend(vals.iter().map(|v| format!("{v:.9e}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Training pairs from the configured manifest (train split) or, without
/// one, the synthetic corpus generated in memory.
pub fn training_pairs(cfg: &ExperimentConfig) -> Result<Vec<LoadedPair>> {
    match &cfg.data.manifest {
        Some(path) => load_manifest(path)?.with_split(Split::Train).load_pairs(),
        None => Ok(generate_corpus(&cfg.data.synth)?
            .into_iter()
            .enumerate()
            .map(|(i, p)| LoadedPair {
                id: synthetic_id(i),
                lr: p.lr,
                hr: p.hr,
            })
            .collect()),
    }
}

fn batches(cfg: &ExperimentConfig, pairs: &[LoadedPair], batch_size: usize, stage: u64) -> Result<BatchIter> {
    let c = cfg.data.lr_crop;
    BatchIter::new(
        pairs.to_vec(),
        batch_size,
        (c, c),
        cfg.data.scale,
        derive_seed(cfg.seed, DATA_STREAM + 100 * stage),
    )
}

fn optimizer(vars: Vec<Var>, o: &OptimizerConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
    )?)
}

fn check_finite(iteration: usize, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            detail: format!("{name} loss is {v}"),
        })
    }
}

fn refs(images: &[Image]) -> Vec<&Image> {
    images.iter().collect()
}

/// Tokenizer stage. `iterations` overrides the configured count.
pub fn train_vqvae(model: &Model, pairs: &[LoadedPair], iterations: Option<usize>) -> Result<LossCurve> {
    let o = &model.cfg.vqvae_optimizer;
    let iterations = iterations.unwrap_or(o.iterations);
    let mut data = batches(&model.cfg, pairs, o.batch_size, 0)?;
    let mut opt = optimizer(model.store.vars_with_prefixes(&["vqvae."]), o)?;
    let mut curve = LossCurve::new(&["total", "recon", "codebook", "commitment"]);
    let dtype = model.dtype();
    for it in 0..iterations {
        opt.set_learning_rate(o.lr_at(it, iterations));
        let batch = data.next_batch()?;
        let hr = nn::images_to_tensor(&refs(&batch.hr), dtype)?;
        let (l, _) = model.vqvae.losses(&hr)?;
        let vals = vec![value(&l.total)?, value(&l.recon)?, value(&l.codebook)?, value(&l.commitment)?];
        check_finite(it, "tokenizer", vals[0])?;
        opt.backward_step(&l.total)?;
        if it % model.cfg.train.log_every == 0 || it + 1 == iterations {
            info!("vqvae it {it}: total {:.6} recon {:.6}", vals[0], vals[1]);
        }
        curve.push(it, vals);
    }
    Ok(curve)
}

/// Mean hard-reconstruction MSE of the tokenizer over whole HR images.
pub fn reconstruction_mse(model: &Model, pairs: &[LoadedPair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let rec = model.vqvae.reconstruct(&[&p.hr])?;
        total += crate::losses::mse_loss(&rec[0], &p.hr)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Loss terms of one autoregressive step.
#[derive(Debug, Clone)]
pub struct ArLosses {
    pub total: Tensor,
    pub ce: Tensor,
    pub mse: Tensor,
    pub toc: Tensor,
    /// The order term as it enters the total (zero when disabled).
    pub toc_term: Tensor,
    pub targets: Vec<TokenMap>,
    pub logits: LogitsPyramid,
}

/// Target token maps of HR crops under the per-sample lookup tables implied
/// by the (detached) conditions.
pub fn target_tokens(model: &Model, hr: &[&Image], cond: &Tensor) -> Result<Vec<TokenMap>> {
    let use_cac = model.cfg.ablations.use_cac;
    let features = model.vqvae.encode_features(hr, model.dtype())?;
    let table = model.vqvae.codebook.snapshot()?;
    let conds: Vec<Vec<f64>> = cond.detach().to_dtype(candle_core::DType::F64)?.to_vec2()?;
    let scales = model.cfg.quantizer.scale_grid();
    features
        .iter()
        .zip(&conds)
        .map(|(f, c)| {
            let eff = table.effective(c, use_cac)?;
            Ok(encode_multiscale(f, &eff, &scales)?.tokens)
        })
        .collect()
}

/// Forward pass of the autoregressive objective on one batch.
pub fn ar_losses(
    model: &Model,
    batch: &Batch,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<ArLosses> {
    let ab = model.cfg.ablations;
    let w = &model.cfg.loss;
    let f_tsg = model.guidance_features(&refs(&batch.lr))?;
    let cond = model.cond.forward(&f_tsg)?;
    let targets = target_tokens(model, &refs(&batch.hr), &cond)?;
    let logits = model.backbone.forward_teacher_forced(&targets, &f_tsg, dropout_rng)?;
    let ce = ce_loss(&logits, &targets)?;
    let table = model.vqvae.codebook.lookup_table(&cond, ab.use_cac)?;
    let probs = (0..logits.num_scales())
        .map(|k| nn::softmax_last(&logits.scale(k)?))
        .collect::<Result<Vec<_>>>()?;
    let feat = model.vqvae.pyramid.embed_soft(&probs, &table)?;
    let sr = model.vqvae.decoder.forward(&feat)?;
    let hr = nn::images_to_tensor(&refs(&batch.hr), model.dtype())?;
    let mse = mse_tensor(&sr, &hr)?;
    let toc = toc_loss_tensor(&sr, &hr, w.toc_patch)?;
    let toc_term = if ab.use_toc {
        (&toc * w.lambda_toc)?
    } else {
        toc.zeros_like()?
    };
    let total = ((&ce + (&mse * w.lambda_mse)?)? + &toc_term)?;
    Ok(ArLosses {
        total,
        ce,
        mse,
        toc,
        toc_term,
        targets,
        logits,
    })
}

/// Prefixes of the parameters updated in the autoregressive stage.
pub fn ar_trainable_prefixes(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut p = vec!["guidance.", "backbone."];
    if cfg.ablations.use_cac {
        p.push("cac.");
    }
    if cfg.train.unfreeze_decoder {
        p.push("vqvae.dec.");
    }
    p
}

/// Autoregressive stage. `iterations` overrides the configured count.
pub fn train_ar(model: &Model, pairs: &[LoadedPair], iterations: Option<usize>) -> Result<LossCurve> {
    let o = &model.cfg.optimizer;
    let iterations = iterations.unwrap_or(o.iterations);
    let mut data = batches(&model.cfg, pairs, o.batch_size, 1)?;
    let prefixes = ar_trainable_prefixes(&model.cfg);
    let mut opt = optimizer(model.store.vars_with_prefixes(&prefixes), o)?;
    let mut dropout = nn::seeded_rng(derive_seed(model.cfg.seed, DROPOUT_STREAM));
    let counter = model.vqvae.codebook.modulated_lookups.clone();
    counter.reset();
    let mut curve = LossCurve::new(&["total", "ce", "mse", "toc", "toc_term"]);
    for it in 0..iterations {
        opt.set_learning_rate(o.lr_at(it, iterations));
        let batch = data.next_batch()?;
        let l = ar_losses(model, &batch, Some(&mut dropout))?;
        let vals = vec![
            value(&l.total)?,
            value(&l.ce)?,
            value(&l.mse)?,
            value(&l.toc)?,
            value(&l.toc_term)?,
        ];
        check_finite(it, "autoregressive", vals[0])?;
        opt.backward_step(&l.total)?;
        if it % model.cfg.train.log_every == 0 || it + 1 == iterations {
            info!(
                "ar it {it}: total {:.6} ce {:.6} mse {:.6} toc {:.6}",
                vals[0], vals[1], vals[2], vals[3]
            );
        }
        curve.push(it, vals);
    }
    debug!("modulated codebook lookups: {}", counter.get());
    if !model.cfg.ablations.use_cac && counter.get() != 0 {
        return Err(validation(format!(
            "static codebook run performed {} modulated lookups",
            counter.get()
        )));
    }
    Ok(curve)
}
