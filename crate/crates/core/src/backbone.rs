//! Next-scale prediction transformer.
//!
//! The sequence is `[guidance prefix | scale 1 | scale 2 | ... | scale S]`.
//! Positions of scale `k` see the prefix, every coarser scale and their own
//! scale; the input at scale `k` is built only from tokens of scales `< k`,
//! so the logits of scale `k` never depend on tokens at scale `k` or finer.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::guidance::{attention, to_tokens};
use crate::nn::{self, LayerNorm, Linear, ParamStore};
use crate::quantizer::{validate_scales, PyramidOps, TokenMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            dropout: 0.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return Err(config("backbone dimensions must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(config(format!(
                "backbone width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Sizes the backbone takes from the quantizer and guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneShape {
    pub scales: Vec<(usize, usize)>,
    pub vocab: usize,
    pub cond_dim: usize,
    pub cond_grid: (usize, usize),
}

/// Per-scale logits stored as one `(B, N, K)` tensor.
#[derive(Debug, Clone)]
pub struct LogitsPyramid {
    pub logits: Tensor,
    pub scales: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl LogitsPyramid {
    /// Wraps a `(B, N, K)` tensor whose positions follow `scales` in order.
    pub fn from_tensor(logits: Tensor, scales: Vec<(usize, usize)>) -> Result<Self> {
        let mut offsets = Vec::new();
        let mut n = 0;
        for &(h, w) in &scales {
            offsets.push(n);
            n += h * w;
        }
        if logits.dims3()?.1 != n {
            return Err(validation("logits length does not match scales"));
        }
        Ok(Self {
            logits,
            scales,
            offsets,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Logits of scale `k` (zero-based), shape `(B, h_k*w_k, K)`.
    pub fn scale(&self, k: usize) -> Result<Tensor> {
        let n = self.scales[k].0 * self.scales[k].1;
        Ok(self.logits.narrow(1, self.offsets[k], n)?)
    }

    pub fn vocab(&self) -> usize {
        self.logits.dims()[2]
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Argmax,
    TopK { k: usize, temperature: f64 },
}

impl Sampler {
    /// Picks an index from one row of logits. Ties go to the lowest index.
    pub fn pick(&self, logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
        match *self {
            Sampler::Argmax => argmax(logits),
            Sampler::TopK { k, temperature } => {
                let mut order: Vec<usize> = (0..logits.len()).collect();
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                order.truncate(k.clamp(1, logits.len()));
                let t = temperature.max(f64::MIN_POSITIVE);
                let top = logits[order[0]] / t;
                let weights: Vec<f64> = order.iter().map(|&i| (logits[i] / t - top).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (&i, w) in order.iter().zip(&weights) {
                    if u < *w {
                        return i;
                    }
                    u -= w;
                }
                order[0]
            }
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub shape: BackboneShape,
    cond_proj: Linear,
    prefix_pos: Tensor,
    start: Tensor,
    token_emb: Tensor,
    scale_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
    pyramid: PyramidOps,
    offsets: Vec<usize>,
    dtype: DType,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &BackboneConfig,
        shape: BackboneShape,
    ) -> Result<Self> {
        cfg.validate()?;
        validate_scales(&shape.scales)?;
        let w = cfg.width;
        let prefix = shape.cond_grid.0 * shape.cond_grid.1;
        let mut offsets = Vec::new();
        let mut n = 0;
        for &(h, ww) in &shape.scales {
            offsets.push(n);
            n += h * ww;
        }
        let cond_proj = Linear::new(store, rng, "backbone.cond_proj", shape.cond_dim, w, true)?;
        let prefix_pos = store.normal(rng, "backbone.prefix_pos", &[prefix, w], 0.02)?;
        let start = store.normal(rng, "backbone.start", &[1, w], 0.02)?;
        let token_emb = store.normal(rng, "backbone.token_emb", &[shape.vocab, w], 0.02)?;
        let scale_emb = store.normal(rng, "backbone.scale_emb", &[shape.scales.len(), w], 0.02)?;
        let pos_emb = store.normal(rng, "backbone.pos_emb", &[n, w], 0.02)?;
        let mut blocks = Vec::new();
        for l in 0..cfg.layers {
            let p = format!("backbone.block{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), w)?,
                qkv: Linear::new(store, rng, &format!("{p}.qkv"), w, 3 * w, true)?,
                proj: Linear::new(store, rng, &format!("{p}.proj"), w, w, true)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), w)?,
                fc1: Linear::new(store, rng, &format!("{p}.fc1"), w, 4 * w, true)?,
                fc2: Linear::new(store, rng, &format!("{p}.fc2"), 4 * w, w, true)?,
            });
        }
        let final_norm = LayerNorm::new(store, "backbone.final_norm", w)?;
        let head = Linear::new(store, rng, "backbone.head", w, shape.vocab, true)?;
        let pyramid = PyramidOps::new(&shape.scales, store.dtype())?;
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            cond_proj,
            prefix_pos,
            start,
            token_emb,
            scale_emb,
            pos_emb,
            blocks,
            final_norm,
            head,
            pyramid,
            offsets,
            dtype: store.dtype(),
        })
    }

    pub fn prefix_len(&self) -> usize {
        self.shape.cond_grid.0 * self.shape.cond_grid.1
    }

    pub fn total_tokens(&self) -> usize {
        self.shape.scales.iter().map(|(h, w)| h * w).sum()
    }

    /// Parameter name prefixes of the positional tables.
    pub const POSITIONAL: [&'static str; 3] = [
        "backbone.prefix_pos",
        "backbone.scale_emb",
        "backbone.pos_emb",
    ];

    /// Additive attention mask over `prefix + first m scales`.
    fn mask(&self, m: usize) -> Result<Tensor> {
        let p = self.prefix_len();
        let mut block = vec![0usize; p];
        for (k, &(h, w)) in self.shape.scales.iter().take(m).enumerate() {
            block.extend(std::iter::repeat_n(k + 1, h * w));
        }
        let l = block.len();
        let mut data = vec![0.0f64; l * l];
        for i in 0..l {
            for j in 0..l {
                let allowed = if block[i] == 0 {
                    block[j] == 0
                } else {
                    block[j] <= block[i]
                };
                if !allowed {
                    data[i * l + j] = -1e30;
                }
            }
        }
        Ok(Tensor::from_vec(data, (l, l), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Scale inputs `(B, n_k, width)` for the first `m` scales, each built from
    /// the accumulated embeddings of strictly coarser tokens.
    fn scale_inputs(&self, tokens: &[&[Vec<u32>]], m: usize) -> Result<Vec<Tensor>> {
        let b = tokens.len();
        let w = self.cfg.width;
        let n1 = self.shape.scales[0].0 * self.shape.scales[0].1;
        let mut inputs = vec![self.start.unsqueeze(0)?.broadcast_as((b, n1, w))?.contiguous()?];
        let mut cum: Option<Tensor> = None;
        for k in 1..m {
            let prev = k - 1;
            let n_prev = self.shape.scales[prev].0 * self.shape.scales[prev].1;
            let mut ids = Vec::with_capacity(b * n_prev);
            for t in tokens {
                let grid = t.get(prev).ok_or_else(|| validation("missing coarser tokens"))?;
                if grid.len() != n_prev {
                    return Err(validation("token grid size does not match scale"));
                }
                if grid.iter().any(|&i| i as usize >= self.shape.vocab) {
                    return Err(validation("token outside vocabulary"));
                }
                ids.extend_from_slice(grid);
            }
            let ids = Tensor::from_vec(ids, b * n_prev, &Device::Cpu)?;
            let emb = self.token_emb.index_select(&ids, 0)?.reshape((b, n_prev, w))?;
            let lifted = self.pyramid.up[prev].broadcast_matmul(&emb)?;
            let c = match cum {
                Some(c) => (c + lifted)?,
                None => lifted,
            };
            inputs.push(self.pyramid.down[k].broadcast_matmul(&c)?);
            cum = Some(c);
        }
        Ok(inputs)
    }

    /// Embedded sequence `(B, P + N_m, width)` for the first `m` scales.
    pub fn embed(&self, tokens: &[&[Vec<u32>]], f_tsg: &Tensor, m: usize) -> Result<Tensor> {
        let (b, c, h, w) = f_tsg.dims4()?;
        if b != tokens.len() {
            return Err(validation("guidance batch does not match token batch"));
        }
        if c != self.shape.cond_dim || (h, w) != self.shape.cond_grid {
            return Err(validation(format!(
                "guidance features {c}x{h}x{w} do not match backbone ({}x{:?})",
                self.shape.cond_dim, self.shape.cond_grid
            )));
        }
        let prefix = self
            .cond_proj
            .forward(&to_tokens(f_tsg)?)?
            .broadcast_add(&self.prefix_pos)?;
        let mut parts = vec![prefix];
        for (k, input) in self.scale_inputs(tokens, m)?.into_iter().enumerate() {
            let n = input.dims()[1];
            let pos = self.pos_emb.narrow(0, self.offsets[k], n)?;
            let scale = self.scale_emb.narrow(0, k, 1)?;
            parts.push(input.broadcast_add(&pos)?.broadcast_add(&scale)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    fn dropout(&self, x: Tensor, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let n = x.elem_count();
                let keep: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect();
                let mask = Tensor::from_vec(keep, x.shape(), &Device::Cpu)?.to_dtype(x.dtype())?;
                Ok(x.mul(&mask)?)
            }
            _ => Ok(x),
        }
    }

    /// Runs the transformer over an embedded sequence covering the first `m`
    /// scales and returns logits `(B, N_m, K)` for the scale positions.
    pub fn forward_embedded(
        &self,
        x: &Tensor,
        m: usize,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let mask = self.mask(m)?;
        let (b, l, w) = x.dims3()?;
        if l != mask.dims()[0] {
            return Err(validation("sequence length does not match scale count"));
        }
        let heads = self.cfg.heads;
        let dh = w / heads;
        let mut h = x.clone();
        for blk in &self.blocks {
            let qkv = blk.qkv.forward(&blk.ln1.forward(&h)?)?;
            let qkv = qkv.reshape((b, l, 3, heads, dh))?.permute((2, 0, 3, 1, 4))?;
            let q = qkv.get(0)?.contiguous()?;
            let k = qkv.get(1)?.contiguous()?;
            let v = qkv.get(2)?.contiguous()?;
            let (att, _) = attention(&q, &k, &v, Some(&mask))?;
            let att = att.transpose(1, 2)?.contiguous()?.reshape((b, l, w))?;
            let att = self.dropout(blk.proj.forward(&att)?, &mut dropout_rng)?;
            h = (h + att)?;
            let mlp = blk.fc2.forward(&blk.fc1.forward(&blk.ln2.forward(&h)?)?.gelu()?)?;
            let mlp = self.dropout(mlp, &mut dropout_rng)?;
            h = (h + mlp)?;
        }
        let p = self.prefix_len();
        let out = h.narrow(1, p, l - p)?;
        self.head.forward(&self.final_norm.forward(&out)?)
    }

    /// Teacher-forced logits for all scales.
    pub fn forward_teacher_forced(
        &self,
        tokens: &[TokenMap],
        f_tsg: &Tensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LogitsPyramid> {
        for tm in tokens {
            if tm.scales != self.shape.scales {
                return Err(validation(format!(
                    "token scales {:?} do not match backbone scales {:?}",
                    tm.scales, self.shape.scales
                )));
            }
        }
        let grids: Vec<&[Vec<u32>]> = tokens.iter().map(|t| t.indices.as_slice()).collect();
        let m = self.shape.scales.len();
        let x = self.embed(&grids, f_tsg, m)?;
        let logits = self.forward_embedded(&x, m, dropout_rng)?;
        Ok(LogitsPyramid {
            logits,
            scales: self.shape.scales.clone(),
            offsets: self.offsets.clone(),
        })
    }

    /// Scale-by-scale generation. Deterministic for `Argmax`, and for
    /// `TopK` given the seed.
    pub fn generate(&self, f_tsg: &Tensor, sampler: Sampler, seed: u64) -> Result<Vec<TokenMap>> {
        let b = f_tsg.dims()[0];
        let mut rng = nn::seeded_rng(seed);
        let mut grids: Vec<Vec<Vec<u32>>> = vec![Vec::new(); b];
        for k in 0..self.shape.scales.len() {
            let views: Vec<&[Vec<u32>]> = grids.iter().map(|g| g.as_slice()).collect();
            let x = self.embed(&views, f_tsg, k + 1)?;
            let logits = self.forward_embedded(&x, k + 1, None)?;
            let n = self.shape.scales[k].0 * self.shape.scales[k].1;
            let rows: Vec<Vec<Vec<f64>>> = logits
                .narrow(1, self.offsets[k], n)?
                .to_dtype(DType::F64)?
                .to_vec3()?;
            for (bi, sample_rows) in rows.iter().enumerate() {
                let picks = sample_rows
                    .iter()
                    .map(|row| sampler.pick(row, &mut rng) as u32)
                    .collect();
                grids[bi].push(picks);
            }
        }
        grids
            .into_iter()
            .map(|g| TokenMap::new(self.shape.scales.clone(), g, self.shape.vocab))
            .collect()
    }

    /// Offsets of each scale inside the token part of the sequence.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// Mean log-probability helper used by tests: `(B, N, K)` logits to probabilities.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    nn::softmax_last(logits)
}

/// Index of the most likely token per position, `(B, N)`.
pub fn argmax_tokens(logits: &Tensor) -> Result<Vec<Vec<u32>>> {
    Ok(logits.argmax(D::Minus1)?.to_vec2::<u32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(store: &mut ParamStore, seed: u64) -> Backbone {
        let mut rng = nn::seeded_rng(seed);
        Backbone::new(
            store,
            &mut rng,
            &BackboneConfig {
                layers: 2,
                width: 16,
                heads: 2,
                dropout: 0.0,
            },
            BackboneShape {
                scales: vec![(1, 1), (2, 2), (4, 4)],
                vocab: 12,
                cond_dim: 8,
                cond_grid: (2, 2),
            },
        )
        .unwrap()
    }

    fn random_tokens(rng: &mut ChaCha8Rng, scales: &[(usize, usize)], vocab: u32) -> TokenMap {
        let indices = scales
            .iter()
            .map(|(h, w)| (0..h * w).map(|_| rng.random_range(0..vocab)).collect())
            .collect();
        TokenMap::new(scales.to_vec(), indices, vocab as usize).unwrap()
    }

    #[test]
    fn logits_shape() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let bb = tiny(&mut store, 0);
        let mut rng = nn::seeded_rng(1);
        let tm = random_tokens(&mut rng, &bb.shape.scales, 12);
        let f = nn::test_randn(101, &[1, 8, 2, 2], 1.0);
        let out = bb.forward_teacher_forced(&[tm], &f, None)?;
        assert_eq!(out.logits.dims(), &[1, 21, 12]);
        assert_eq!(out.scale(2)?.dims(), &[1, 16, 12]);
        Ok(())
    }

    #[test]
    fn rejects_mismatched_scales() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let bb = tiny(&mut store, 0);
        let tm = TokenMap::new(vec![(1, 1), (4, 4)], vec![vec![0], vec![0; 16]], 12)?;
        let f = Tensor::zeros((1, 8, 2, 2), DType::F64, &Device::Cpu)?;
        assert!(bb.forward_teacher_forced(&[tm], &f, None).is_err());
        Ok(())
    }

    #[test]
    fn generation_is_deterministic_and_topk1_is_argmax() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let bb = tiny(&mut store, 2);
        let f = nn::test_randn(102, &[2, 8, 2, 2], 1.0);
        let a = bb.generate(&f, Sampler::Argmax, 0)?;
        let b = bb.generate(&f, Sampler::Argmax, 99)?;
        assert_eq!(a, b);
        let c = bb.generate(&f, Sampler::TopK { k: 1, temperature: 1.0 }, 5)?;
        assert_eq!(a, c);
        let d1 = bb.generate(&f, Sampler::TopK { k: 12, temperature: 1.0 }, 5)?;
        let d2 = bb.generate(&f, Sampler::TopK { k: 12, temperature: 1.0 }, 5)?;
        assert_eq!(d1, d2);
        Ok(())
    }

    #[test]
    fn sampler_topk_low_temperature_converges_to_argmax() {
        let mut rng = nn::seeded_rng(3);
        for _ in 0..200 {
            let row: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pick = Sampler::TopK {
                k: 32,
                temperature: 1e-6,
            }
            .pick(&row, &mut rng);
            assert_eq!(pick, argmax(&row));
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn dropout_is_seeded() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(0);
        let bb = Backbone::new(
            &mut store,
            &mut rng,
            &BackboneConfig {
                layers: 1,
                width: 8,
                heads: 2,
                dropout: 0.3,
            },
            BackboneShape {
                scales: vec![(1, 1), (2, 2)],
                vocab: 4,
                cond_dim: 4,
                cond_grid: (1, 1),
            },
        )?;
        let tm = TokenMap::new(vec![(1, 1), (2, 2)], vec![vec![1], vec![0, 1, 2, 3]], 4)?;
        let f = Tensor::ones((1, 4, 1, 1), DType::F64, &Device::Cpu)?;
        let run = |seed| -> Result<Vec<f64>> {
            let mut r = nn::seeded_rng(seed);
            let out = bb.forward_teacher_forced(&[tm.clone()], &f, Some(&mut r))?;
            Ok(out.logits.flatten_all()?.to_vec1()?)
        };
        assert_eq!(run(1)?, run(1)?);
        assert_ne!(run(1)?, run(2)?);
        Ok(())
    }

    #[test]
    fn coarser_logits_ignore_finer_tokens() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let bb = tiny(&mut store, 4);
        let mut rng = nn::seeded_rng(5);
        let f = nn::test_randn(103, &[1, 8, 2, 2], 1.0);
        for k in 0..3 {
            let tm = random_tokens(&mut rng, &bb.shape.scales, 12);
            let mut other = tm.clone();
            for t in other.indices[k].iter_mut() {
                *t = (*t + 1 + rng.random_range(0..11)) % 12;
            }
            let a = bb.forward_teacher_forced(&[tm], &f, None)?;
            let b = bb.forward_teacher_forced(&[other], &f, None)?;
            for j in 0..=k {
                let da: Vec<f64> = a.scale(j)?.flatten_all()?.to_vec1()?;
                let db: Vec<f64> = b.scale(j)?.flatten_all()?.to_vec1()?;
                assert_eq!(da, db, "scale {j} changed after perturbing scale {k}");
            }
            if k + 1 < 3 {
                let da: Vec<f64> = a.scale(k + 1)?.flatten_all()?.to_vec1()?;
                let db: Vec<f64> = b.scale(k + 1)?.flatten_all()?.to_vec1()?;
                assert_ne!(da, db);
            }
        }
        Ok(())
    }

    #[test]
    fn zero_parameters_give_uniform_logits() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let bb = tiny(&mut store, 6);
        let names: Vec<String> = store.names().map(String::from).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        store.zero_prefixes(&refs)?;
        let mut rng = nn::seeded_rng(7);
        let tm = random_tokens(&mut rng, &bb.shape.scales, 12);
        let f = nn::test_randn(104, &[1, 8, 2, 2], 1.0);
        let out = bb.forward_teacher_forced(&[tm], &f, None)?;
        let v: Vec<f64> = out.logits.flatten_all()?.to_vec1()?;
        assert!(v.iter().all(|x| *x == 0.0));
        Ok(())
    }

    #[test]
    fn within_scale_permutation_is_equivariant_without_positions() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let bb = tiny(&mut store, 8);
        store.zero_prefixes(&Backbone::POSITIONAL)?;
        let mut rng = nn::seeded_rng(9);
        let tm = random_tokens(&mut rng, &bb.shape.scales, 12);
        let f = nn::test_randn(105, &[1, 8, 2, 2], 1.0);
        let x = bb.embed(&[tm.indices.as_slice()], &f, 3)?;
        let p = bb.prefix_len();
        let (k, n) = (1usize, 4usize);
        let start = p + bb.offsets()[k];
        let perm = [2usize, 0, 3, 1];
        let mut order: Vec<u32> = (0..x.dims()[1] as u32).collect();
        for (i, &src) in perm.iter().enumerate() {
            order[start + i] = (start + src) as u32;
        }
        let idx = Tensor::from_vec(order, x.dims()[1], &Device::Cpu)?;
        let xp = x.index_select(&idx, 1)?;
        let a: Vec<Vec<f64>> = bb.forward_embedded(&x, 3, None)?.squeeze(0)?.to_vec2()?;
        let b: Vec<Vec<f64>> = bb.forward_embedded(&xp, 3, None)?.squeeze(0)?.to_vec2()?;
        let close = |u: &[f64], v: &[f64]| u.iter().zip(v).all(|(s, t)| (s - t).abs() < 1e-10);
        let off = bb.offsets();
        for i in 0..off[k] {
            assert!(close(&a[i], &b[i]));
        }
        for (i, &src) in perm.iter().enumerate() {
            assert!(close(&b[off[k] + i], &a[off[k] + src]));
        }
        for i in off[k] + n..a.len() {
            assert!(close(&a[i], &b[i]));
        }
        Ok(())
    }

    #[test]
    fn conditioning_changes_first_scale() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let bb = tiny(&mut store, 10);
        let mut rng = nn::seeded_rng(11);
        let tm = random_tokens(&mut rng, &bb.shape.scales, 12);
        let f1 = nn::test_randn(106, &[1, 8, 2, 2], 1.0);
        let f2 = nn::test_randn(107, &[1, 8, 2, 2], 1.0);
        let a: Vec<f64> = bb.forward_teacher_forced(&[tm.clone()], &f1, None)?.scale(0)?.flatten_all()?.to_vec1()?;
        let b: Vec<f64> = bb.forward_teacher_forced(&[tm], &f2, None)?.scale(0)?.flatten_all()?.to_vec1()?;
        assert_ne!(a, b);
        Ok(())
    }
}
