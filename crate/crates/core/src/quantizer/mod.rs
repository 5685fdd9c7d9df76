//! Multi-scale residual vector quantization with a condition-adaptive codebook.
//!
//! A code embedding can be perturbed by a low-rank, condition-dependent term:
//!
//! ```text
//! Z'(g)[i] = Z[i] + tanh(alpha) * ((U_i * h(g)) V^T)
//! ```
//!
//! `h(g)` is a global condition vector projected from the guidance features.
//! With `alpha = 0` (the initial value) the lookup is the static table.

mod resample;
pub mod vqvae;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::imaging::FeatureMap;
use crate::nn::{Linear, ParamStore};

pub use resample::Resampler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub rank: usize,
    /// Side lengths of the square token grids, coarse to fine.
    pub scales: Vec<usize>,
    /// Channel widths of the VQ-VAE encoder stages (mirrored by the decoder).
    pub channels: Vec<usize>,
    pub commitment_weight: f64,
    pub codebook_weight: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            code_dim: 32,
            rank: 8,
            scales: vec![1, 2, 4, 8],
            channels: vec![16, 32, 64],
            commitment_weight: 0.25,
            codebook_weight: 1.0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(config("codebook_size must be at least 2"));
        }
        if self.rank == 0 || self.rank > self.code_dim {
            return Err(config("rank must lie in 1..=code_dim"));
        }
        if self.channels.is_empty() {
            return Err(config("quantizer needs at least one encoder stage"));
        }
        validate_scales(&self.scale_grid())
    }

    pub fn scale_grid(&self) -> Vec<(usize, usize)> {
        self.scales.iter().map(|&s| (s, s)).collect()
    }

    /// Spatial reduction factor of the VQ-VAE encoder.
    pub fn downsample(&self) -> usize {
        1 << self.channels.len()
    }
}

pub fn validate_scales(scales: &[(usize, usize)]) -> Result<()> {
    if scales.is_empty() {
        return Err(config("scale list is empty"));
    }
    for pair in scales.windows(2) {
        let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
        if h1 < h0 || w1 < w0 || h1 * w1 <= h0 * w0 {
            return Err(config(format!(
                "scales must be strictly increasing, got {:?} then {:?}",
                pair[0], pair[1]
            )));
        }
    }
    if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
        return Err(config("scale sizes must be positive"));
    }
    Ok(())
}

/// Discrete codes for every scale of the pyramid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    pub scales: Vec<(usize, usize)>,
    /// Row-major indices per scale.
    pub indices: Vec<Vec<u32>>,
}

impl TokenMap {
    pub fn new(scales: Vec<(usize, usize)>, indices: Vec<Vec<u32>>, vocab: usize) -> Result<Self> {
        validate_scales(&scales)?;
        if scales.len() != indices.len() {
            return Err(validation("one index grid per scale required"));
        }
        for (&(h, w), grid) in scales.iter().zip(&indices) {
            if grid.len() != h * w {
                return Err(validation(format!(
                    "scale {h}x{w} has {} indices",
                    grid.len()
                )));
            }
            if let Some(bad) = grid.iter().find(|&&i| i as usize >= vocab) {
                return Err(validation(format!("token {bad} outside vocabulary {vocab}")));
            }
        }
        Ok(Self { scales, indices })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    pub fn final_hw(&self) -> (usize, usize) {
        *self.scales.last().expect("validated non-empty")
    }

    pub fn flat(&self) -> Vec<u32> {
        self.indices.concat()
    }
}

/// Count of condition-modulated lookups, for checking that ablations really bypass them.
#[derive(Debug, Clone, Default)]
pub struct LookupCounter(Arc<AtomicUsize>);

impl LookupCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Trainable codebook state: base table plus the low-rank modulation parameters.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// `K x d` base embeddings.
    pub z: Tensor,
    /// `K x r` per-code bases.
    pub u: Tensor,
    /// `d x r` shared directions.
    pub v: Tensor,
    /// Scalar gate, stored with shape `(1,)`.
    pub alpha: Tensor,
    pub modulated_lookups: LookupCounter,
}

impl Codebook {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &QuantizerConfig) -> Result<Self> {
        let (k, d, r) = (cfg.codebook_size, cfg.code_dim, cfg.rank);
        Ok(Self {
            z: store.uniform(rng, "vqvae.codebook.z", &[k, d], 1.0 / k as f64)?,
            u: store.normal(rng, "cac.u", &[k, r], 1.0)?,
            v: store.normal(rng, "cac.v", &[d, r], 1.0 / (r as f64).sqrt())?,
            alpha: store.constant("cac.alpha", &[1], 0.0)?,
            modulated_lookups: LookupCounter::default(),
        })
    }

    pub fn size(&self) -> usize {
        self.z.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.z.dims()[1]
    }

    pub fn rank(&self) -> usize {
        self.u.dims()[1]
    }

    /// Per-sample modulated tables `(B, K, d)` for conditions `(B, r)`.
    pub fn modulated_table(&self, cond: &Tensor) -> Result<Tensor> {
        self.modulated_lookups.bump();
        let (_, r) = cond.dims2()?;
        if r != self.rank() {
            return Err(validation(format!(
                "condition has {r} dims, codebook rank is {}",
                self.rank()
            )));
        }
        let scaled = self.u.unsqueeze(0)?.broadcast_mul(&cond.unsqueeze(1)?)?;
        let delta = scaled.broadcast_matmul(&self.v.t()?)?;
        let gated = delta.broadcast_mul(&self.alpha.tanh()?.reshape((1, 1, 1))?)?;
        Ok(gated.broadcast_add(&self.z.unsqueeze(0)?)?)
    }

    /// Table used for lookups: modulated per sample when `use_cac`, else the
    /// static table broadcast to `(B, K, d)`.
    pub fn lookup_table(&self, cond: &Tensor, use_cac: bool) -> Result<Tensor> {
        if use_cac {
            self.modulated_table(cond)
        } else {
            let b = cond.dims()[0];
            Ok(self.z.unsqueeze(0)?.broadcast_as((b, self.size(), self.dim()))?.contiguous()?)
        }
    }

    /// Plain-value copy for per-position search and inference.
    pub fn snapshot(&self) -> Result<CodeTable> {
        let to_vec = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
        };
        Ok(CodeTable {
            k: self.size(),
            d: self.dim(),
            r: self.rank(),
            z: to_vec(&self.z)?,
            u: to_vec(&self.u)?,
            v: to_vec(&self.v)?,
            tanh_alpha: to_vec(&self.alpha)?[0].tanh(),
            counter: self.modulated_lookups.clone(),
        })
    }

    pub fn nearest_code(&self, cond: &[f64], v: &[f64], use_cac: bool) -> Result<usize> {
        self.snapshot()?.nearest_code(cond, v, use_cac)
    }
}

/// Codebook values as plain arrays.
#[derive(Debug, Clone)]
pub struct CodeTable {
    pub k: usize,
    pub d: usize,
    pub r: usize,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub tanh_alpha: f64,
    counter: LookupCounter,
}

impl CodeTable {
    /// Builds a table directly from values (the counter is private to it).
    pub fn from_parts(
        k: usize,
        d: usize,
        r: usize,
        z: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
        alpha: f64,
    ) -> Result<Self> {
        if z.len() != k * d || u.len() != k * r || v.len() != d * r || r > d || k < 2 {
            return Err(validation("inconsistent codebook dimensions"));
        }
        if z.iter().chain(&u).chain(&v).any(|x| !x.is_finite()) || !alpha.is_finite() {
            return Err(validation("codebook contains non-finite values"));
        }
        Ok(Self {
            k,
            d,
            r,
            z,
            u,
            v,
            tanh_alpha: alpha.tanh(),
            counter: LookupCounter::default(),
        })
    }

    pub fn base(&self, i: usize) -> &[f64] {
        &self.z[i * self.d..(i + 1) * self.d]
    }

    pub fn counter(&self) -> &LookupCounter {
        &self.counter
    }

    /// `Z[i] + tanh(alpha) * ((U_i * cond) V^T)`.
    pub fn modulated_embedding(&self, i: usize, cond: &[f64]) -> Result<Vec<f64>> {
        if i >= self.k {
            return Err(validation(format!("code index {i} outside 0..{}", self.k)));
        }
        if cond.len() != self.r {
            return Err(validation(format!(
                "condition has {} dims, expected {}",
                cond.len(),
                self.r
            )));
        }
        self.counter.bump();
        Ok(self.modulate_row(i, cond))
    }

    fn modulate_row(&self, i: usize, cond: &[f64]) -> Vec<f64> {
        let ui = &self.u[i * self.r..(i + 1) * self.r];
        let coeffs: Vec<f64> = ui.iter().zip(cond).map(|(a, b)| a * b).collect();
        (0..self.d)
            .map(|c| {
                let vrow = &self.v[c * self.r..(c + 1) * self.r];
                let delta: f64 = vrow.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
                self.z[i * self.d + c] + self.tanh_alpha * delta
            })
            .collect()
    }

    /// Full `K x d` table used for selection and decoding.
    pub fn effective(&self, cond: &[f64], use_cac: bool) -> Result<Vec<f64>> {
        if !use_cac {
            return Ok(self.z.clone());
        }
        if cond.len() != self.r {
            return Err(validation("condition dimension mismatch"));
        }
        self.counter.bump();
        Ok((0..self.k).flat_map(|i| self.modulate_row(i, cond)).collect())
    }

    pub fn nearest_code(&self, cond: &[f64], v: &[f64], use_cac: bool) -> Result<usize> {
        if v.len() != self.d {
            return Err(validation("query dimension mismatch"));
        }
        let table = self.effective(cond, use_cac)?;
        Ok(nearest_in(&table, self.d, v))
    }
}

/// Argmin of squared Euclidean distance over the rows of `table`; the lowest index wins ties.
pub fn nearest_in(table: &[f64], d: usize, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, row) in table.chunks_exact(d).enumerate() {
        let dist: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    best
}

/// Feature map as position-major rows `(h*w) x c`.
pub fn to_rows(f: &FeatureMap) -> Vec<f64> {
    let (c, h, w) = f.shape();
    let mut rows = vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            rows[p * c + ch] = f.values()[ch * h * w + p];
        }
    }
    rows
}

pub fn from_rows(rows: &[f64], c: usize, h: usize, w: usize) -> Result<FeatureMap> {
    let mut values = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            values[ch * h * w + p] = rows[p * c + ch];
        }
    }
    FeatureMap::new(c, h, w, values)
}

/// Result of residual multi-scale quantization.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub tokens: TokenMap,
    /// Accumulated reconstruction on the finest grid.
    pub reconstruction: FeatureMap,
    /// `||f - acc||_2` after each scale.
    pub errors: Vec<f64>,
}

/// Residual recurrence over the scale pyramid:
/// `r_k = down(f - acc)`, `t_k = nearest(r_k)`, `acc += up(embed(t_k))`.
///
/// `table` is the effective `K x d` lookup table (see [`CodeTable::effective`]).
pub fn encode_multiscale(
    f: &FeatureMap,
    table: &[f64],
    scales: &[(usize, usize)],
) -> Result<Encoded> {
    validate_scales(scales)?;
    let (d, hs, ws) = f.shape();
    if *scales.last().unwrap() != (hs, ws) {
        return Err(config(format!(
            "final scale {:?} does not match latent grid {hs}x{ws}",
            scales.last().unwrap()
        )));
    }
    if table.len() % d != 0 || table.is_empty() {
        return Err(validation("code table width does not match feature channels"));
    }
    let k = table.len() / d;
    let target = to_rows(f);
    let mut acc = vec![0.0; target.len()];
    let mut indices = Vec::with_capacity(scales.len());
    let mut errors = Vec::with_capacity(scales.len());
    for &hw in scales {
        let residual: Vec<f64> = target.iter().zip(&acc).map(|(a, b)| a - b).collect();
        let coarse = Resampler::area((hs, ws), hw).apply_rows(&residual, d);
        let tokens: Vec<u32> = coarse
            .chunks_exact(d)
            .map(|row| nearest_in(table, d, row) as u32)
            .collect();
        let embedded: Vec<f64> = tokens
            .iter()
            .flat_map(|&t| table[t as usize * d..(t as usize + 1) * d].iter().copied())
            .collect();
        let up = Resampler::bilinear(hw, (hs, ws)).apply_rows(&embedded, d);
        acc.iter_mut().zip(&up).for_each(|(a, u)| *a += u);
        errors.push(
            target
                .iter()
                .zip(&acc)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        );
        indices.push(tokens);
    }
    Ok(Encoded {
        tokens: TokenMap::new(scales.to_vec(), indices, k)?,
        reconstruction: from_rows(&acc, d, hs, ws)?,
        errors,
    })
}

/// Sum of upsampled embeddings for a token pyramid, as a feature map on the finest grid.
pub fn accumulate_embeddings(tm: &TokenMap, table: &[f64], d: usize) -> Result<FeatureMap> {
    let (hs, ws) = tm.final_hw();
    let mut acc = vec![0.0; hs * ws * d];
    for (&hw, grid) in tm.scales.iter().zip(&tm.indices) {
        let embedded: Vec<f64> = grid
            .iter()
            .flat_map(|&t| table[t as usize * d..(t as usize + 1) * d].iter().copied())
            .collect();
        let up = Resampler::bilinear(hw, (hs, ws)).apply_rows(&embedded, d);
        acc.iter_mut().zip(&up).for_each(|(a, u)| *a += u);
    }
    from_rows(&acc, d, hs, ws)
}

/// Dense upsampling matrices `(n_final, n_k)` for every scale, as tensors.
#[derive(Debug, Clone)]
pub struct PyramidOps {
    pub scales: Vec<(usize, usize)>,
    pub up: Vec<Tensor>,
    pub down: Vec<Tensor>,
}

impl PyramidOps {
    pub fn new(scales: &[(usize, usize)], dtype: DType) -> Result<Self> {
        validate_scales(scales)?;
        let fin = *scales.last().unwrap();
        let dev = Device::Cpu;
        let mut up = Vec::new();
        let mut down = Vec::new();
        for &hw in scales {
            let u = Resampler::bilinear(hw, fin);
            up.push(Tensor::from_vec(u.dense(), (u.out_len(), u.in_len()), &dev)?.to_dtype(dtype)?);
            let a = Resampler::area(fin, hw);
            down.push(
                Tensor::from_vec(a.dense(), (a.out_len(), a.in_len()), &dev)?.to_dtype(dtype)?,
            );
        }
        Ok(Self {
            scales: scales.to_vec(),
            up,
            down,
        })
    }

    pub fn final_hw(&self) -> (usize, usize) {
        *self.scales.last().unwrap()
    }

    /// Differentiable accumulation of hard tokens against per-sample tables `(B, K, d)`.
    /// Returns `(B, d, H, W)`.
    pub fn embed_tokens(&self, tokens: &[TokenMap], table: &Tensor) -> Result<Tensor> {
        let (b, k, d) = table.dims3()?;
        if tokens.len() != b {
            return Err(validation("token batch does not match table batch"));
        }
        let flat_table = table.reshape((b * k, d))?;
        let mut acc: Option<Tensor> = None;
        for (s, up) in self.up.iter().enumerate() {
            let n = up.dims()[1];
            let mut ids = Vec::with_capacity(b * n);
            for (bi, tm) in tokens.iter().enumerate() {
                if tm.scales != self.scales {
                    return Err(validation("token map scales do not match pyramid"));
                }
                ids.extend(tm.indices[s].iter().map(|&t| (bi * k) as u32 + t));
            }
            let ids = Tensor::from_vec(ids, b * n, &Device::Cpu)?;
            let emb = flat_table.index_select(&ids, 0)?.reshape((b, n, d))?;
            let lifted = up.broadcast_matmul(&emb)?;
            acc = Some(match acc {
                Some(a) => (a + lifted)?,
                None => lifted,
            });
        }
        self.rows_to_map(&acc.unwrap())
    }

    /// Differentiable accumulation of expected embeddings under per-scale
    /// token distributions `probs[k]` of shape `(B, n_k, K)`.
    pub fn embed_soft(&self, probs: &[Tensor], table: &Tensor) -> Result<Tensor> {
        if probs.len() != self.up.len() {
            return Err(validation("one distribution per scale required"));
        }
        let mut acc: Option<Tensor> = None;
        for (p, up) in probs.iter().zip(&self.up) {
            let emb = p.matmul(table)?;
            let lifted = up.broadcast_matmul(&emb)?;
            acc = Some(match acc {
                Some(a) => (a + lifted)?,
                None => lifted,
            });
        }
        self.rows_to_map(&acc.unwrap())
    }

    fn rows_to_map(&self, rows: &Tensor) -> Result<Tensor> {
        let (b, _, d) = rows.dims3()?;
        let (h, w) = self.final_hw();
        Ok(rows.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?)
    }
}

/// Projects globally pooled guidance features to the condition vector `h(g)`.
#[derive(Debug, Clone)]
pub struct ConditionProjection {
    pub proj: Linear,
}

impl ConditionProjection {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        rank: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, rng, "cac.cond_proj", in_dim, rank, true)?,
        })
    }

    /// `(B, C, H, W)` guidance features -> `(B, r)` conditions.
    pub fn forward(&self, f_tsg: &Tensor) -> Result<Tensor> {
        let pooled = f_tsg.mean(D::Minus1)?.mean(D::Minus1)?;
        self.proj.forward(&pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::nn::seeded_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn table(rng: &mut ChaCha8Rng, k: usize, d: usize, r: usize, alpha: f64) -> CodeTable {
        CodeTable::from_parts(
            k,
            d,
            r,
            gaussian(rng, k * d),
            gaussian(rng, k * r),
            gaussian(rng, d * r),
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn hand_modulation_example() {
        let t = CodeTable::from_parts(
            2,
            2,
            1,
            vec![1.0, 0.0, 0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.5, 0.5],
            0.5f64.atanh(),
        )
        .unwrap();
        let e = t.modulated_embedding(0, &[1.0]).unwrap();
        assert!((e[0] - 1.5).abs() < 1e-12 && (e[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn modulation_identities() {
        let mut rng = seeded_rng(4);
        let t0 = table(&mut rng, 16, 8, 4, 0.0);
        let cond = gaussian(&mut rng, 4);
        for i in 0..16 {
            assert_eq!(t0.modulated_embedding(i, &cond).unwrap(), t0.base(i));
        }
        let t1 = table(&mut rng, 16, 8, 4, 1.3);
        for i in 0..16 {
            assert_eq!(t1.modulated_embedding(i, &[0.0; 4]).unwrap(), t1.base(i));
        }
    }

    #[test]
    fn modulation_rejects_bad_index() {
        let mut rng = seeded_rng(5);
        let t = table(&mut rng, 4, 4, 2, 0.1);
        assert!(t.modulated_embedding(4, &[0.0, 0.0]).is_err());
        assert!(t.modulated_embedding(0, &[0.0]).is_err());
    }

    #[test]
    fn nearest_code_examples() {
        let t = CodeTable::from_parts(2, 1, 1, vec![0.0, 1.0], vec![0.0; 2], vec![0.0], 0.0)
            .unwrap();
        assert_eq!(t.nearest_code(&[0.0], &[0.5], false).unwrap(), 0);
        assert_eq!(t.nearest_code(&[0.0], &[1.0], false).unwrap(), 1);
        let mut rng = seeded_rng(6);
        let t = table(&mut rng, 16, 4, 2, 0.0);
        for j in 0..16 {
            assert_eq!(t.nearest_code(&[0.0, 0.0], t.base(j), false).unwrap(), j);
        }
    }

    #[test]
    fn tensor_and_plain_modulation_agree() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = seeded_rng(7);
        let cfg = QuantizerConfig {
            codebook_size: 8,
            code_dim: 6,
            rank: 3,
            ..Default::default()
        };
        let cb = Codebook::new(&mut store, &mut rng, &cfg)?;
        store.assign("cac.alpha", &Tensor::new(&[0.7f64], &Device::Cpu)?)?;
        let cond = vec![0.3, -1.2, 0.8];
        let plain = cb.snapshot()?;
        let t = cb.modulated_table(&Tensor::from_vec(cond.clone(), (1, 3), &Device::Cpu)?)?;
        let t: Vec<f64> = t.flatten_all()?.to_vec1()?;
        for i in 0..8 {
            let e = plain.modulated_embedding(i, &cond)?;
            for c in 0..6 {
                assert!((e[c] - t[i * 6 + c]).abs() < 1e-12);
            }
        }
        Ok(())
    }

    #[test]
    fn single_scale_exact_hit() {
        let mut rng = seeded_rng(8);
        let t = table(&mut rng, 8, 4, 2, 0.0);
        let code: Vec<f64> = t.base(3).to_vec();
        let values: Vec<f64> = (0..4).flat_map(|c| vec![code[c]; 16]).collect();
        let f = FeatureMap::new(4, 4, 4, values).unwrap();
        let enc = encode_multiscale(&f, &t.z, &[(4, 4)]).unwrap();
        assert!(enc.tokens.indices[0].iter().all(|&i| i == 3));
        assert_eq!(enc.reconstruction, f);
    }

    #[test]
    fn zero_features_pick_zero_code() {
        let mut rng = seeded_rng(9);
        let mut t = table(&mut rng, 8, 4, 2, 0.0);
        t.z[..4].iter_mut().for_each(|v| *v = 0.0);
        let f = FeatureMap::zeros(4, 8, 8);
        let enc = encode_multiscale(&f, &t.z, &[(1, 1), (2, 2), (4, 4), (8, 8)]).unwrap();
        assert!(enc.tokens.indices.iter().flatten().all(|&i| i == 0));
    }

    #[test]
    fn rejects_bad_scale_lists() {
        let f = FeatureMap::zeros(2, 4, 4);
        let z = vec![0.0; 8];
        assert!(encode_multiscale(&f, &z, &[(2, 2), (2, 2), (4, 4)]).is_err());
        assert!(encode_multiscale(&f, &z, &[(4, 4), (2, 2)]).is_err());
        assert!(encode_multiscale(&f, &z, &[(1, 1), (2, 2)]).is_err());
    }

    #[test]
    fn tensor_accumulation_matches_plain() -> Result<()> {
        let mut rng = seeded_rng(10);
        let t = table(&mut rng, 16, 4, 2, 0.0);
        let values = gaussian(&mut rng, 4 * 8 * 8);
        let f = FeatureMap::new(4, 8, 8, values)?;
        let scales = [(1, 1), (2, 2), (4, 4), (8, 8)];
        let enc = encode_multiscale(&f, &t.z, &scales)?;
        let ops = PyramidOps::new(&scales, DType::F64)?;
        let tbl = Tensor::from_vec(t.z.clone(), (1, 16, 4), &Device::Cpu)?;
        let acc = ops.embed_tokens(&[enc.tokens.clone()], &tbl)?;
        let got: Vec<f64> = acc.flatten_all()?.to_vec1()?;
        for (a, b) in got.iter().zip(enc.reconstruction.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let plain = accumulate_embeddings(&enc.tokens, &t.z, 4)?;
        assert_eq!(plain.values().len(), got.len());
        // One-hot distributions reproduce the hard path.
        let probs: Vec<Tensor> = enc
            .tokens
            .indices
            .iter()
            .map(|grid| {
                let mut p = vec![0.0; grid.len() * 16];
                for (i, &t) in grid.iter().enumerate() {
                    p[i * 16 + t as usize] = 1.0;
                }
                Tensor::from_vec(p, (1, grid.len(), 16), &Device::Cpu).unwrap()
            })
            .collect();
        let soft: Vec<f64> = ops.embed_soft(&probs, &tbl)?.flatten_all()?.to_vec1()?;
        for (a, b) in soft.iter().zip(&got) {
            assert!((a - b).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn counter_tracks_modulated_lookups() {
        let mut rng = seeded_rng(11);
        let t = table(&mut rng, 4, 4, 2, 0.2);
        t.nearest_code(&[0.0, 1.0], &[0.0; 4], false).unwrap();
        assert_eq!(t.counter().get(), 0);
        t.nearest_code(&[0.0, 1.0], &[0.0; 4], true).unwrap();
        assert_eq!(t.counter().get(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn full_resolution_step_never_hurts_with_zero_code(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let mut t = table(&mut rng, 16, 4, 2, 0.0);
            t.z[..4].iter_mut().for_each(|v| *v = 0.0);
            let f = FeatureMap::new(4, 8, 8, gaussian(&mut rng, 256)).unwrap();
            let enc = encode_multiscale(&f, &t.z, &[(1, 1), (2, 2), (4, 4), (8, 8)]).unwrap();
            prop_assert!(enc.errors[3] <= enc.errors[2] + 1e-12);
        }
    }
}
