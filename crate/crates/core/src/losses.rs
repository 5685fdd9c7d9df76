//! Training objective: token cross-entropy, pixel MSE and the thermal order
//! consistency penalty on adjacent patch pairs.

use candle_core::{DType, Device, Tensor};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::backbone::LogitsPyramid;
use crate::error::{config, validation, Result};
use crate::imaging::Image;
use crate::nn;
use crate::quantizer::TokenMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_toc: f64,
    pub toc_patch: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 0.2,
            lambda_toc: 0.8,
            toc_patch: 8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mse >= 0.0 && self.lambda_toc >= 0.0) {
            return Err(config("loss weights must be non-negative"));
        }
        if self.toc_patch == 0 {
            return Err(config("toc_patch must be at least 1"));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood in nats over every token of every scale.
pub fn ce_loss(logits: &LogitsPyramid, targets: &[TokenMap]) -> Result<Tensor> {
    let (b, n, k) = logits.logits.dims3()?;
    if targets.len() != b {
        return Err(validation("target batch does not match logits batch"));
    }
    let mut ids = Vec::with_capacity(b * n);
    for t in targets {
        if t.scales != logits.scales {
            return Err(validation(format!(
                "target scales {:?} do not match logits scales {:?}",
                t.scales, logits.scales
            )));
        }
        let flat = t.flat();
        if flat.iter().any(|&i| i as usize >= k) {
            return Err(validation("target index outside vocabulary"));
        }
        ids.extend(flat);
    }
    let ids = Tensor::from_vec(ids, (b, n, 1), &Device::Cpu)?;
    let logp = nn::log_softmax_last(&logits.logits)?;
    Ok(logp.gather(&ids, 2)?.mean_all()?.neg()?)
}

pub fn mse_loss(sr: &Image, hr: &Image) -> Result<f64> {
    if sr.dims() != hr.dims() {
        return Err(validation(format!(
            "mse shape mismatch {:?} vs {:?}",
            sr.dims(),
            hr.dims()
        )));
    }
    let n = sr.pixels().len() as f64;
    Ok(sr
        .pixels()
        .iter()
        .zip(hr.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Patch-mean grid of a single image, remainder rows/columns cropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub gh: usize,
    pub gw: usize,
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.gw + x]
    }
}

pub fn patch_means(img: &Image, p: usize) -> PatchGrid {
    let (h, w) = img.dims();
    let (gh, gw) = (h / p, w / p);
    if h % p != 0 || w % p != 0 {
        warn!("image {h}x{w} not divisible by patch {p}; cropping remainder");
    }
    let mut values = vec![0.0; gh * gw];
    let inv = 1.0 / (p * p) as f64;
    for gy in 0..gh {
        for gx in 0..gw {
            let mut s = 0.0;
            for y in gy * p..(gy + 1) * p {
                s += img.row(y)[gx * p..(gx + 1) * p].iter().sum::<f64>();
            }
            values[gy * gw + gx] = s * inv;
        }
    }
    PatchGrid { gh, gw, values }
}

/// Right and down neighbor pairs of a `gh x gw` grid, as flat indices.
pub fn adjacent_pairs(gh: usize, gw: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            let i = y * gw + x;
            if x + 1 < gw {
                pairs.push((i, i + 1));
            }
            if y + 1 < gh {
                pairs.push((i, i + gw));
            }
        }
    }
    pairs
}

fn grids(sr: &Image, hr: &Image, p: usize) -> Result<Option<(PatchGrid, PatchGrid)>> {
    if sr.dims() != hr.dims() {
        return Err(validation(format!(
            "toc shape mismatch {:?} vs {:?}",
            sr.dims(),
            hr.dims()
        )));
    }
    if p == 0 {
        return Err(validation("patch size must be at least 1"));
    }
    let s = patch_means(sr, p);
    let h = patch_means(hr, p);
    if s.gh < 2 && s.gw < 2 {
        warn!("fewer than two patches along both axes; order loss is zero");
        return Ok(None);
    }
    Ok(Some((s, h)))
}

/// Pair products `(S_i - S_j)(H_i - H_j)` over all adjacent pairs.
pub fn pair_products(s: &PatchGrid, h: &PatchGrid) -> Vec<f64> {
    adjacent_pairs(s.gh, s.gw)
        .into_iter()
        .map(|(i, j)| (s.values[i] - s.values[j]) * (h.values[i] - h.values[j]))
        .collect()
}

/// Order loss between two patch-mean grids of equal shape.
pub fn toc_from_grids(s: &PatchGrid, h: &PatchGrid) -> Result<f64> {
    if (s.gh, s.gw) != (h.gh, h.gw) || s.values.len() != s.gh * s.gw || h.values.len() != h.gh * h.gw {
        return Err(validation("patch grids differ in shape"));
    }
    let prods = pair_products(s, h);
    if prods.is_empty() {
        return Ok(0.0);
    }
    Ok(prods.iter().map(|v| (-v).max(0.0)).sum::<f64>() / prods.len() as f64)
}

pub fn toc_loss(sr: &Image, hr: &Image, p: usize) -> Result<f64> {
    Ok(toc_loss_with_grad(sr, hr, p)?.0)
}

/// Loss together with its gradient with respect to every pixel of `sr`.
pub fn toc_loss_with_grad(sr: &Image, hr: &Image, p: usize) -> Result<(f64, Vec<f64>)> {
    let (h, w) = sr.dims();
    let mut grad = vec![0.0; h * w];
    let Some((s, t)) = grids(sr, hr, p)? else {
        return Ok((0.0, grad));
    };
    let pairs = adjacent_pairs(s.gh, s.gw);
    let inv_n = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad_s = vec![0.0; s.values.len()];
    for &(i, j) in &pairs {
        let dh = t.values[i] - t.values[j];
        let prod = (s.values[i] - s.values[j]) * dh;
        if -prod > 0.0 {
            loss += -prod;
            grad_s[i] -= dh * inv_n;
            grad_s[j] += dh * inv_n;
        }
    }
    let inv_area = 1.0 / (p * p) as f64;
    for gy in 0..s.gh {
        for gx in 0..s.gw {
            let g = grad_s[gy * s.gw + gx] * inv_area;
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    grad[y * w + x] = g;
                }
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Differentiable patch means of `(B, 1, H, W)` images, shape `(B, gh, gw)`.
pub fn patch_means_tensor(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != 1 {
        return Err(validation("patch means expect single-channel images"));
    }
    let (gh, gw) = (h / p, w / p);
    if h % p != 0 || w % p != 0 {
        warn!("image {h}x{w} not divisible by patch {p}; cropping remainder");
    }
    let x = x.narrow(2, 0, gh * p)?.narrow(3, 0, gw * p)?;
    Ok(x.reshape((b, gh, p, gw, p))?.mean(4)?.mean(2)?)
}

/// Batch-mean order loss on `(B, 1, H, W)` tensors; gradients flow into `sr`.
pub fn toc_loss_tensor(sr: &Tensor, hr: &Tensor, p: usize) -> Result<Tensor> {
    if sr.dims() != hr.dims() {
        return Err(validation("toc shape mismatch"));
    }
    let s = patch_means_tensor(sr, p)?;
    let h = patch_means_tensor(&hr.detach(), p)?;
    let (_, gh, gw) = s.dims3()?;
    let mut terms = Vec::new();
    if gw >= 2 {
        let ds = (s.narrow(2, 0, gw - 1)? - s.narrow(2, 1, gw - 1)?)?;
        let dh = (h.narrow(2, 0, gw - 1)? - h.narrow(2, 1, gw - 1)?)?;
        terms.push(ds.mul(&dh)?.flatten_from(1)?);
    }
    if gh >= 2 {
        let ds = (s.narrow(1, 0, gh - 1)? - s.narrow(1, 1, gh - 1)?)?;
        let dh = (h.narrow(1, 0, gh - 1)? - h.narrow(1, 1, gh - 1)?)?;
        terms.push(ds.mul(&dh)?.flatten_from(1)?);
    }
    if terms.is_empty() {
        warn!("fewer than two patches along both axes; order loss is zero");
        return Ok(Tensor::zeros((), sr.dtype(), sr.device())?);
    }
    let prods = Tensor::cat(&terms, 1)?;
    Ok(nn::relu(&prods.neg()?)?.mean_all()?)
}

/// Batch-mean MSE on equally shaped tensors.
pub fn mse_tensor(sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    if sr.dims() != hr.dims() {
        return Err(validation("mse shape mismatch"));
    }
    Ok((sr - hr)?.sqr()?.mean_all()?)
}

pub fn total_loss(ce: f64, mse: f64, toc: f64, w: &LossWeights) -> f64 {
    ce + w.lambda_mse * mse + w.lambda_toc * toc
}

pub fn total_loss_tensor(ce: &Tensor, mse: &Tensor, toc: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((ce + (mse * w.lambda_mse)?)? + (toc * w.lambda_toc)?)?)
}

/// Scalar value of a 0-d tensor as f64.
pub fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
