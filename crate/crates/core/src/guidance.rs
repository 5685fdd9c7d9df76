//! Thermal-structural guidance.
//!
//! Heat and edge maps are derived from the LR observation, encoded
//! separately, blended by a learned spatial gate and then injected into the
//! LR features through cross-attention. The heat-map construction, the edge
//! detector and the gate operators are stand-ins chosen here: a soft
//! top-quantile threshold with Gaussian smoothing, Sobel magnitude, a
//! depthwise 3x3 convolution (local) and a pooled two-layer perceptron
//! (global).

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::imaging::{convolve, gaussian_blur, Image};
use crate::nn::{self, Conv2d, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Quantile below which pixels contribute nothing to the heat map.
    pub heat_quantile: f64,
    pub heat_smooth_sigma: f64,
    pub encoder_width: usize,
    pub attn_dim: usize,
    pub heads: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            heat_quantile: 0.7,
            heat_smooth_sigma: 2.0,
            encoder_width: 32,
            attn_dim: 64,
            heads: 4,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.heat_quantile > 0.0 && self.heat_quantile < 1.0) {
            return Err(config("heat_quantile must lie in (0, 1)"));
        }
        if !(self.heat_smooth_sigma > 0.0) {
            return Err(config("heat_smooth_sigma must be positive"));
        }
        if self.encoder_width == 0 || self.attn_dim == 0 || self.heads == 0 {
            return Err(config("guidance widths must be positive"));
        }
        if self.attn_dim % self.heads != 0 {
            return Err(config(format!(
                "attn_dim {} is not divisible by heads {}",
                self.attn_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Smallest sample value whose empirical CDF reaches `tau`.
pub fn quantile_lower(values: &[f64], tau: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((tau * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Heat emphasis before smoothing: `clip((I - q) / (max - q), 0, 1)`.
///
/// When the quantile already equals the maximum, the pixels at the maximum are
/// the heat source and map to 1; a constant image has no heat source and maps
/// to all zeros.
pub fn heat_soft_threshold(img: &Image, tau: f64) -> Vec<f64> {
    let q = quantile_lower(img.pixels(), tau);
    let max = img.max();
    if max <= img.min() {
        return vec![0.0; img.pixels().len()];
    }
    if max <= q {
        return img
            .pixels()
            .iter()
            .map(|&v| if v >= max { 1.0 } else { 0.0 })
            .collect();
    }
    img.pixels()
        .iter()
        .map(|&v| ((v - q) / (max - q)).clamp(0.0, 1.0))
        .collect()
}

pub fn heat_map(img: &Image, cfg: &GuidanceConfig) -> Result<Image> {
    let soft = heat_soft_threshold(img, cfg.heat_quantile);
    let (h, w) = img.dims();
    let smoothed = gaussian_blur(&soft, h, w, cfg.heat_smooth_sigma);
    Image::from_clamped(h, w, smoothed)
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Unnormalized Sobel gradient magnitude with symmetric borders.
const FLAT_EDGE_EPS: f64 = 1e-9;

pub fn sobel_magnitude(img: &Image) -> Vec<f64> {
    let (h, w) = img.dims();
    let gx = convolve(img.pixels(), h, w, &SOBEL_X, 3, 3);
    let gy = convolve(img.pixels(), h, w, &SOBEL_Y, 3, 3);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

/// Sobel magnitude scaled so the strongest response is 1 (all zero when flat).
pub fn edge_map(img: &Image) -> Result<Image> {
    let mag = sobel_magnitude(img);
    let max = mag.iter().copied().fold(0.0, f64::max);
    let (h, w) = img.dims();
    // Rounding residue on flat images is not an edge.
    if max <= FLAT_EDGE_EPS {
        return Image::constant(h, w, 0.0);
    }
    Image::from_clamped(h, w, mag.into_iter().map(|v| v / max).collect())
}

/// Anything that turns a `(B, 1, H, W)` map into `(B, C, H/2, W/2)` features.
pub trait FeatureEncoder {
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    fn out_channels(&self) -> usize;
}

/// Two-stage convolutional encoder: strided 3x3 (halves resolution) then a 3x3 refinement.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub stem: Conv2d,
    pub refine: Conv2d,
    width: usize,
}

impl ConvEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
    ) -> Result<Self> {
        Ok(Self {
            stem: Conv2d::new(store, rng, &format!("{name}.stem"), 1, width, 3, 2, 1, 1)?,
            refine: Conv2d::new(store, rng, &format!("{name}.refine"), width, width, 3, 1, 1, 1)?,
            width,
        })
    }
}

impl FeatureEncoder for ConvEncoder {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.stem.forward(x)?.gelu()?;
        self.refine.forward(&h)
    }

    fn out_channels(&self) -> usize {
        self.width
    }
}

/// Gate operators and attention projections.
#[derive(Debug, Clone)]
pub struct GateParams {
    /// Depthwise 3x3 convolution.
    pub local: Conv2d,
    pub global_in: Linear,
    pub global_out: Linear,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub heads: usize,
}

impl GateParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        attn_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if attn_dim % heads != 0 {
            return Err(config(format!(
                "attn_dim {attn_dim} is not divisible by heads {heads}"
            )));
        }
        let hidden = (channels / 4).max(1);
        Ok(Self {
            local: Conv2d::new(
                store,
                rng,
                &format!("{name}.local"),
                channels,
                channels,
                3,
                1,
                1,
                channels,
            )?,
            global_in: Linear::new(store, rng, &format!("{name}.global_in"), channels, hidden, true)?,
            global_out: Linear::new(store, rng, &format!("{name}.global_out"), hidden, channels, true)?,
            w_q: Linear::new(store, rng, &format!("{name}.w_q"), channels, attn_dim, false)?,
            w_k: Linear::new(store, rng, &format!("{name}.w_k"), channels, attn_dim, false)?,
            w_v: Linear::new(store, rng, &format!("{name}.w_v"), channels, attn_dim, false)?,
            heads,
        })
    }

    /// `W = sigmoid(L(A) + G(A))` for `A` of shape `(B, C, H, W)`.
    pub fn gate(&self, a: &Tensor) -> Result<Tensor> {
        let local = self.local.forward(a)?;
        let pooled = a.mean(D::Minus1)?.mean(D::Minus1)?;
        let global = self
            .global_out
            .forward(&self.global_in.forward(&pooled)?.relu()?)?
            .unsqueeze(D::Minus1)?
            .unsqueeze(D::Minus1)?;
        nn::sigmoid(&local.broadcast_add(&global)?)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(validation(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Blends heat and edge features with a given gate: `F_heat * W + F_edge * (1 - W)`.
pub fn blend(f_heat: &Tensor, f_edge: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_same_shape(f_heat, f_edge, "blend")?;
    let one_minus = w.affine(-1.0, 1.0)?;
    Ok((f_heat.broadcast_mul(w)? + f_edge.broadcast_mul(&one_minus)?)?)
}

/// Gated fusion; returns `(F_fused, W)`.
pub fn fuse(f_heat: &Tensor, f_edge: &Tensor, gate: &GateParams) -> Result<(Tensor, Tensor)> {
    check_same_shape(f_heat, f_edge, "fuse")?;
    let a = (f_heat + f_edge)?;
    let w = gate.gate(&a)?;
    Ok((blend(f_heat, f_edge, &w)?, w))
}

/// `(B, C, H, W)` -> `(B, H*W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Scaled dot-product attention over `(B, heads, N, dh)` tensors.
/// `mask` is additive and broadcast over batch and heads. Returns `(output, weights)`.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let dh = q.dim(D::Minus1)?;
    let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    let logits = match mask {
        Some(m) => logits.broadcast_add(m)?,
        None => logits,
    };
    let weights = nn::softmax_last(&logits)?;
    Ok((weights.matmul(v)?, weights))
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    Ok(x
        .reshape((b, n, heads, d / heads))?
        .transpose(1, 2)?
        .contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * dh))?)
}

/// Cross-attention with queries from `f_lr` and keys/values from `f_fused`.
/// Returns `F_TSG` as `(B, attn_dim, H_lr, W_lr)` together with the attention
/// weights `(B, heads, N_lr, N_fused)`.
pub fn cross_attend_with_weights(
    f_lr: &Tensor,
    f_fused: &Tensor,
    gate: &GateParams,
) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = f_lr.dims4()?;
    let (bf, _, _, _) = f_fused.dims4()?;
    if b != bf {
        return Err(validation("cross_attend: batch mismatch"));
    }
    let q = gate.w_q.forward(&to_tokens(f_lr)?)?;
    let kv = to_tokens(f_fused)?;
    let k = gate.w_k.forward(&kv)?;
    let v = gate.w_v.forward(&kv)?;
    let d = q.dim(D::Minus1)?;
    if d % gate.heads != 0 {
        return Err(config("attn_dim is not divisible by heads"));
    }
    let (out, weights) = attention(
        &split_heads(&q, gate.heads)?,
        &split_heads(&k, gate.heads)?,
        &split_heads(&v, gate.heads)?,
        None,
    )?;
    let out = merge_heads(&out)?.transpose(1, 2)?.reshape((b, d, h, w))?;
    Ok((out, weights))
}

pub fn cross_attend(f_lr: &Tensor, f_fused: &Tensor, gate: &GateParams) -> Result<Tensor> {
    Ok(cross_attend_with_weights(f_lr, f_fused, gate)?.0)
}

/// Per-image auxiliary maps fed to the guidance encoders.
#[derive(Debug, Clone)]
pub struct AuxMaps {
    pub heat: Image,
    pub edge: Image,
}

pub fn aux_maps(lr: &Image, cfg: &GuidanceConfig) -> Result<AuxMaps> {
    Ok(AuxMaps {
        heat: heat_map(lr, cfg)?,
        edge: edge_map(lr)?,
    })
}

/// The full guidance branch, plus the LR-only bypass used when guidance is ablated.
#[derive(Debug, Clone)]
pub struct Guidance {
    pub cfg: GuidanceConfig,
    pub heat_enc: ConvEncoder,
    pub edge_enc: ConvEncoder,
    pub lr_enc: ConvEncoder,
    pub gate: GateParams,
    pub bypass: Linear,
}

impl Guidance {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &GuidanceConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.encoder_width;
        Ok(Self {
            cfg: cfg.clone(),
            heat_enc: ConvEncoder::new(store, rng, "guidance.heat_enc", c)?,
            edge_enc: ConvEncoder::new(store, rng, "guidance.edge_enc", c)?,
            lr_enc: ConvEncoder::new(store, rng, "guidance.lr_enc", c)?,
            gate: GateParams::new(store, rng, "guidance.gate", c, cfg.attn_dim, cfg.heads)?,
            bypass: Linear::new(store, rng, "guidance.bypass", c, cfg.attn_dim, true)?,
        })
    }

    /// Computes `F_TSG` of shape `(B, attn_dim, H/2, W/2)` for a batch of LR images.
    /// With `use_tsg = false` the heat/edge path is skipped and LR features are
    /// projected straight to the attention width.
    pub fn forward(&self, lr: &[&Image], use_tsg: bool, dtype: candle_core::DType) -> Result<Tensor> {
        let lr_t = nn::images_to_tensor(lr, dtype)?;
        let f_lr = self.lr_enc.encode(&lr_t)?;
        if !use_tsg {
            let (b, _, h, w) = f_lr.dims4()?;
            let d = self.cfg.attn_dim;
            return Ok(self
                .bypass
                .forward(&to_tokens(&f_lr)?)?
                .transpose(1, 2)?
                .reshape((b, d, h, w))?);
        }
        let maps: Vec<AuxMaps> = lr
            .iter()
            .map(|img| aux_maps(img, &self.cfg))
            .collect::<Result<_>>()?;
        let heat: Vec<&Image> = maps.iter().map(|m| &m.heat).collect();
        let edge: Vec<&Image> = maps.iter().map(|m| &m.edge).collect();
        let f_heat = self.heat_enc.encode(&nn::images_to_tensor(&heat, dtype)?)?;
        let f_edge = self.edge_enc.encode(&nn::images_to_tensor(&edge, dtype)?)?;
        let (fused, _) = fuse(&f_heat, &f_edge, &self.gate)?;
        cross_attend(&f_lr, &fused, &self.gate)
    }

    /// Channel-averaged fusion gate `W`, shape `(B, 1, H/2, W/2)`.
    pub fn gate_weights(&self, lr: &[&Image], dtype: candle_core::DType) -> Result<Tensor> {
        let maps: Vec<AuxMaps> = lr
            .iter()
            .map(|img| aux_maps(img, &self.cfg))
            .collect::<Result<_>>()?;
        let heat: Vec<&Image> = maps.iter().map(|m| &m.heat).collect();
        let edge: Vec<&Image> = maps.iter().map(|m| &m.edge).collect();
        let f_heat = self.heat_enc.encode(&nn::images_to_tensor(&heat, dtype)?)?;
        let f_edge = self.edge_enc.encode(&nn::images_to_tensor(&edge, dtype)?)?;
        let (_, w) = fuse(&f_heat, &f_edge, &self.gate)?;
        Ok(w.mean_keepdim(1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::gaussian_taps;
    use candle_core::{DType, Device};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn constant_image_has_no_heat_and_no_edges() {
        let img = Image::constant(16, 16, 0.4).unwrap();
        let cfg = GuidanceConfig::default();
        assert!(heat_map(&img, &cfg).unwrap().pixels().iter().all(|&v| v == 0.0));
        assert!(edge_map(&img).unwrap().pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantile_uses_lower_rule() {
        let mut vals = vec![0.0; 8];
        vals.extend(vec![1.0; 8]);
        assert_eq!(quantile_lower(&vals, 0.7), 1.0);
        assert_eq!(quantile_lower(&vals, 0.5), 0.0);
        assert_eq!(quantile_lower(&[3.0, 1.0, 2.0, 4.0], 0.75), 3.0);
    }

    #[test]
    fn binary_image_thresholds_to_itself() {
        let img = Image::from_fn(16, 16, |_, x| if x < 8 { 0.0 } else { 1.0 }).unwrap();
        let soft = heat_soft_threshold(&img, 0.7);
        assert_eq!(soft, img.pixels());
    }

    #[test]
    fn hot_pixel_peak_is_kernel_center() {
        let img = Image::from_fn(32, 32, |y, x| if (y, x) == (16, 16) { 1.0 } else { 0.0 }).unwrap();
        let heat = heat_map(&img, &GuidanceConfig::default()).unwrap();
        // Direct 2-D convolution oracle: the peak of a blurred unit impulse is
        // the product of the 1-D center taps.
        let taps = gaussian_taps(2.0);
        let center = taps[taps.len() / 2];
        assert!((heat.get(16, 16) - center * center).abs() < 1e-15);
        assert_eq!(heat.max(), heat.get(16, 16));
    }

    #[test]
    fn step_edge_peaks_at_the_step() {
        let img = Image::from_fn(16, 16, |_, x| if x < 8 { 0.0 } else { 1.0 }).unwrap();
        let e = edge_map(&img).unwrap();
        for y in 0..16 {
            assert_eq!(e.get(y, 7), 1.0);
            assert_eq!(e.get(y, 8), 1.0);
            assert_eq!(e.get(y, 3), 0.0);
        }
    }

    #[test]
    fn impulse_sobel_ratios() {
        let img = Image::from_fn(16, 16, |y, x| if (y, x) == (8, 8) { 1.0 } else { 0.0 }).unwrap();
        let mag = sobel_magnitude(&img);
        let at = |y: usize, x: usize| mag[y * 16 + x];
        // Hand-evaluated stencils: side neighbours see (2, 0), diagonals see (1, 1).
        assert_eq!(at(8, 7), 2.0);
        assert_eq!(at(7, 8), 2.0);
        assert!((at(7, 7) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(at(8, 8), 0.0);
        let nonzero = mag.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero, 8);
        let e = edge_map(&img).unwrap();
        assert!((e.get(7, 7) - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn maps_translate_with_content() {
        let base = |dy: usize, dx: usize| {
            Image::from_fn(40, 40, move |y, x| {
                let (cy, cx) = (14.0 + dy as f64, 15.0 + dx as f64);
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = (-r2 / 8.0).exp();
                let square = if (12 + dy..18 + dy).contains(&y) && (20 + dx..25 + dx).contains(&x) {
                    0.5
                } else {
                    0.0
                };
                (0.1 + 0.8 * blob + square).min(1.0)
            })
            .unwrap()
        };
        let a = base(0, 0);
        let b = base(3, 2);
        let cfg = GuidanceConfig::default();
        let (ha, hb) = (heat_map(&a, &cfg).unwrap(), heat_map(&b, &cfg).unwrap());
        let (ea, eb) = (edge_map(&a).unwrap(), edge_map(&b).unwrap());
        for y in 4..30 {
            for x in 4..30 {
                assert!((ha.get(y, x) - hb.get(y + 3, x + 2)).abs() < 1e-12);
                assert!((ea.get(y, x) - eb.get(y + 3, x + 2)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_blend_arithmetic() -> Result<()> {
        let h = Tensor::new(&[2.0f64], &dev())?;
        let e = Tensor::new(&[4.0f64], &dev())?;
        let w = Tensor::new(&[0.25f64], &dev())?;
        assert_eq!(blend(&h, &e, &w)?.to_vec1::<f64>()?, vec![3.5]);
        let ones = Tensor::ones(1, DType::F64, &dev())?;
        assert_eq!(blend(&h, &e, &ones)?.to_vec1::<f64>()?, vec![2.0]);
        let zeros = Tensor::zeros(1, DType::F64, &dev())?;
        assert_eq!(blend(&h, &e, &zeros)?.to_vec1::<f64>()?, vec![4.0]);
        Ok(())
    }

    #[test]
    fn fuse_rejects_shape_mismatch() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(0);
        let gate = GateParams::new(&mut store, &mut rng, "g", 4, 8, 1)?;
        let a = Tensor::zeros((1, 4, 4, 4), DType::F64, &dev())?;
        let b = Tensor::zeros((1, 4, 4, 2), DType::F64, &dev())?;
        assert!(fuse(&a, &b, &gate).is_err());
        Ok(())
    }

    #[test]
    fn heads_must_divide_attn_dim() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(0);
        assert!(GateParams::new(&mut store, &mut rng, "g", 4, 10, 3).is_err());
        let cfg = GuidanceConfig {
            attn_dim: 10,
            heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_key_broadcasts_value() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(1);
        let gate = GateParams::new(&mut store, &mut rng, "g", 4, 8, 2)?;
        let f_lr = crate::nn::test_randn(201, &[1, 4, 3, 3], 1.0);
        let f_fused = crate::nn::test_randn(202, &[1, 4, 1, 1], 1.0);
        let out = cross_attend(&f_lr, &f_fused, &gate)?;
        let v = gate.w_v.forward(&to_tokens(&f_fused)?)?.flatten_all()?.to_vec1::<f64>()?;
        let out = to_tokens(&out)?.to_vec3::<f64>()?;
        for row in &out[0] {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        Ok(())
    }

    #[test]
    fn identical_keys_split_evenly() -> Result<()> {
        let q = crate::nn::test_randn(203, &[1, 1, 5, 3], 1.0);
        let key = crate::nn::test_randn(204, &[1, 1, 1, 3], 1.0);
        let k = Tensor::cat(&[&key, &key], 2)?;
        let v = crate::nn::test_randn(205, &[1, 1, 2, 3], 1.0);
        let (_, w) = attention(&q, &k, &v, None)?;
        let flat = w.flatten_all()?.to_vec1::<f64>()?;
        assert!(flat.iter().all(|x| (x - 0.5).abs() < 1e-12));
        Ok(())
    }

    #[test]
    fn hand_softmax_toy() -> Result<()> {
        let q = Tensor::new(&[[[[1.0f64]]]], &dev())?;
        let k = Tensor::new(&[[[[0.0f64], [3f64.ln()]]]], &dev())?;
        let v = Tensor::new(&[[[[0.0f64], [1.0]]]], &dev())?;
        let (out, w) = attention(&q, &k, &v, None)?;
        let w = w.flatten_all()?.to_vec1::<f64>()?;
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        assert!((out.flatten_all()?.to_vec1::<f64>()?[0] - 0.75).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn encoder_shapes_and_zero_final_layer() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(2);
        let enc = ConvEncoder::new(&mut store, &mut rng, "enc", 32)?;
        let x = Tensor::zeros((1, 1, 16, 16), DType::F64, &dev())?;
        store.zero_prefixes(&["enc.refine"])?;
        let y = enc.encode(&x)?;
        assert_eq!(y.dims(), &[1, 32, 8, 8]);
        assert!(y.flatten_all()?.to_vec1::<f64>()?.iter().all(|&v| v == 0.0));
        Ok(())
    }

    #[test]
    fn guidance_is_deterministic() -> Result<()> {
        let lr = Image::from_fn(16, 16, |y, x| ((y * 3 + x * 5) % 16) as f64 / 15.0).unwrap();
        let run = || -> Result<Vec<f64>> {
            let mut store = ParamStore::new(DType::F64);
            let mut rng = nn::seeded_rng(9);
            let g = Guidance::new(&mut store, &mut rng, &GuidanceConfig::default())?;
            Ok(g.forward(&[&lr], true, DType::F64)?.flatten_all()?.to_vec1()?)
        };
        let a = run()?;
        let b = run()?;
        assert_eq!(a.len(), 64 * 8 * 8);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        Ok(())
    }
}
