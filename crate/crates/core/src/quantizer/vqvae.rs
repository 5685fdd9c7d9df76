//! Small convolutional VQ-VAE: strided encoder to the latent grid, transposed
//! convolution decoder back to pixels.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::{encode_multiscale, CodeTable, Codebook, PyramidOps, QuantizerConfig, TokenMap};
use crate::error::{validation, Result};
use crate::imaging::{FeatureMap, Image};
use crate::nn::{self, Conv2d, ConvTranspose2d, GroupNorm, ParamStore};

fn norm_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

fn norm(store: &mut ParamStore, name: &str, c: usize) -> Result<GroupNorm> {
    GroupNorm::new(store, name, c, norm_groups(c))
}

#[derive(Debug, Clone)]
pub struct VqEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    head: Conv2d,
}

impl VqEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &QuantizerConfig) -> Result<Self> {
        let first = cfg.channels[0];
        let stem = Conv2d::new(store, rng, "vqvae.enc.stem", 1, first, 3, 1, 1, 1)?;
        let mut norms = vec![norm(store, "vqvae.enc.norm_stem", first)?];
        let mut downs = Vec::new();
        let mut prev = first;
        for i in 0..cfg.channels.len() {
            let next = cfg.channels.get(i + 1).copied().unwrap_or(cfg.channels[i]);
            norms.push(norm(store, &format!("vqvae.enc.norm{i}"), next)?);
            downs.push(Conv2d::new(
                store,
                rng,
                &format!("vqvae.enc.down{i}"),
                prev,
                next,
                4,
                2,
                1,
                1,
            )?);
            prev = next;
        }
        let head = Conv2d::new(store, rng, "vqvae.enc.head", prev, cfg.code_dim, 1, 1, 0, 1)?;
        Ok(Self {
            stem,
            downs,
            norms,
            head,
        })
    }

    /// `(B, 1, H, W)` -> `(B, d, H/s, W/s)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.norms[0].forward(&self.stem.forward(x)?)?.gelu()?;
        for (conv, n) in self.downs.iter().zip(&self.norms[1..]) {
            h = n.forward(&conv.forward(&h)?)?.gelu()?;
        }
        self.head.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct VqDecoder {
    stem: Conv2d,
    ups: Vec<ConvTranspose2d>,
    norms: Vec<GroupNorm>,
    head: Conv2d,
}

impl VqDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &QuantizerConfig) -> Result<Self> {
        let rev: Vec<usize> = cfg.channels.iter().rev().copied().collect();
        let stem = Conv2d::new(store, rng, "vqvae.dec.stem", cfg.code_dim, rev[0], 3, 1, 1, 1)?;
        let mut norms = vec![norm(store, "vqvae.dec.norm_stem", rev[0])?];
        let mut ups = Vec::new();
        let mut prev = rev[0];
        for i in 0..rev.len() {
            let next = rev.get(i + 1).copied().unwrap_or(rev[i]);
            norms.push(norm(store, &format!("vqvae.dec.norm{i}"), next)?);
            ups.push(ConvTranspose2d::new(
                store,
                rng,
                &format!("vqvae.dec.up{i}"),
                prev,
                next,
                4,
                2,
                1,
            )?);
            prev = next;
        }
        let head = Conv2d::new(store, rng, "vqvae.dec.head", prev, 1, 3, 1, 1, 1)?;
        Ok(Self {
            stem,
            ups,
            norms,
            head,
        })
    }

    /// `(B, d, h, w)` -> `(B, 1, h*s, w*s)` in `(0, 1)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.norms[0].forward(&self.stem.forward(z)?)?.gelu()?;
        for (up, n) in self.ups.iter().zip(&self.norms[1..]) {
            h = n.forward(&up.forward(&h)?)?.gelu()?;
        }
        nn::sigmoid(&self.head.forward(&h)?)
    }
}

/// Encoder, decoder and codebook together.
#[derive(Debug, Clone)]
pub struct VqVae {
    pub cfg: QuantizerConfig,
    pub encoder: VqEncoder,
    pub decoder: VqDecoder,
    pub codebook: Codebook,
    pub pyramid: PyramidOps,
}

/// Loss terms of one VQ-VAE step.
#[derive(Debug, Clone)]
pub struct VqLosses {
    pub total: Tensor,
    pub recon: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
}

impl VqVae {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: VqEncoder::new(store, rng, cfg)?,
            decoder: VqDecoder::new(store, rng, cfg)?,
            codebook: Codebook::new(store, rng, cfg)?,
            pyramid: PyramidOps::new(&cfg.scale_grid(), store.dtype())?,
        })
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        self.pyramid.final_hw()
    }

    pub fn check_hr_dims(&self, h: usize, w: usize) -> Result<()> {
        let s = self.cfg.downsample();
        let (lh, lw) = self.latent_hw();
        if h != lh * s || w != lw * s {
            return Err(validation(format!(
                "HR size {h}x{w} does not match latent grid {lh}x{lw} at reduction {s}"
            )));
        }
        Ok(())
    }

    /// Continuous encoder features for a batch of HR images.
    pub fn encode_features(&self, hr: &[&Image], dtype: candle_core::DType) -> Result<Vec<FeatureMap>> {
        for img in hr {
            self.check_hr_dims(img.height(), img.width())?;
        }
        let x = nn::images_to_tensor(hr, dtype)?;
        nn::tensor_to_features(&self.encoder.forward(&x)?.detach())
    }

    /// Static-table quantization of continuous features.
    pub fn quantize(&self, features: &[FeatureMap], table: &CodeTable) -> Result<Vec<TokenMap>> {
        features
            .iter()
            .map(|f| Ok(encode_multiscale(f, &table.z, &self.pyramid.scales)?.tokens))
            .collect()
    }

    /// One training forward pass with straight-through gradients.
    pub fn losses(&self, hr: &Tensor) -> Result<(VqLosses, Tensor)> {
        let f = self.encoder.forward(hr)?;
        let table = self.codebook.snapshot()?;
        let features = nn::tensor_to_features(&f.detach())?;
        let tokens = self.quantize(&features, &table)?;
        let b = tokens.len();
        let z = self
            .codebook
            .z
            .unsqueeze(0)?
            .broadcast_as((b, self.codebook.size(), self.codebook.dim()))?
            .contiguous()?;
        let f_hat = self.pyramid.embed_tokens(&tokens, &z)?;
        let codebook = (f.detach() - &f_hat)?.sqr()?.mean_all()?;
        let commitment = (&f - f_hat.detach())?.sqr()?.mean_all()?;
        let straight = (&f + (&f_hat - &f)?.detach())?;
        let recon_img = self.decoder.forward(&straight)?;
        let recon = (&recon_img - hr)?.sqr()?.mean_all()?;
        let total = ((&recon + (&codebook * self.cfg.codebook_weight)?)?
            + (&commitment * self.cfg.commitment_weight)?)?;
        Ok((
            VqLosses {
                total,
                recon,
                codebook,
                commitment,
            },
            recon_img,
        ))
    }

    /// Hard encode -> decode round trip through the static table.
    pub fn reconstruct(&self, hr: &[&Image]) -> Result<Vec<Image>> {
        let dtype = self.codebook.z.dtype();
        let features = self.encode_features(hr, dtype)?;
        let table = self.codebook.snapshot()?;
        let tokens = self.quantize(&features, &table)?;
        let b = tokens.len();
        let z = self
            .codebook
            .z
            .unsqueeze(0)?
            .broadcast_as((b, self.codebook.size(), self.codebook.dim()))?
            .contiguous()?;
        let acc = self.pyramid.embed_tokens(&tokens, &z)?;
        nn::tensor_to_images(&self.decoder.forward(&acc)?)
    }

    /// Decodes token maps against per-sample lookup tables `(B, K, d)`.
    pub fn decode_multiscale(&self, tokens: &[TokenMap], table: &Tensor) -> Result<Vec<Image>> {
        let acc = self.pyramid.embed_tokens(tokens, table)?;
        nn::tensor_to_images(&self.decoder.forward(&acc)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn small_cfg() -> QuantizerConfig {
        QuantizerConfig {
            codebook_size: 16,
            code_dim: 8,
            rank: 4,
            scales: vec![1, 2, 4, 8],
            channels: vec![4, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn decoder_output_shape_and_range() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(0);
        let vq = VqVae::new(&mut store, &mut rng, &small_cfg())?;
        let z = nn::test_randn(101, &[2, 8, 8, 8], 3.0);
        let out = vq.decoder.forward(&z)?;
        assert_eq!(out.dims(), &[2, 1, 64, 64]);
        let v: Vec<f64> = out.flatten_all()?.to_vec1()?;
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        Ok(())
    }

    #[test]
    fn encoder_reduces_by_eight() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(0);
        let vq = VqVae::new(&mut store, &mut rng, &small_cfg())?;
        let x = Tensor::zeros((1, 1, 64, 64), DType::F64, &Device::Cpu)?;
        assert_eq!(vq.encoder.forward(&x)?.dims(), &[1, 8, 8, 8]);
        assert!(vq.check_hr_dims(64, 64).is_ok());
        assert!(vq.check_hr_dims(32, 64).is_err());
        Ok(())
    }

    #[test]
    fn straight_through_passes_decoder_gradient() -> Result<()> {
        // The encoder output receives exactly the gradient that reaches the
        // quantized features, checked against a finite difference taken on
        // the continuous branch with tokens held fixed.
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(3);
        let vq = VqVae::new(&mut store, &mut rng, &small_cfg())?;
        let f = candle_core::Var::from_tensor(&nn::test_randn(99, &[1, 8, 8, 8], 1.0))?;
        let fixed = nn::test_randn(102, &[1, 8, 8, 8], 1.0);
        let target = nn::test_randn(103, &[1, 1, 64, 64], 0.1).affine(1.0, 0.5)?;
        let loss_at = |ft: &Tensor| -> Result<Tensor> {
            let st = (ft + (&fixed - ft)?.detach())?;
            Ok((vq.decoder.forward(&st)? - &target)?.sqr()?.sum_all()?)
        };
        let grads = loss_at(f.as_tensor())?.backward()?;
        let g_f: Vec<f64> = grads.get(&f).unwrap().flatten_all()?.to_vec1()?;
        let q = candle_core::Var::from_tensor(&fixed)?;
        let l = (vq.decoder.forward(q.as_tensor())? - &target)?.sqr()?.sum_all()?;
        let g_q: Vec<f64> = l.backward()?.get(&q).unwrap().flatten_all()?.to_vec1()?;
        for (a, b) in g_f.iter().zip(&g_q) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // Finite difference through the decoder at the quantized point.
        let base: Vec<f64> = fixed.flatten_all()?.to_vec1()?;
        let h = 1e-5;
        for idx in [0usize, 77, 300, 511] {
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let eval = |v: Vec<f64>| -> Result<f64> {
                let t = Tensor::from_vec(v, (1, 8, 8, 8), &Device::Cpu)?;
                nn::scalar(&(vq.decoder.forward(&t)? - &target)?.sqr()?.sum_all()?)
            };
            let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
            assert!((fd - g_f[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g_f[idx]);
        }
        Ok(())
    }

    #[test]
    fn codebook_receives_gradient_and_losses_are_finite() -> Result<()> {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = nn::seeded_rng(4);
        let vq = VqVae::new(&mut store, &mut rng, &small_cfg())?;
        let hr = Tensor::rand(0f64, 1.0, (2, 1, 64, 64), &Device::Cpu)?;
        let (losses, _) = vq.losses(&hr)?;
        let grads = losses.total.backward()?;
        let z = store.get("vqvae.codebook.z").unwrap();
        assert!(grads.get(z).is_some());
        assert!(nn::scalar(&losses.total)?.is_finite());
        Ok(())
    }
}
