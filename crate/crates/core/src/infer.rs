//! Tiled super-resolution of whole LR images with a trained checkpoint.

use std::path::Path;

use crate::backbone::Sampler;
use crate::error::{validation, Result};
use crate::guidance::aux_maps;
use crate::imaging::{save_image, BitDepth, Image};
use crate::model::Model;
use crate::nn;

fn tile_grid(model: &Model, lr: &Image) -> Result<(usize, usize)> {
    let c = model.cfg.data.lr_crop;
    let (h, w) = lr.dims();
    if h == 0 || w == 0 || h % c != 0 || w % c != 0 {
        return Err(validation(format!(
            "LR image {h}x{w} is not a multiple of the {c}x{c} tile size"
        )));
    }
    Ok((h / c, w / c))
}

fn tiles(model: &Model, lr: &Image) -> Result<Vec<Image>> {
    let c = model.cfg.data.lr_crop;
    let (th, tw) = tile_grid(model, lr)?;
    let mut out = Vec::with_capacity(th * tw);
    for ty in 0..th {
        for tx in 0..tw {
            out.push(lr.crop(ty * c, tx * c, c, c)?);
        }
    }
    Ok(out)
}

fn stitch(parts: &[Image], th: usize, tw: usize) -> Result<Image> {
    let (ph, pw) = parts[0].dims();
    let (h, w) = (th * ph, tw * pw);
    let mut data = vec![0.0; h * w];
    for (i, p) in parts.iter().enumerate() {
        let (ty, tx) = (i / tw, i % tw);
        for y in 0..ph {
            let row = (ty * ph + y) * w + tx * pw;
            data[row..row + pw].copy_from_slice(p.row(y));
        }
    }
    Image::new(h, w, data)
}

/// Super-resolves an LR image whose sides are multiples of the tile size.
/// Tile `i` is sampled with seed `derive_seed(seed, i)`.
pub fn infer_image(model: &Model, lr: &Image, sampler: Sampler, seed: u64) -> Result<Image> {
    let (th, tw) = tile_grid(model, lr)?;
    let mut out = Vec::new();
    for (i, tile) in tiles(model, lr)?.iter().enumerate() {
        out.extend(model.super_resolve(&[tile], sampler, nn::derive_seed(seed, i as u64))?);
    }
    stitch(&out, th, tw)
}

/// Intermediate guidance maps for inspection.
#[derive(Debug, Clone)]
pub struct GuidanceDump {
    pub heat: Image,
    pub edge: Image,
    /// Channel-mean gate at half LR resolution.
    pub gate: Image,
}

pub fn guidance_dump(model: &Model, lr: &Image) -> Result<GuidanceDump> {
    let (th, tw) = tile_grid(model, lr)?;
    let all = tiles(model, lr)?;
    let mut heat = Vec::new();
    let mut edge = Vec::new();
    let mut gate = Vec::new();
    for t in &all {
        let m = aux_maps(t, &model.cfg.guidance)?;
        heat.push(m.heat);
        edge.push(m.edge);
        let w = model.guidance.gate_weights(&[t], model.dtype())?;
        gate.extend(nn::tensor_to_images(&w)?);
    }
    Ok(GuidanceDump {
        heat: stitch(&heat, th, tw)?,
        edge: stitch(&edge, th, tw)?,
        gate: stitch(&gate, th, tw)?,
    })
}

/// Writes `<stem>_heat.png`, `<stem>_edge.png` and `<stem>_gate.png` next to `out`.
pub fn save_guidance_dump(dump: &GuidanceDump, out: &Path) -> Result<()> {
    let stem = out.with_extension("");
    let name = |suffix: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(format!("_{suffix}.png"));
        std::path::PathBuf::from(s)
    };
    save_image(&dump.heat, name("heat"), BitDepth::Sixteen)?;
    save_image(&dump.edge, name("edge"), BitDepth::Sixteen)?;
    save_image(&dump.gate, name("gate"), BitDepth::Sixteen)
}
