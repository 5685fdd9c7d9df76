//! Synthetic acquisition pipeline: optical blur, 4x downsampling and sensor
//! noise applied to high-resolution frames, plus a procedural thermal scene
//! generator so the whole system can run without external data.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::imaging::{convolve, reflect_index, resize, Image, ResizeMode};
use crate::nn::{derive_seed, seeded_rng};

/// Supersampling factor per axis used when rasterizing kernels.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Defocus,
    Motion,
}

impl DegradationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Defocus => "defocus",
            DegradationKind::Motion => "motion",
        }
    }
}

/// Square, odd-sized, normalized point-spread function.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn transpose(&self) -> Kernel {
        let n = self.size;
        Kernel {
            size: n,
            weights: (0..n * n).map(|i| self.get(i % n, i / n)).collect(),
        }
    }

    pub fn center(&self) -> f64 {
        self.get(self.size / 2, self.size / 2)
    }
}

/// Rasterizes `inside(dx, dy)` over a `(2 half + 1)^2` grid with supersampling,
/// drops all-zero outer rings and normalizes.
fn rasterize(half: usize, inside: impl Fn(f64, f64) -> bool) -> Kernel {
    let n = 2 * half + 1;
    let mut weights = vec![0.0; n * n];
    let step = 1.0 / SUPERSAMPLE as f64;
    for ky in 0..n {
        for kx in 0..n {
            let (cy, cx) = (ky as f64 - half as f64, kx as f64 - half as f64);
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let dy = cy - 0.5 + (sy as f64 + 0.5) * step;
                    let dx = cx - 0.5 + (sx as f64 + 0.5) * step;
                    if inside(dx, dy) {
                        hits += 1;
                    }
                }
            }
            weights[ky * n + kx] = hits as f64;
        }
    }
    let mut k = Kernel { size: n, weights };
    while k.size > 1 && ring_is_zero(&k) {
        k = shrink(&k);
    }
    let total = k.sum();
    if total == 0.0 {
        return Kernel {
            size: 1,
            weights: vec![1.0],
        };
    }
    k.weights.iter_mut().for_each(|w| *w /= total);
    k
}

fn ring_is_zero(k: &Kernel) -> bool {
    let n = k.size;
    (0..n).all(|i| {
        k.get(0, i) == 0.0 && k.get(n - 1, i) == 0.0 && k.get(i, 0) == 0.0 && k.get(i, n - 1) == 0.0
    })
}

fn shrink(k: &Kernel) -> Kernel {
    let n = k.size - 2;
    Kernel {
        size: n,
        weights: (0..n * n).map(|i| k.get(i / n + 1, i % n + 1)).collect(),
    }
}

/// Anti-aliased disk PSF of the given radius in pixels.
pub fn defocus_kernel(radius: f64) -> Kernel {
    let r = radius.max(0.0);
    let half = r.ceil() as usize;
    rasterize(half, |dx, dy| dx * dx + dy * dy <= r * r)
}

/// Anti-aliased line PSF of unit width, centered, with direction `angle`
/// (radians, 0 is horizontal, pi/2 is vertical).
pub fn motion_kernel(length: f64, angle: f64) -> Kernel {
    let l = length.max(1.0);
    let (s, c) = angle.sin_cos();
    let extent = ((l / 2.0).powi(2) + 0.25).sqrt();
    let half = (extent + 0.5).ceil() as usize;
    rasterize(half, |dx, dy| {
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= l / 2.0 && across.abs() <= 0.5
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub defocus_radius: f64,
    pub motion_length: f64,
    pub motion_angle: f64,
    pub noise_sigma: f64,
    pub scale: usize,
    pub seed: u64,
    /// Shift the HR frame by up to one LR pixel before blurring.
    pub jitter: bool,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            kind: DegradationKind::Defocus,
            defocus_radius: 1.5,
            motion_length: 5.0,
            motion_angle: 0.0,
            noise_sigma: 0.01,
            scale: 4,
            seed: 0,
            jitter: false,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=6.0).contains(&self.defocus_radius) {
            return Err(validation(format!(
                "defocus radius {} outside [0.5, 6]",
                self.defocus_radius
            )));
        }
        if !(3.0..=15.0).contains(&self.motion_length) {
            return Err(validation(format!(
                "motion length {} outside [3, 15]",
                self.motion_length
            )));
        }
        if !(0.0..PI).contains(&self.motion_angle) {
            return Err(validation(format!(
                "motion angle {} outside [0, pi)",
                self.motion_angle
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(validation("noise sigma must be non-negative"));
        }
        if self.scale < 2 {
            return Err(validation("scale must be at least 2"));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Kernel {
        match self.kind {
            DegradationKind::Defocus => defocus_kernel(self.defocus_radius),
            DegradationKind::Motion => motion_kernel(self.motion_length, self.motion_angle),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPair {
    pub lr: Image,
    pub hr: Image,
    pub degradation: DegradationKind,
}

fn shift(img: &Image, dy: isize, dx: isize) -> Result<Image> {
    let (h, w) = img.dims();
    Image::from_fn(h, w, |y, x| {
        img.get(
            reflect_index(y as isize + dy, h),
            reflect_index(x as isize + dx, w),
        )
    })
}

/// Blurs, optionally jitters, downsamples by `spec.scale` and adds noise.
/// The returned HR is the unshifted input.
pub fn degrade_pair(hr: &Image, spec: &DegradationSpec) -> Result<DegradedPair> {
    spec.validate()?;
    let (h, w) = hr.dims();
    if h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(validation(format!(
            "HR {h}x{w} is not divisible by scale {}",
            spec.scale
        )));
    }
    let mut rng = seeded_rng(spec.seed);
    let source = if spec.jitter {
        let s = spec.scale as i64;
        let dy = rng.random_range(-s + 1..s);
        let dx = rng.random_range(-s + 1..s);
        shift(hr, dy as isize, dx as isize)?
    } else {
        hr.clone()
    };
    let k = spec.kernel();
    let blurred = convolve(source.pixels(), h, w, &k.weights, k.size, k.size);
    let blurred = Image::from_clamped(h, w, blurred)?;
    let small = resize(&blurred, h / spec.scale, w / spec.scale, ResizeMode::Bicubic)?;
    let lr = if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| validation(e.to_string()))?;
        let data = small.pixels().iter().map(|v| v + noise.sample(&mut rng)).collect();
        Image::from_clamped(small.height(), small.width(), data)?
    } else {
        small
    };
    Ok(DegradedPair {
        lr,
        hr: hr.clone(),
        degradation: spec.kind,
    })
}

/// Procedural scene together with the mask of pixels covered by polygons.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub polygon_mask: Vec<bool>,
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[(i + n - 1) % n];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

fn draw_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Scene {
    let m = h.min(w) as f64;
    let base = rng.random_range(0.0..0.08);
    let slope = rng.random_range(0.0..0.15);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (gs, gc) = theta.sin_cos();
    let mut data: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            base + slope * (0.5 + 0.5 * ((x - 0.5) * gc + (y - 0.5) * gs))
        })
        .collect();
    let mut mask = vec![false; h * w];
    let mut centers = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let cy = rng.random_range(0.2..0.8) * h as f64;
        let cx = rng.random_range(0.2..0.8) * w as f64;
        let radius = rng.random_range(0.12..0.3) * m;
        let sides = rng.random_range(3..=6);
        let phase = rng.random_range(0.0..2.0 * PI);
        let poly: Vec<(f64, f64)> = (0..sides)
            .map(|i| {
                let a = phase + 2.0 * PI * i as f64 / sides as f64;
                let r = radius * rng.random_range(0.7..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let temp = rng.random_range(0.45..0.7);
        for y in 0..h {
            for x in 0..w {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                    data[y * w + x] = temp;
                    mask[y * w + x] = true;
                }
            }
        }
        centers.push((cy, cx, radius));
    }
    for b in 0..rng.random_range(1..=4) {
        // Heat sources sit off the structural centers so peaks and edges disagree.
        let (cy, cx) = if b < centers.len() {
            let (py, px, r) = centers[b];
            let a = rng.random_range(0.0..2.0 * PI);
            let d = r * rng.random_range(0.4..1.0);
            (py + d * a.sin(), px + d * a.cos())
        } else {
            (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64))
        };
        let sigma = rng.random_range(0.06..0.14) * m;
        let amp = rng.random_range(0.3..0.6);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                data[y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let image = Image::from_clamped(h, w, data).expect("scene dimensions are positive");
    Scene {
        image,
        polygon_mask: mask,
    }
}

/// Deterministic synthetic thermal scene with at least one pixel above 0.9
/// and one below 0.1 (draws are repeated until both hold).
pub fn synth_scene_with_mask(seed: u64, h: usize, w: usize) -> Result<Scene> {
    if h < 32 || w < 32 {
        return Err(validation(format!("scene {h}x{w} is smaller than 32x32")));
    }
    let mut rng = seeded_rng(seed);
    loop {
        let scene = draw_scene(&mut rng, h, w);
        if scene.image.max() > 0.9 && scene.image.min() < 0.1 {
            return Ok(scene);
        }
    }
}

pub fn synth_scene(seed: u64, h: usize, w: usize) -> Result<Image> {
    Ok(synth_scene_with_mask(seed, h, w)?.image)
}

/// Settings for a generated corpus of paired samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub hr_size: usize,
    pub scale: usize,
    pub defocus_fraction: f64,
    pub noise_sigma: f64,
    pub jitter: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            hr_size: 64,
            scale: 4,
            defocus_fraction: 1305.0 / 1457.0,
            noise_sigma: 0.01,
            jitter: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.defocus_fraction) {
            return Err(config("defocus_fraction must lie in [0, 1]"));
        }
        if self.hr_size < 32 || self.scale < 2 || self.hr_size % self.scale != 0 {
            return Err(config(
                "hr_size must be at least 32 and divisible by scale (at least 2)",
            ));
        }
        Ok(())
    }
}

/// Degradation drawn for sample `index` of a corpus.
pub fn sample_spec(cfg: &SynthConfig, index: usize) -> DegradationSpec {
    let seed = derive_seed(cfg.seed, index as u64);
    let mut rng = seeded_rng(derive_seed(seed, 1));
    let kind = if rng.random::<f64>() < cfg.defocus_fraction {
        DegradationKind::Defocus
    } else {
        DegradationKind::Motion
    };
    DegradationSpec {
        kind,
        defocus_radius: rng.random_range(0.5..=6.0),
        motion_length: rng.random_range(3.0..=15.0),
        motion_angle: rng.random_range(0.0..PI),
        noise_sigma: cfg.noise_sigma,
        scale: cfg.scale,
        seed: derive_seed(seed, 2),
        jitter: cfg.jitter,
    }
}

/// Sample `index` of the corpus described by `cfg`. Each sample depends only
/// on `(cfg, index)`, so any subset can be generated independently.
pub fn corpus_sample(cfg: &SynthConfig, index: usize) -> Result<DegradedPair> {
    let seed = derive_seed(cfg.seed, index as u64);
    let hr = synth_scene(derive_seed(seed, 0), cfg.hr_size, cfg.hr_size)?;
    degrade_pair(&hr, &sample_spec(cfg, index))
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<DegradedPair>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| corpus_sample(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::edge_map;
    use proptest::prelude::*;

    #[test]
    fn kernels_sum_to_one() {
        let mut rng = seeded_rng(1);
        for _ in 0..100 {
            let d = defocus_kernel(rng.random_range(0.5..=6.0));
            assert!((d.sum() - 1.0).abs() < 1e-9);
            assert!(d.weights.iter().all(|w| *w >= 0.0));
            let m = motion_kernel(rng.random_range(1.0..15.0), rng.random_range(0.0..PI));
            assert!((m.sum() - 1.0).abs() < 1e-9);
            assert!(m.weights.iter().all(|w| *w >= 0.0));
        }
    }

    /// Fraction of the pixel square at offset `(cy, cx)` covered by a disk,
    /// by dense midpoint sampling.
    fn disk_coverage(r: f64, cy: f64, cx: f64) -> f64 {
        let n = 400;
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                let y = cy - 0.5 + (i as f64 + 0.5) / n as f64;
                let x = cx - 0.5 + (j as f64 + 0.5) / n as f64;
                if x * x + y * y <= r * r {
                    hits += 1;
                }
            }
        }
        hits as f64 / (n * n) as f64
    }

    #[test]
    fn small_disk_is_near_delta() {
        let k = defocus_kernel(0.5);
        assert!(k.center() > 0.9);
        let c = disk_coverage(0.5, 0.0, 0.0);
        let side = disk_coverage(0.5, 0.0, 1.0);
        assert!(c / (c + 4.0 * side) > 0.9);
    }

    #[test]
    fn disk_tracks_coverage_integral() {
        let r = 2.3;
        let k = defocus_kernel(r);
        let half = (k.size / 2) as isize;
        let mut oracle = Vec::new();
        for y in -half..=half {
            for x in -half..=half {
                oracle.push(disk_coverage(r, y as f64, x as f64));
            }
        }
        let total: f64 = oracle.iter().sum();
        for (a, b) in k.weights.iter().zip(&oracle) {
            assert!((a - b / total).abs() < 0.02);
        }
    }

    #[test]
    fn disk_has_fourfold_symmetry() {
        for r in [0.5, 1.3, 2.0, 4.7] {
            let k = defocus_kernel(r);
            let n = k.size;
            for y in 0..n {
                for x in 0..n {
                    let v = k.get(y, x);
                    assert_eq!(v, k.get(x, n - 1 - y));
                    assert_eq!(v, k.get(n - 1 - y, n - 1 - x));
                }
            }
        }
    }

    #[test]
    fn horizontal_motion_is_five_taps() {
        let k = motion_kernel(5.0, 0.0);
        assert_eq!(k.size, 5);
        for y in 0..5 {
            for x in 0..5 {
                let e = if y == 2 { 0.2 } else { 0.0 };
                assert!((k.get(y, x) - e).abs() < 1e-15);
            }
        }
        let close = |a: &Kernel, b: &Kernel| {
            a.size == b.size && a.weights.iter().zip(&b.weights).all(|(x, y)| (x - y).abs() < 1e-12)
        };
        assert!(close(&motion_kernel(5.0, PI / 2.0), &k.transpose()));
        let diag = motion_kernel(7.0, 0.6);
        assert!(close(&diag.transpose(), &motion_kernel(7.0, PI / 2.0 - 0.6)));
    }

    #[test]
    fn constant_hr_stays_constant() -> Result<()> {
        let hr = Image::constant(64, 64, 0.37)?;
        let spec = DegradationSpec {
            defocus_radius: 0.5,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let pair = degrade_pair(&hr, &spec)?;
        assert_eq!(pair.lr.dims(), (16, 16));
        assert!(pair.lr.pixels().iter().all(|v| (v - 0.37).abs() < 1e-12));
        Ok(())
    }

    #[test]
    fn lr_is_quarter_size_and_deterministic() -> Result<()> {
        let hr = synth_scene(3, 64, 96)?;
        let spec = DegradationSpec {
            kind: DegradationKind::Motion,
            motion_length: 9.0,
            motion_angle: 1.0,
            seed: 11,
            jitter: true,
            ..Default::default()
        };
        let a = degrade_pair(&hr, &spec)?;
        let b = degrade_pair(&hr, &spec)?;
        assert_eq!(a.lr.dims(), (16, 24));
        assert_eq!(a, b);
        Ok(())
    }

    #[test]
    fn rejects_bad_inputs() -> Result<()> {
        let hr = Image::constant(66, 64, 0.5)?;
        assert!(degrade_pair(&hr, &DegradationSpec::default()).is_err());
        let hr = Image::constant(64, 64, 0.5)?;
        let bad = DegradationSpec {
            defocus_radius: 9.0,
            ..Default::default()
        };
        assert!(degrade_pair(&hr, &bad).is_err());
        assert!(synth_scene(0, 16, 64).is_err());
        Ok(())
    }

    #[test]
    fn scenes_have_hot_and_cold_pixels() -> Result<()> {
        for seed in 0..1000 {
            let img = synth_scene(seed, 32, 32)?;
            assert!(img.max() > 0.9 && img.min() < 0.1);
        }
        assert_eq!(synth_scene(5, 48, 48)?, synth_scene(5, 48, 48)?);
        Ok(())
    }

    #[test]
    fn polygon_borders_show_up_in_edge_map() -> Result<()> {
        for seed in 0..50 {
            let scene = synth_scene_with_mask(seed, 64, 64)?;
            let edges = edge_map(&scene.image)?;
            let (h, w) = scene.image.dims();
            let mut best = 0.0f64;
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let m = scene.polygon_mask[y * w + x];
                    if m != scene.polygon_mask[y * w + x + 1] || m != scene.polygon_mask[(y + 1) * w + x] {
                        best = best.max(edges.get(y, x));
                    }
                }
            }
            assert!(best > 0.5, "seed {seed}: border response {best}");
        }
        Ok(())
    }

    #[test]
    fn corpus_mix_matches_request() {
        let cfg = SynthConfig {
            count: 500,
            ..Default::default()
        };
        let defocus = (0..500)
            .filter(|&i| sample_spec(&cfg, i).kind == DegradationKind::Defocus)
            .count() as f64;
        let p = cfg.defocus_fraction;
        let sd = (500.0 * p * (1.0 - p)).sqrt();
        assert!((defocus - 500.0 * p).abs() <= 3.0 * sd, "{defocus}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn noiseless_degradation_commutes_with_affine_maps(
            seed in any::<u64>(), a in 0.5f64..1.0, b in -0.05f64..0.05, motion in any::<bool>(),
        ) {
            let mut rng = seeded_rng(seed);
            let raw: Vec<f64> = (0..64).map(|_| rng.random_range(0.3..0.7)).collect();
            let coarse = Image::new(8, 8, raw).unwrap();
            let hr = resize(&coarse, 32, 32, ResizeMode::Bicubic).unwrap();
            let spec = DegradationSpec {
                kind: if motion { DegradationKind::Motion } else { DegradationKind::Defocus },
                defocus_radius: rng.random_range(0.5..6.0),
                motion_length: rng.random_range(3.0..15.0),
                motion_angle: rng.random_range(0.0..PI),
                noise_sigma: 0.0,
                ..Default::default()
            };
            let base = degrade_pair(&hr, &spec).unwrap().lr;
            let mapped = degrade_pair(&hr.map(|v| a * v + b).unwrap(), &spec).unwrap().lr;
            for (x, y) in base.pixels().iter().zip(mapped.pixels()) {
                prop_assert!((a * x + b - y).abs() < 1e-12);
            }
        }
    }
}
