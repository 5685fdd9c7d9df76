//! Single-channel image and feature-map containers, file I/O and resampling.
//!
//! Everything downstream works on one radiometric channel with values in
//! `[0, 1]`. RGB inputs are collapsed to BT.601 luma on load.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
    /// Bit depth of the file this image was decoded from, if any.
    pub bit_depth_src: Option<u8>,
}

impl Image {
    /// Builds an image from row-major pixels, rejecting values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(validation("image must have non-zero size"));
        }
        if data.len() != height * width {
            return Err(validation(format!(
                "pixel buffer has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
            bit_depth_src: None,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Checks the working-image contract: both sides at least 16 and divisible by `scale`.
    pub fn validate_for_scale(&self, scale: usize) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(validation(format!(
                "image {}x{} is smaller than 16x16",
                self.height, self.width
            )));
        }
        if scale == 0 || self.height % scale != 0 || self.width % scale != 0 {
            return Err(validation(format!(
                "image {}x{} is not divisible by scale {scale}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Copies out a `h x w` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(validation(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in top..top + h {
            data.extend_from_slice(&self.data[y * self.width + left..y * self.width + left + w]);
        }
        Image::new(h, w, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::from_clamped(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// `C x H x W` real feature array exchanged between the encoders, fusion and quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(validation("feature map dimensions must be positive"));
        }
        if values.len() != channels * height * width {
            return Err(validation(format!(
                "feature buffer has {} values, expected {channels}x{height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("feature map contains non-finite values"));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Feature vector at one spatial position.
    pub fn vector_at(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }
}

/// Source bit depth accepted by [`save_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }
}

fn luma601(r: f64, g: f64, b: f64) -> f64 {
    if r == g && g == b {
        return r;
    }
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Reads a BMP or PNG file. 8- and 16-bit samples are normalized by `2^bits - 1`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(validation(format!("{} has zero size", path.display())));
    }
    let (data, bits) = match &decoded {
        DynamicImage::ImageLuma8(buf) => (buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), 8),
        DynamicImage::ImageLuma16(buf) => {
            (buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(), 16)
        }
        DynamicImage::ImageLumaA8(buf) => {
            (buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), 8)
        }
        DynamicImage::ImageLumaA16(buf) => {
            (buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(), 16)
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let rgb = decoded.to_rgb16();
            let data = rgb
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0.map(|v| v as f64 / 65535.0);
                    luma601(r, g, b)
                })
                .collect();
            (data, 16)
        }
        _ => {
            let rgb = decoded.to_rgb8();
            let data = rgb
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0.map(|v| v as f64 / 255.0);
                    luma601(r, g, b)
                })
                .collect();
            (data, 8)
        }
    };
    let mut img = Image::from_clamped(h, w, data)?;
    img.bit_depth_src = Some(bits);
    Ok(img)
}

fn quantize(v: f64, max: f64) -> f64 {
    // round half up
    (v.clamp(0.0, 1.0) * max + 0.5).floor().min(max)
}

/// Writes `img` as PNG (any bit depth) or BMP (8-bit only), chosen by extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let is_bmp = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("bmp"));
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
            let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw)
                .ok_or_else(|| validation("buffer size mismatch"))?;
            DynamicImage::ImageLuma8(buf)
        }
        BitDepth::Sixteen => {
            if is_bmp {
                return Err(validation("BMP output supports 8-bit samples only"));
            }
            let raw: Vec<u16> = img
                .data
                .iter()
                .map(|&v| quantize(v, 65535.0) as u16)
                .collect();
            let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw)
                .ok_or_else(|| validation("buffer size mismatch"))?;
            DynamicImage::ImageLuma16(buf)
        }
    };
    let format = if is_bmp {
        image::ImageFormat::Bmp
    } else {
        image::ImageFormat::Png
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    dynamic.write_to(&mut writer, format)?;
    Ok(())
}

/// Half-sample symmetric index reflection: `-1 -> 0`, `n -> n - 1`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bicubic,
    Nearest,
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(source index, weight)` for 1-D bicubic resampling.
/// Downscaling widens the kernel by the scale ratio (antialiasing).
fn bicubic_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let w = cubic((center - j as f64) * stretch);
                if w != 0.0 {
                    let src = reflect_index(j, in_len);
                    match taps.iter_mut().find(|(s, _)| *s == src) {
                        Some(t) => t.1 += w,
                        None => taps.push((src, w)),
                    }
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resamples to `out_h x out_w`. Bicubic uses the `a = -0.5` kernel with
/// half-pixel centers and symmetric border handling; the result is clamped to `[0, 1]`.
pub fn resize(img: &Image, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(validation("resize target must be at least 1x1"));
    }
    let (h, w) = img.dims();
    match mode {
        ResizeMode::Nearest => {
            let ys: Vec<usize> = (0..out_h).map(|i| (i * h) / out_h).collect();
            let xs: Vec<usize> = (0..out_w).map(|i| (i * w) / out_w).collect();
            let mut data = Vec::with_capacity(out_h * out_w);
            for &y in &ys {
                for &x in &xs {
                    data.push(img.get(y, x));
                }
            }
            Image::new(out_h, out_w, data)
        }
        ResizeMode::Bicubic => {
            let tx = bicubic_taps(w, out_w);
            let ty = bicubic_taps(h, out_h);
            let mut tmp = vec![0.0; h * out_w];
            for y in 0..h {
                let row = img.row(y);
                for (x, taps) in tx.iter().enumerate() {
                    tmp[y * out_w + x] = taps.iter().map(|&(s, wt)| row[s] * wt).sum();
                }
            }
            let mut data = vec![0.0; out_h * out_w];
            for (y, taps) in ty.iter().enumerate() {
                for x in 0..out_w {
                    data[y * out_w + x] = taps.iter().map(|&(s, wt)| tmp[s * out_w + x] * wt).sum();
                }
            }
            Image::from_clamped(out_h, out_w, data)
        }
    }
}

/// Dense 2-D convolution of a raw `h x w` buffer with an odd-sized kernel,
/// symmetric border handling. The output keeps the input size and is not clamped.
pub fn convolve(
    data: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    debug_assert!(kh % 2 == 1 && kw % 2 == 1);
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..kh {
                let sy = reflect_index(y as isize + ry - ky as isize, h);
                for kx in 0..kw {
                    let k = kernel[ky * kw + kx];
                    if k != 0.0 {
                        let sx = reflect_index(x as isize + rx - kx as isize, w);
                        acc += k * data[sy * w + sx];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian blur of a raw buffer, symmetric borders.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let n = taps.len();
    let horiz = convolve(data, h, w, &taps, 1, n);
    convolve(&horiz, h, w, &taps, n, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(n: usize) -> Image {
        Image::from_fn(n, n, |y, x| ((y + x) % 2) as f64).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(2, 2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn constant_resizes_to_constant() {
        let img = Image::constant(20, 24, 0.37).unwrap();
        for (h, w) in [(5, 6), (1, 1), (40, 48), (33, 7)] {
            let out = resize(&img, h, w, ResizeMode::Bicubic).unwrap();
            assert!(out.pixels().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn checkerboard_to_single_pixel_is_mean() {
        // Brute-force evaluation of the antialiased kernel at the single output center.
        let img = checker(4);
        let center = 1.5;
        let stretch = 0.25;
        let mut wts = [0.0; 4];
        for j in -8isize..12 {
            let wgt = cubic((center - j as f64) * stretch);
            wts[reflect_index(j, 4)] += wgt;
        }
        let s: f64 = wts.iter().sum();
        let mut oracle = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                oracle += wts[y] / s * wts[x] / s * img.get(y, x);
            }
        }
        let out = resize(&img, 1, 1, ResizeMode::Bicubic).unwrap();
        assert!((out.get(0, 0) - oracle).abs() < 1e-12);
        assert!((out.get(0, 0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nearest_upscale_replicates() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize(&img, 4, 4, ResizeMode::Nearest).unwrap();
        let expected = [
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0,
        ];
        assert_eq!(out.pixels(), &expected);
    }

    #[test]
    fn nearest_same_size_is_identity() {
        let img = Image::from_fn(17, 23, |y, x| ((y * 31 + x * 7) % 13) as f64 / 12.0).unwrap();
        assert_eq!(resize(&img, 17, 23, ResizeMode::Nearest).unwrap(), img);
    }

    #[test]
    fn resize_is_deterministic() {
        let img = Image::from_fn(32, 32, |y, x| ((y * x) % 17) as f64 / 16.0).unwrap();
        let a = resize(&img, 8, 8, ResizeMode::Bicubic).unwrap();
        let b = resize(&img, 8, 8, ResizeMode::Bicubic).unwrap();
        let bits = |i: &Image| i.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn reflect_index_is_half_sample_symmetric() {
        assert_eq!(reflect_index(-1, 5), 0);
        assert_eq!(reflect_index(-2, 5), 1);
        assert_eq!(reflect_index(5, 5), 4);
        assert_eq!(reflect_index(6, 5), 3);
        assert_eq!(reflect_index(3, 5), 3);
    }

    #[test]
    fn gaussian_taps_sum_to_one() {
        let t = gaussian_taps(2.0);
        assert_eq!(t.len(), 13);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(16, 20, |y, x| ((y * 20 + x) as f64 / 319.0).sqrt()).unwrap();
        for (depth, name) in [
            (BitDepth::Eight, "a.png"),
            (BitDepth::Sixteen, "b.png"),
            (BitDepth::Eight, "c.bmp"),
        ] {
            let path = dir.path().join(name);
            save_image(&img, &path, depth).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.bit_depth_src, Some(depth.bits()));
            let step = 1.0 / depth.max_value();
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                assert!((a - b).abs() <= step + 1e-12);
            }
        }
    }

    #[test]
    fn load_normalizes_extremes_and_midpoints() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.bmp");
        ImageBuffer::<Luma<u8>, _>::from_raw(16, 16, vec![255u8; 256])
            .unwrap()
            .save(&white)
            .unwrap();
        assert!(load_image(&white).unwrap().pixels().iter().all(|&v| v == 1.0));

        let black = dir.path().join("black.bmp");
        ImageBuffer::<Luma<u8>, _>::from_raw(16, 16, vec![0u8; 256])
            .unwrap()
            .save(&black)
            .unwrap();
        assert!(load_image(&black).unwrap().pixels().iter().all(|&v| v == 0.0));

        let mid = dir.path().join("mid.png");
        ImageBuffer::<Luma<u16>, _>::from_raw(16, 16, vec![32767u16; 256])
            .unwrap()
            .save(&mid)
            .unwrap();
        let v = load_image(&mid).unwrap().get(3, 3);
        assert!((v - 32767.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn half_gray_rounds_up_at_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        save_image(&Image::constant(16, 16, 0.5).unwrap(), &path, BitDepth::Eight).unwrap();
        assert_eq!(load_image(&path).unwrap().get(0, 0), 128.0 / 255.0);
    }

    #[test]
    fn rgb_collapses_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let raw: Vec<u8> = (0..16 * 16).flat_map(|_| [255u8, 0, 0]).collect();
        image::RgbImage::from_raw(16, 16, raw).unwrap().save(&path).unwrap();
        assert!((load_image(&path).unwrap().get(0, 0) - 0.299).abs() < 1e-12);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/definitely/not/here.png"),
            Err(Error::Io { .. })
        ));
    }
}
