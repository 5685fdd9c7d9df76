//! Reference metrics (PSNR, SSIM), the hard-count thermal order diagnostic
//! and corpus-level reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Manifest, Split};
use crate::error::{validation, Error, Result};
use crate::imaging::{convolve, load_image, Image};
use crate::losses::{pair_products, patch_means};

pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(validation(format!(
            "metric shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// PSNR in dB for the given peak value, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Local statistics at every position where the window fits entirely.
fn valid_filter(data: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let full = convolve(data, h, w, win, SSIM_WINDOW, SSIM_WINDOW);
    let r = SSIM_WINDOW / 2;
    let mut out = Vec::with_capacity((h - 2 * r) * (w - 2 * r));
    for y in r..h - r {
        out.extend_from_slice(&full[y * w + r..y * w + w - r]);
    }
    out
}

/// Mean structural similarity, 11x11 Gaussian window (sigma 1.5), dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(validation(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = ssim_window();
    let (x, y) = (a.pixels(), b.pixels());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = valid_filter(x, h, w, &win);
    let my = valid_filter(y, h, w, &win);
    let sxx = valid_filter(&xx, h, w, &win);
    let syy = valid_filter(&yy, h, w, &win);
    let sxy = valid_filter(&xy, h, w, &win);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = mx.len() as f64;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (m1, m2) = (mx[i], my[i]);
        let v1 = sxx[i] - m1 * m1;
        let v2 = syy[i] - m2 * m2;
        let cov = sxy[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
            / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
    }
    Ok(total / n)
}

/// Fraction of adjacent patch pairs whose SR and HR differences have
/// strictly opposite signs. Zero when there are no pairs.
pub fn toc_violation_rate(sr: &Image, hr: &Image, p: usize) -> Result<f64> {
    same_shape(sr, hr)?;
    if p == 0 {
        return Err(validation("patch size must be at least 1"));
    }
    let prods = pair_products(&patch_means(sr, p), &patch_means(hr, p));
    if prods.is_empty() {
        return Ok(0.0);
    }
    Ok(prods.iter().filter(|v| **v < 0.0).count() as f64 / prods.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub toc_violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: f64,
    pub ssim: f64,
    pub toc_violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: Option<String>,
    pub config_hash: Option<String>,
    pub toc_patch: usize,
}

impl Default for ReportMeta {
    fn default() -> Self {
        Self {
            checkpoint: None,
            config_hash: None,
            toc_patch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMeta,
    pub rows: Vec<EvalRow>,
    pub aggregate: Option<Aggregate>,
    pub missing: Vec<String>,
}

impl EvalReport {
    pub fn from_rows(metadata: ReportMeta, rows: Vec<EvalRow>, missing: Vec<String>) -> Self {
        let aggregate = if rows.is_empty() {
            None
        } else {
            let n = rows.len() as f64;
            Some(Aggregate {
                psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
                toc_violation_rate: rows.iter().map(|r| r.toc_violation_rate).sum::<f64>() / n,
            })
        };
        Self {
            metadata,
            rows,
            aggregate,
            missing,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Columns: `id,psnr_db,ssim,toc_violation_rate`, one row per image.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["id", "psnr_db", "ssim", "toc_violation_rate"])?;
        }
        let bytes = w.into_inner().map_err(|e| validation(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| validation(e.to_string()))
    }
}

pub fn evaluate_pair(id: &str, sr: &Image, hr: &Image, p: usize) -> Result<EvalRow> {
    Ok(EvalRow {
        id: id.to_string(),
        psnr_db: psnr(sr, hr, 1.0)?,
        ssim: ssim(sr, hr)?,
        toc_violation_rate: toc_violation_rate(sr, hr, p)?,
    })
}

/// Scores `<pred_dir>/<id>_SR.png` against the HR of every test record.
pub fn eval_corpus(
    pred_dir: impl AsRef<Path>,
    manifest: &Manifest,
    metadata: ReportMeta,
) -> Result<EvalReport> {
    let pred_dir = pred_dir.as_ref();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == Split::Test) {
        let pred = pred_dir.join(format!("{}_SR.png", r.id));
        if !pred.is_file() {
            missing.push(r.id.clone());
            continue;
        }
        let sr = load_image(&pred)?;
        let hr = load_image(manifest.resolve(&r.hr_path))?;
        rows.push(evaluate_pair(&r.id, &sr, &hr, metadata.toc_patch)?);
    }
    Ok(EvalReport::from_rows(metadata, rows, missing))
}

/// Intensity along row `row` of each image as CSV (`x,<name>...`).
pub fn profile_csv(images: &[(String, Image)], row: usize) -> Result<String> {
    let Some((_, first)) = images.first() else {
        return Err(validation("profile needs at least one image"));
    };
    let w = first.width();
    for (name, img) in images {
        if img.width() != w {
            return Err(validation(format!("{name} has width {}, expected {w}", img.width())));
        }
        if row >= img.height() {
            return Err(validation(format!(
                "row {row} outside {name} with height {}",
                img.height()
            )));
        }
    }
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["x".to_string()];
    header.extend(images.iter().map(|(n, _)| n.clone()));
    out.write_record(&header)?;
    for x in 0..w {
        let mut rec = vec![x.to_string()];
        rec.extend(images.iter().map(|(_, img)| img.get(row, x).to_string()));
        out.write_record(&rec)?;
    }
    let bytes = out.into_inner().map_err(|e| validation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| validation(e.to_string()))
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>, json: bool) -> Result<()> {
    let path = path.as_ref();
    let text = if json { report.to_json()? } else { report.to_csv()? };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
