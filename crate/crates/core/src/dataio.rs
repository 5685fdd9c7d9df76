//! Manifest handling, train/test splitting and aligned crop batching.
//!
//! A manifest is a JSON-lines file. An optional first line
//! `{"manifest_version": "1"}` carries the schema version; every other line is
//! one record with exactly the fields `id`, `lr_path`, `hr_path`,
//! `degradation`, `scenes` and `split`. Paths are relative to the manifest's
//! directory unless absolute.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{corpus_sample, DegradationKind, SynthConfig};
use crate::error::{validation, Error, Result};
use crate::imaging::{load_image, save_image, BitDepth, Image};
use crate::nn::{derive_seed, seeded_rng};

pub const MANIFEST_VERSION: &str = "1";

/// Train fraction matching the 1,192 / 265 split of the 1,457-image dataset.
pub const DEFAULT_TRAIN_FRACTION: f64 = 1192.0 / 1457.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SceneCategory {
    #[serde(rename = "person")]
    Person,
    #[serde(rename = "bicycle")]
    Bicycle,
    #[serde(rename = "motorcycle")]
    Motorcycle,
    #[serde(rename = "tricycle")]
    Tricycle,
    #[serde(rename = "car")]
    Car,
    #[serde(rename = "bus")]
    Bus,
    #[serde(rename = "plane")]
    Plane,
    #[serde(rename = "statue")]
    Statue,
    #[serde(rename = "regular object")]
    RegularObject,
    #[serde(rename = "building")]
    Building,
    #[serde(rename = "road")]
    Road,
    #[serde(rename = "complex scene")]
    ComplexScene,
}

impl SceneCategory {
    pub const ALL: [SceneCategory; 12] = [
        SceneCategory::Person,
        SceneCategory::Bicycle,
        SceneCategory::Motorcycle,
        SceneCategory::Tricycle,
        SceneCategory::Car,
        SceneCategory::Bus,
        SceneCategory::Plane,
        SceneCategory::Statue,
        SceneCategory::RegularObject,
        SceneCategory::Building,
        SceneCategory::Road,
        SceneCategory::ComplexScene,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub lr_path: PathBuf,
    pub hr_path: PathBuf,
    pub degradation: DegradationKind,
    pub scenes: Vec<SceneCategory>,
    pub split: Split,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub root: PathBuf,
    pub version: String,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        Self {
            records,
            root: root.into(),
            version: MANIFEST_VERSION.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn with_split(&self, split: Split) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
            root: self.root.clone(),
            version: self.version.clone(),
        }
    }

    /// Loads every LR/HR pair referenced by the manifest.
    pub fn load_pairs(&self) -> Result<Vec<LoadedPair>> {
        self.records
            .iter()
            .map(|r| {
                Ok(LoadedPair {
                    id: r.id.clone(),
                    lr: load_image(self.resolve(&r.lr_path))?,
                    hr: load_image(self.resolve(&r.hr_path))?,
                })
            })
            .collect()
    }
}

pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut version = MANIFEST_VERSION.to_string();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if records.is_empty() {
            if let Ok(h) = serde_json::from_str::<Header>(line) {
                version = h.manifest_version;
                continue;
            }
        }
        let rec: SampleRecord = serde_json::from_str(line)
            .map_err(|e| validation(format!("manifest line {lineno}: {e}")))?;
        if !seen.insert(rec.id.clone()) {
            return Err(validation(format!(
                "manifest line {lineno}: duplicate id {}",
                rec.id
            )));
        }
        records.push(rec);
    }
    Ok(Manifest {
        records,
        root: root.to_path_buf(),
        version,
    })
}

/// Reads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = parse_manifest(&text, &root)?;
    for (i, r) in m.records.iter().enumerate() {
        for p in [&r.lr_path, &r.hr_path] {
            if !m.resolve(p).is_file() {
                return Err(validation(format!(
                    "manifest record {} ({}): missing file {}",
                    i + 1,
                    r.id,
                    p.display()
                )));
            }
        }
    }
    Ok(m)
}

pub fn manifest_to_string(m: &Manifest) -> Result<String> {
    let mut out = serde_json::to_string(&serde_json::json!({ "manifest_version": m.version }))?;
    out.push('\n');
    for r in &m.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_string(m)?).map_err(|e| Error::io(path, e))
}

/// Stratified split by degradation label. Train counts per label follow
/// largest-remainder rounding of `train_frac`, so the overall train size is
/// `round(n * train_frac)` and each label is within one sample of its quota.
pub fn split(manifest: &Manifest, train_frac: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(validation("train fraction must lie in (0, 1)"));
    }
    let mut groups: BTreeMap<DegradationKind, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry(r.degradation).or_default().push(i);
    }
    let n = manifest.records.len();
    let target = (n as f64 * train_frac).round() as usize;
    let quotas: Vec<(DegradationKind, f64)> = groups
        .iter()
        .map(|(k, v)| (*k, v.len() as f64 * train_frac))
        .collect();
    let mut counts: BTreeMap<DegradationKind, usize> =
        quotas.iter().map(|(k, q)| (*k, q.floor() as usize)).collect();
    let mut order: Vec<&(DegradationKind, f64)> = quotas.iter().collect();
    order.sort_by(|a, b| (b.1 - b.1.floor()).total_cmp(&(a.1 - a.1.floor())).then(a.0.cmp(&b.0)));
    let mut assigned: usize = counts.values().sum();
    for (k, _) in order.iter().cycle().take(order.len() * 2) {
        if assigned >= target {
            break;
        }
        let c = counts.get_mut(k).unwrap();
        if *c < groups[k].len() {
            *c += 1;
            assigned += 1;
        }
    }
    let mut is_train = vec![false; n];
    for (gi, (k, idx)) in groups.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut seeded_rng(derive_seed(seed, gi as u64)));
        for &i in idx.iter().take(counts[k]) {
            is_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, t) in manifest.records.iter().zip(is_train) {
        let mut r = r.clone();
        if t {
            r.split = Split::Train;
            train.push(r);
        } else {
            r.split = Split::Test;
            test.push(r);
        }
    }
    let make = |records| Manifest {
        records,
        root: manifest.root.clone(),
        version: manifest.version.clone(),
    };
    Ok((make(train), make(test)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPair {
    pub id: String,
    pub lr: Image,
    pub hr: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// LR top-left corner of each crop; the HR crop starts at `scale` times it.
    pub origins: Vec<(usize, usize)>,
    pub lr: Vec<Image>,
    pub hr: Vec<Image>,
}

/// Endless stream of aligned random crops. Epochs visit every usable pair
/// once in a seed-determined order; batches run across epoch boundaries.
pub struct BatchIter {
    pairs: Vec<LoadedPair>,
    batch_size: usize,
    crop: (usize, usize),
    scale: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchIter {
    /// `crop` is the LR crop size; HR crops are `scale` times larger.
    pub fn new(
        pairs: Vec<LoadedPair>,
        batch_size: usize,
        crop: (usize, usize),
        scale: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || crop.0 == 0 || crop.1 == 0 || scale == 0 {
            return Err(validation("batch size, crop and scale must be positive"));
        }
        let mut usable = Vec::new();
        for p in pairs {
            let (lh, lw) = p.lr.dims();
            let (hh, hw) = p.hr.dims();
            if (hh, hw) != (lh * scale, lw * scale) {
                return Err(validation(format!(
                    "pair {}: HR {hh}x{hw} is not {scale}x LR {lh}x{lw}",
                    p.id
                )));
            }
            if crop.0 > lh || crop.1 > lw {
                warn!("pair {}: crop {:?} larger than LR {lh}x{lw}; skipped", p.id, crop);
                continue;
            }
            usable.push(p);
        }
        if usable.is_empty() {
            return Err(validation("no pair is large enough for the requested crop"));
        }
        let mut it = Self {
            pairs: usable,
            batch_size,
            crop,
            scale,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            rng: seeded_rng(derive_seed(seed, u64::MAX)),
        };
        it.start_epoch();
        Ok(it)
    }

    fn start_epoch(&mut self) {
        self.order = (0..self.pairs.len()).collect();
        let mut rng = seeded_rng(derive_seed(self.seed, self.epoch));
        self.order.shuffle(&mut rng);
        self.rng = seeded_rng(derive_seed(self.seed ^ 0xC0FF_EE00, self.epoch));
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let mut batch = Batch {
            ids: Vec::new(),
            origins: Vec::new(),
            lr: Vec::new(),
            hr: Vec::new(),
        };
        while batch.ids.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.start_epoch();
            }
            let p = &self.pairs[self.order[self.cursor]];
            self.cursor += 1;
            let (lh, lw) = p.lr.dims();
            let y = self.rng.random_range(0..=lh - self.crop.0);
            let x = self.rng.random_range(0..=lw - self.crop.1);
            let s = self.scale;
            batch.lr.push(p.lr.crop(y, x, self.crop.0, self.crop.1)?);
            batch
                .hr
                .push(p.hr.crop(y * s, x * s, self.crop.0 * s, self.crop.1 * s)?);
            batch.ids.push(p.id.clone());
            batch.origins.push((y, x));
        }
        Ok(batch)
    }
}

impl Iterator for BatchIter {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

pub fn synthetic_id(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Generates a synthetic corpus into `out_dir` as `<id>_LR.png` and
/// `<id>_HR.png` (16-bit) plus `manifest.jsonl`, split with `train_frac`.
pub fn write_synthetic_corpus(
    cfg: &SynthConfig,
    out_dir: impl AsRef<Path>,
    train_frac: f64,
) -> Result<Manifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let pair = corpus_sample(cfg, i)?;
        let id = synthetic_id(i);
        let lr_path = PathBuf::from(format!("{id}_LR.png"));
        let hr_path = PathBuf::from(format!("{id}_HR.png"));
        save_image(&pair.lr, out.join(&lr_path), BitDepth::Sixteen)?;
        save_image(&pair.hr, out.join(&hr_path), BitDepth::Sixteen)?;
        records.push(SampleRecord {
            id,
            lr_path,
            hr_path,
            degradation: pair.degradation,
            scenes: Vec::new(),
            split: Split::Train,
        });
    }
    let all = Manifest::new(out, records);
    let manifest = if cfg.count >= 2 {
        let (train, test) = split(&all, train_frac, cfg.seed)?;
        let test_ids: HashSet<String> = test.records.iter().map(|r| r.id.clone()).collect();
        let mut records = all.records.clone();
        for r in records.iter_mut() {
            r.split = if test_ids.contains(&r.id) {
                Split::Test
            } else {
                Split::Train
            };
        }
        debug_assert_eq!(train.len() + test.len(), records.len());
        Manifest::new(out, records)
    } else {
        all
    };
    let path = out.join("manifest.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest_to_string(&manifest)?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
