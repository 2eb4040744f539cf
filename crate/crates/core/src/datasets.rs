//! Leakage-safe dataset management.
//!
//! Source images are split into train/val/test by ID first; tiles are only
//! ever produced from a finished [`SplitManifest`], so no image contributes
//! tiles to more than one split. Cross-validation folds are drawn from the
//! training split alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::InputNorm;
use crate::tiling::{tile_image, GridSpec, TileRecord, TileRect};
use crate::{class_id, CLASS_NAMES, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Images per class assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassQuota {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl ClassQuota {
    /// 16 validation and 16 test images, everything else for training.
    pub fn standard(class_size: usize) -> Self {
        Self::remainder_train(class_size, 16, 16)
    }

    pub fn remainder_train(class_size: usize, val: usize, test: usize) -> Self {
        Self {
            train: class_size.saturating_sub(val + test),
            val,
            test,
        }
    }

    /// Scales every count by `factor`, rounding to nearest and keeping at
    /// least one image per split.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        Self {
            train: s(self.train),
            val: s(self.val),
            test: s(self.test),
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub class: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn new(entries: Vec<ManifestEntry>, seed: u64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.class >= NUM_CLASSES {
                return Err(Error::Data(format!("{}: class {} out of range", e.source_id, e.class)));
            }
            if !seen.insert(e.source_id.as_str()) {
                return Err(Error::Data(format!("{} appears more than once", e.source_id)));
            }
        }
        Ok(Self { entries, seed })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn ids(&self, split: Split) -> BTreeSet<&str> {
        self.in_split(split).map(|e| e.source_id.as_str()).collect()
    }

    pub fn count(&self, split: Split, class: usize) -> usize {
        self.in_split(split).filter(|e| e.class == class).count()
    }

    pub fn get(&self, source_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.source_id == source_id)
    }

    /// CSV with header `source_id,class,split`; class is written by name.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["source_id", "class", "split"]).map_err(|e| Error::csv(path, e))?;
        for e in &self.entries {
            w.write_record([e.source_id.as_str(), CLASS_NAMES[e.class], e.split.as_str()])
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for rec in csv_records(path)? {
            let [id, class, split] = fixed::<3>(&rec, path)?;
            entries.push(ManifestEntry {
                source_id: id.to_string(),
                class: parse_class(class)?,
                split: split.parse()?,
            });
        }
        Self::new(entries, 0)
    }
}

fn parse_class(s: &str) -> Result<usize> {
    class_id(s)
        .or_else(|| s.parse().ok().filter(|&c: &usize| c < NUM_CLASSES))
        .ok_or_else(|| Error::Data(format!("unknown class {s:?}")))
}

/// Shuffles each class with a seeded RNG and deals images into train, val and
/// test according to the per-class quota. Images beyond the quota are left out.
pub fn stratified_split(ids_by_class: &[Vec<String>], quotas: &[ClassQuota], seed: u64) -> Result<SplitManifest> {
    if ids_by_class.len() != NUM_CLASSES || quotas.len() != NUM_CLASSES {
        return Err(Error::Quota(format!(
            "need {NUM_CLASSES} classes and quotas, got {} and {}",
            ids_by_class.len(),
            quotas.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (class, (ids, quota)) in ids_by_class.iter().zip(quotas).enumerate() {
        if ids.len() < quota.total() {
            return Err(Error::Quota(format!(
                "class {} has {} images, quota needs {}",
                CLASS_NAMES[class],
                ids.len(),
                quota.total()
            )));
        }
        let mut ids: Vec<&String> = ids.iter().collect();
        ids.sort();
        ids.shuffle(&mut rng);
        let splits = std::iter::repeat_n(Split::Train, quota.train)
            .chain(std::iter::repeat_n(Split::Val, quota.val))
            .chain(std::iter::repeat_n(Split::Test, quota.test));
        for (id, split) in ids.into_iter().zip(splits) {
            entries.push(ManifestEntry {
                source_id: id.clone(),
                class,
                split,
            });
        }
    }
    SplitManifest::new(entries, seed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_ids(&self, fold: usize) -> BTreeSet<&str> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Training and held-out source IDs for one CV iteration.
    pub fn partition(&self, fold: usize) -> (BTreeSet<&str>, BTreeSet<&str>) {
        let mut train = BTreeSet::new();
        let mut held_out = BTreeSet::new();
        for (id, &f) in &self.fold_of {
            if f == fold {
                held_out.insert(id.as_str());
            } else {
                train.insert(id.as_str());
            }
        }
        (train, held_out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["source_id", "fold"]).map_err(|e| Error::csv(path, e))?;
        for (id, f) in &self.fold_of {
            w.write_record([id.as_str(), &f.to_string()]).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut fold_of = BTreeMap::new();
        for rec in csv_records(path)? {
            let [id, fold] = fixed::<2>(&rec, path)?;
            let f: usize = fold.parse().map_err(|_| Error::Data(format!("bad fold index {fold:?}")))?;
            fold_of.insert(id.to_string(), f);
        }
        let k = fold_of.values().max().map_or(0, |m| m + 1);
        Ok(Self { k, fold_of })
    }
}

/// Class-stratified round-robin folds over the training split.
///
/// Each class is shuffled and dealt into folds continuing the round-robin
/// position where the previous class stopped, so per-class fold sizes differ
/// by at most one and total fold sizes stay balanced.
pub fn make_folds(manifest: &SplitManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Fold("k must be positive".into()));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); NUM_CLASSES];
    for e in manifest.in_split(Split::Train) {
        by_class[e.class].push(&e.source_id);
    }
    if by_class.iter().all(|c| c.is_empty()) {
        return Err(Error::Fold("manifest has no training images".into()));
    }
    if let Some((c, ids)) = by_class.iter().enumerate().find(|(_, ids)| !ids.is_empty() && ids.len() < k) {
        return Err(Error::Fold(format!(
            "k = {k} exceeds the {} training images of class {}",
            ids.len(),
            CLASS_NAMES[c]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut cursor = 0usize;
    for ids in &mut by_class {
        ids.sort();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            fold_of.insert(id.to_string(), cursor % k);
            cursor += 1;
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Texture and "cell" parameters for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    /// Gaussian smoothing sigma of the random field, in pixels.
    pub corr_length: f64,
    /// Standard deviation of the texture field.
    pub amplitude: f64,
    /// Expected blob count per megapixel.
    pub blob_density: f64,
    pub blob_radius: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub images_per_class: usize,
    pub classes: [ClassTexture; NUM_CLASSES],
    pub background: f64,
    /// Peak amplitude of a random, class-independent illumination gradient.
    pub illumination: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let tex = |corr_length, amplitude| ClassTexture {
            corr_length,
            amplitude,
            blob_density: 12.0,
            blob_radius: (12.0, 30.0),
        };
        Self {
            height: 1200,
            width: 1600,
            images_per_class: 110,
            classes: [tex(1.0, 0.05), tex(1.0, 0.10), tex(1.0, 0.15), tex(1.0, 0.20)],
            background: 0.5,
            illumination: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic config: {m}")));
        if self.height == 0 || self.width == 0 || self.images_per_class == 0 {
            return bad("image size and count must be positive".into());
        }
        for (c, t) in self.classes.iter().enumerate() {
            if !(t.corr_length >= 0.0 && t.amplitude >= 0.0 && t.blob_density >= 0.0) {
                return bad(format!("class {c} has a negative parameter"));
            }
            if !(t.blob_radius.0 > 0.0 && t.blob_radius.0 <= t.blob_radius.1) {
                return bad(format!("class {c} blob radius range is invalid"));
            }
        }
        for w in self.classes.windows(2) {
            let (a, b) = (w[0], w[1]);
            let non_decreasing = b.amplitude >= a.amplitude && b.corr_length >= a.corr_length;
            let strict = b.amplitude > a.amplitude || b.corr_length > a.corr_length;
            if !(non_decreasing && strict) {
                return bad("texture parameters must be strictly ordered across classes".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub source_id: String,
    pub class: usize,
    pub image: GrayImage,
}

pub fn synthetic_source_id(class: usize, index: usize) -> String {
    format!("{}_{index:03}", CLASS_NAMES[class])
}

/// Generates `images_per_class` images for every class. Each image has its own
/// derived seed, so the output does not depend on the thread count.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..NUM_CLASSES)
        .flat_map(|c| (0..cfg.images_per_class).map(move |i| (c, i)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(class, index)| SynthImage {
            source_id: synthetic_source_id(class, index),
            class,
            image: generate_image(cfg, class, index),
        })
        .collect())
}

/// One synthetic image: smoothed Gaussian noise scaled to the class amplitude,
/// a random illumination gradient, and dark elliptical blobs standing in for
/// cells.
pub fn generate_image(cfg: &SynthConfig, class: usize, index: usize) -> GrayImage {
    let tex = cfg.classes[class];
    let seed = cfg
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((class as u64) << 32) | index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let field = gaussian_random_field(h, w, tex.corr_length, &mut rng);

    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let tilt = rng.random_range(-1.0..1.0) * cfg.illumination;
    let diag = ((h * h + w * w) as f64).sqrt().max(1.0);
    let mut img = GrayImage::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 - h as f64 / 2.0, x as f64 - w as f64 / 2.0);
        let grad = tilt * (dx * ca + dy * sa) / diag * 2.0;
        (cfg.background + grad + tex.amplitude * field[y * w + x]) as f32
    });

    let expected = tex.blob_density * (h * w) as f64 / 1e6;
    let blobs = if expected > 0.0 {
        Poisson::new(expected).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let (r0, r1) = tex.blob_radius;
        let ry = rng.random_range(r0..=r1);
        let rx = rng.random_range(r0..=r1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let depth = rng.random_range(0.2..0.4);
        paint_blob(&mut img, cy, cx, ry, rx, theta, depth);
    }
    img.pixels_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn paint_blob(img: &mut GrayImage, cy: f64, cx: f64, ry: f64, rx: f64, theta: f64, depth: f64) {
    let reach = ry.max(rx) * 1.5;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(img.height());
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(img.width());
    let (ct, st) = (theta.cos(), theta.sin());
    for y in y0..y1 {
        for x in x0..x1 {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = (dx * ct + dy * st) / rx;
            let v = (-dx * st + dy * ct) / ry;
            let r2 = u * u + v * v;
            // Dark body with a faint bright rim, as in phase contrast.
            let body = (-2.0 * r2 * r2).exp();
            let rim = 0.3 * (-8.0 * (r2.sqrt() - 1.1).powi(2)).exp();
            let v = img.get(y, x) as f64 * (1.0 - depth * body) + depth * rim * 0.5;
            img.set(y, x, v as f32);
        }
    }
}

/// Unit-variance Gaussian random field: white noise smoothed by a separable
/// Gaussian of standard deviation `sigma` (no smoothing when `sigma` is 0).
pub fn gaussian_random_field<R: Rng>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = kernel.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let noise: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(rng)).collect();
    if r == 0 {
        return noise;
    }
    let mut horiz = vec![0.0; ph * w];
    for y in 0..ph {
        let row = &noise[y * pw..(y + 1) * pw];
        for x in 0..w {
            horiz[y * w + x] = kernel.iter().zip(&row[x..x + kernel.len()]).map(|(k, v)| k * v).sum();
        }
    }
    let gain: f64 = kernel.iter().map(|k| k * k).sum();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * horiz[(y + i) * w + x];
            }
            out[y * w + x] = acc / gain;
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Writes images as `root/{class_name}/{source_id}.png`.
pub fn write_dataset(root: &Path, images: &[SynthImage]) -> Result<()> {
    images
        .par_iter()
        .try_for_each(|im| im.image.save_png(&image_path(root, im.class, &im.source_id)))
}

pub fn image_path(root: &Path, class: usize, source_id: &str) -> PathBuf {
    root.join(CLASS_NAMES[class]).join(format!("{source_id}.png"))
}

/// Lists `root/{class_name}/*.png` as sorted source IDs per class.
pub fn scan_dataset(root: &Path) -> Result<Vec<Vec<String>>> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.to_path_buf()));
    }
    let mut out = vec![Vec::new(); NUM_CLASSES];
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out[class].push(stem.to_string());
                }
            }
        }
        out[class].sort();
    }
    Ok(out)
}

/// Tiles resized to the model input, with provenance. Pixel values are kept
/// unnormalised in `[0, 1]`.
#[derive(Debug, Clone, Default)]
pub struct TileSet {
    pub records: Vec<TileRecord>,
    pub inputs: Vec<Vec<f32>>,
    pub input_size: usize,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn source_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.source_id.as_str()).collect()
    }

    /// Tiles `split` of a finished manifest. `load` fetches a source image.
    pub fn from_manifest<L>(manifest: &SplitManifest, split: Split, grid: GridSpec, input_size: usize, load: L) -> Result<Self>
    where
        L: Fn(&ManifestEntry) -> Result<GrayImage> + Sync,
    {
        let entries: Vec<&ManifestEntry> = manifest.in_split(split).collect();
        Self::from_entries(&entries, grid, input_size, load)
    }

    pub fn from_entries<L>(entries: &[&ManifestEntry], grid: GridSpec, input_size: usize, load: L) -> Result<Self>
    where
        L: Fn(&ManifestEntry) -> Result<GrayImage> + Sync,
    {
        let parts: Vec<Vec<(TileRecord, Vec<f32>)>> = entries
            .par_iter()
            .map(|e| {
                let img = load(e)?;
                tile_image(&img, grid, &e.source_id, e.class)?
                    .into_iter()
                    .map(|(rec, px)| Ok((rec, resize_to_input(&px, input_size)?)))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut set = TileSet {
            input_size,
            ..Default::default()
        };
        for (rec, input) in parts.into_iter().flatten() {
            set.records.push(rec);
            set.inputs.push(input);
        }
        Ok(set)
    }

    pub fn from_tiles(tiles: Vec<(TileRecord, GrayImage)>, input_size: usize) -> Result<Self> {
        let inputs = tiles
            .par_iter()
            .map(|(_, px)| resize_to_input(px, input_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(TileSet {
            records: tiles.into_iter().map(|(r, _)| r).collect(),
            inputs,
            input_size,
        })
    }

    /// Loads one split of a tile directory written by [`write_tiles`],
    /// resizing each tile as it is read.
    pub fn from_tile_dir(root: &Path, split: Split, input_size: usize) -> Result<Self> {
        let records = read_tile_manifest(root, split)?;
        let inputs = records
            .par_iter()
            .map(|rec| resize_to_input(&GrayImage::load_png(&tile_png_path(root, split, rec))?, input_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(TileSet {
            records,
            inputs,
            input_size,
        })
    }

    /// Subset of tiles whose source image is in `ids`.
    pub fn filter_sources(&self, ids: &BTreeSet<&str>) -> TileSet {
        let mut out = TileSet {
            input_size: self.input_size,
            ..Default::default()
        };
        for (r, x) in self.records.iter().zip(&self.inputs) {
            if ids.contains(r.source_id.as_str()) {
                out.records.push(r.clone());
                out.inputs.push(x.clone());
            }
        }
        out
    }

    pub fn fit_norm(&self) -> InputNorm {
        InputNorm::fit(self.inputs.iter().map(|v| v.as_slice()))
    }
}

fn resize_to_input(px: &GrayImage, input_size: usize) -> Result<Vec<f32>> {
    Ok(crate::tiling::resize_bilinear(px, input_size, input_size)?.into_pixels())
}

/// `root/{split}/{class}/{tile_id}.png`
pub fn tile_png_path(root: &Path, split: Split, rec: &TileRecord) -> PathBuf {
    root.join(split.as_str())
        .join(CLASS_NAMES[rec.label])
        .join(format!("{}.png", rec.tile_id))
}

/// Writes `root/{split}/{class}/{tile_id}.png` and `root/{split}/manifest.csv`.
pub fn write_tiles(root: &Path, split: Split, tiles: &[(TileRecord, GrayImage)]) -> Result<()> {
    tiles
        .par_iter()
        .try_for_each(|(rec, px)| px.save_png(&tile_png_path(root, split, rec)))?;
    let records: Vec<TileRecord> = tiles.iter().map(|(r, _)| r.clone()).collect();
    write_tile_manifest(root, split, &records)
}

pub fn write_tile_manifest(root: &Path, split: Split, records: &[TileRecord]) -> Result<()> {
    let path = root.join(split.as_str()).join("manifest.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["tile_id", "source_id", "class", "row", "col", "x0", "y0", "width", "height"])
        .map_err(|e| Error::csv(&path, e))?;
    for rec in records {
        let r = rec.rect;
        w.write_record([
            rec.tile_id.clone(),
            rec.source_id.clone(),
            CLASS_NAMES[rec.label].to_string(),
            r.row_index.to_string(),
            r.col_index.to_string(),
            r.x0.to_string(),
            r.y0.to_string(),
            r.width.to_string(),
            r.height.to_string(),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_tile_manifest(root: &Path, split: Split) -> Result<Vec<TileRecord>> {
    let path = root.join(split.as_str()).join("manifest.csv");
    let mut records = Vec::new();
    for rec in csv_records(&path)? {
        let f = fixed::<9>(&rec, &path)?;
        let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Data(format!("bad number {s:?} in {}", path.display()))) };
        records.push(TileRecord {
            tile_id: f[0].to_string(),
            source_id: f[1].to_string(),
            label: parse_class(f[2])?,
            rect: TileRect {
                row_index: num(f[3])?,
                col_index: num(f[4])?,
                x0: num(f[5])?,
                y0: num(f[6])?,
                width: num(f[7])?,
                height: num(f[8])?,
            },
        });
    }
    Ok(records)
}

/// Reads the tile manifest of one split and loads every listed tile.
pub fn read_tiles(root: &Path, split: Split) -> Result<Vec<(TileRecord, GrayImage)>> {
    read_tile_manifest(root, split)?
        .into_par_iter()
        .map(|rec| {
            let px = GrayImage::load_png(&tile_png_path(root, split, &rec))?;
            Ok((rec, px))
        })
        .collect()
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

pub(crate) fn csv_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    rdr.records().map(|r| r.map_err(|e| Error::csv(path, e))).collect()
}

fn fixed<'a, const N: usize>(rec: &'a csv::StringRecord, path: &Path) -> Result<[&'a str; N]> {
    if rec.len() != N {
        return Err(Error::Data(format!("{}: expected {N} columns, found {}", path.display(), rec.len())));
    }
    Ok(std::array::from_fn(|i| &rec[i]))
}
