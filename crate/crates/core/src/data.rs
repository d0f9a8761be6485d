//! Dataset scanning, identity-halving splits, augmentation and the synthetic
//! toy dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layout {
    /// `root/<identity>/<image>`
    FolderPerIdentity,
    /// Text file of `path<TAB>identity` lines; relative paths resolve against the root.
    Manifest(PathBuf),
}

#[derive(Clone)]
pub enum ImageSource {
    File(PathBuf),
    Memory { key: String, image: Arc<RgbImage> },
}

impl fmt::Debug for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::File(p) => write!(f, "{}", p.display()),
            ImageSource::Memory { key, .. } => write!(f, "mem:{key}"),
        }
    }
}

impl ImageSource {
    /// Decode to 8-bit RGB; grayscale input is expanded with a warning.
    pub fn load(&self) -> Result<RgbImage> {
        match self {
            ImageSource::Memory { image, .. } => Ok((**image).clone()),
            ImageSource::File(path) => {
                let img = image::open(path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                if !img.color().has_color() {
                    log::warn!("{}: grayscale image expanded to RGB", path.display());
                }
                Ok(img.to_rgb8())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub source: ImageSource,
    pub identity: String,
    /// Index of `identity` in [`IdentityDataset::identities`].
    pub label: usize,
    pub subset: Option<String>,
    pub size: (u32, u32),
}

#[derive(Debug, Clone)]
pub struct IdentityDataset {
    pub root: PathBuf,
    /// Sorted identity names; a record's label indexes this list.
    pub identities: Vec<String>,
    pub records: Vec<Record>,
}

impl IdentityDataset {
    /// Build from unordered `(source, identity, size)` triples: identities and
    /// records are sorted so the result is independent of input order.
    pub fn from_records(root: PathBuf, mut items: Vec<(ImageSource, String, (u32, u32))>) -> Self {
        items.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.to_string().cmp(&b.0.to_string())));
        let mut identities: Vec<String> = items.iter().map(|i| i.1.clone()).collect();
        identities.dedup();
        let index: BTreeMap<&str, usize> = identities.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let records = items
            .iter()
            .map(|(source, identity, size)| Record {
                source: source.clone(),
                identity: identity.clone(),
                label: index[identity.as_str()],
                subset: None,
                size: *size,
            })
            .collect();
        IdentityDataset {
            root,
            identities,
            records,
        }
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Record indices grouped by label.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.identities.len()];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.label].push(i);
        }
        groups
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

pub fn scan_dataset(root: &Path, layout: &Layout) -> Result<IdentityDataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let mut candidates: Vec<(PathBuf, String)> = Vec::new();
    match layout {
        Layout::FolderPerIdentity => {
            let mut empty = Vec::new();
            for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
                let identity = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let images: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
                if images.is_empty() {
                    empty.push(dir.display().to_string());
                }
                candidates.extend(images.into_iter().map(|p| (p, identity.clone())));
            }
            if !empty.is_empty() {
                return Err(Error::Data(format!("identity folders without images: {}", empty.join(", "))));
            }
        }
        Layout::Manifest(manifest) => {
            let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
            let mut missing = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim_end();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (path, identity) = line.split_once('\t').ok_or_else(|| {
                    Error::Data(format!("{}:{}: expected path<TAB>identity", manifest.display(), n + 1))
                })?;
                let full = root.join(path);
                if !full.is_file() {
                    missing.push(full.display().to_string());
                }
                candidates.push((full, identity.trim().to_string()));
            }
            if !missing.is_empty() {
                return Err(Error::Data(format!("manifest lists missing files: {}", missing.join(", "))));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Data(format!("no images found under {}", root.display())));
    }
    let mut unreadable = Vec::new();
    let mut items = Vec::with_capacity(candidates.len());
    for (path, identity) in candidates {
        match image::image_dimensions(&path) {
            Ok(size) => items.push((ImageSource::File(path), identity, size)),
            Err(e) => unreadable.push(format!("{} ({e})", path.display())),
        }
    }
    if !unreadable.is_empty() {
        return Err(Error::Data(format!("unreadable images: {}", unreadable.join(", "))));
    }
    Ok(IdentityDataset::from_records(root.to_path_buf(), items))
}

/// One image with the label it carries in a split.
#[derive(Debug, Clone)]
pub struct Sample {
    pub source: ImageSource,
    pub identity: String,
    /// Classifier target for training samples; identity key for retrieval;
    /// negative for distractors.
    pub label: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// First half of the sorted identities train, second half are queried.
    Open,
    /// Every identity trains and is also queried against its own gallery image.
    Closed,
}

#[derive(Debug, Clone)]
pub struct RetrievalSplit {
    pub seed: u64,
    pub repetition: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub gallery: Vec<Sample>,
    pub query: Vec<Sample>,
    pub warnings: Vec<String>,
}

impl RetrievalSplit {
    pub fn num_classes(&self) -> usize {
        self.train_ids.len()
    }
}

/// Partition `ds` by identity: the first `ceil(n/2)` sorted identities train,
/// the rest are split into one gallery image each and queries. The
/// `(seed, repetition)` stream only picks gallery and validation images.
pub fn make_split(
    ds: &IdentityDataset,
    seed: u64,
    repetition: u64,
    distractors: Option<&IdentityDataset>,
) -> Result<RetrievalSplit> {
    let n = ds.num_identities();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 identities, found {n}")));
    }
    let n_train = n.div_ceil(2);
    let groups = ds.by_identity();
    let mut rng = rng_from(&[seed, repetition]);
    let mut split = RetrievalSplit {
        seed,
        repetition,
        train_ids: ds.identities[..n_train].to_vec(),
        test_ids: ds.identities[n_train..].to_vec(),
        train: Vec::new(),
        validation: Vec::new(),
        gallery: Vec::new(),
        query: Vec::new(),
        warnings: Vec::new(),
    };
    let sample = |i: usize, label: i64| Sample {
        source: ds.records[i].source.clone(),
        identity: ds.records[i].identity.clone(),
        label,
    };

    for (label, members) in groups[..n_train].iter().enumerate() {
        let held_out = if members.len() >= 2 {
            members.choose(&mut rng).copied()
        } else {
            split
                .warnings
                .push(format!("train identity {} has one image; no validation image", ds.identities[label]));
            None
        };
        for &i in members {
            let s = sample(i, label as i64);
            if Some(i) == held_out {
                split.validation.push(s);
            } else {
                split.train.push(s);
            }
        }
    }
    for (offset, members) in groups[n_train..].iter().enumerate() {
        let label = (n_train + offset) as i64;
        let chosen = *members.choose(&mut rng).expect("identities have at least one record");
        if members.len() < 2 {
            let msg = format!("test identity {} has one image; it contributes no query", ds.identities[n_train + offset]);
            log::warn!("{msg}");
            split.warnings.push(msg);
        }
        for &i in members {
            if i == chosen {
                split.gallery.push(sample(i, label));
            } else {
                split.query.push(sample(i, label));
            }
        }
    }
    if let Some(extra) = distractors {
        for r in &extra.records {
            split.gallery.push(Sample {
                source: r.source.clone(),
                identity: r.identity.clone(),
                label: -1,
            });
        }
    }
    Ok(split)
}

/// Closed-set split for sanity runs: every identity is used for training
/// (minus one validation image each); one training image per identity forms
/// the gallery and the remaining training images are the queries.
pub fn make_closed_split(ds: &IdentityDataset, seed: u64, repetition: u64) -> Result<RetrievalSplit> {
    let groups = ds.by_identity();
    let mut rng = rng_from(&[seed, repetition]);
    let mut split = RetrievalSplit {
        seed,
        repetition,
        train_ids: ds.identities.clone(),
        test_ids: ds.identities.clone(),
        train: Vec::new(),
        validation: Vec::new(),
        gallery: Vec::new(),
        query: Vec::new(),
        warnings: Vec::new(),
    };
    for (label, members) in groups.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Data(format!(
                "closed split needs 3 images per identity, {} has {}",
                ds.identities[label],
                members.len()
            )));
        }
        let mut order = members.clone();
        order.shuffle(&mut rng);
        for (k, &i) in order.iter().enumerate() {
            let s = Sample {
                source: ds.records[i].source.clone(),
                identity: ds.records[i].identity.clone(),
                label: label as i64,
            };
            match k {
                0 => split.validation.push(s),
                1 => {
                    split.gallery.push(s.clone());
                    split.train.push(s);
                }
                _ => {
                    split.query.push(s.clone());
                    split.train.push(s);
                }
            }
        }
    }
    Ok(split)
}

/// Audit listing: one `role<TAB>source<TAB>identity<TAB>label` line per image.
pub fn export_split(split: &RetrievalSplit) -> String {
    let mut out = format!("# seed={} repetition={}\n", split.seed, split.repetition);
    for (role, samples) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("gallery", &split.gallery),
        ("query", &split.query),
    ] {
        for s in samples {
            out.push_str(&format!("{role}\t{}\t{}\t{}\n", s.source, s.identity, s.label));
        }
    }
    out
}

/// Read a split written by [`export_split`]. Only file-backed images can be reloaded.
pub fn parse_split(text: &str, base: &Path) -> Result<RetrievalSplit> {
    let mut split = RetrievalSplit {
        seed: 0,
        repetition: 0,
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        train: Vec::new(),
        validation: Vec::new(),
        gallery: Vec::new(),
        query: Vec::new(),
        warnings: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        if let Some(header) = line.strip_prefix('#') {
            for kv in header.split_whitespace() {
                match kv.split_once('=') {
                    Some(("seed", v)) => split.seed = v.parse().unwrap_or(0),
                    Some(("repetition", v)) => split.repetition = v.parse().unwrap_or(0),
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("split line {}: expected role, path, identity, label", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [role, path, identity, label] = fields[..] else {
            return Err(bad());
        };
        if path.starts_with("mem:") {
            return Err(Error::Data(format!("split line {}: in-memory image {path} cannot be reloaded", n + 1)));
        }
        let sample = Sample {
            source: ImageSource::File(base.join(path)),
            identity: identity.to_string(),
            label: label.parse().map_err(|_| bad())?,
        };
        match role {
            "train" => split.train.push(sample),
            "validation" => split.validation.push(sample),
            "gallery" => split.gallery.push(sample),
            "query" => split.query.push(sample),
            other => return Err(Error::Data(format!("split line {}: unknown role {other}", n + 1))),
        }
    }
    let mut train_ids: Vec<String> = split.train.iter().map(|s| s.identity.clone()).collect();
    train_ids.sort();
    train_ids.dedup();
    let mut test_ids: Vec<String> = split.query.iter().map(|s| s.identity.clone()).collect();
    test_ids.sort();
    test_ids.dedup();
    split.train_ids = train_ids;
    split.test_ids = test_ids;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub resize: u32,
    pub crop: u32,
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Take the central crop instead of a random one.
    pub center_crop: bool,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            resize: 356,
            crop: 324,
            flip_p: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            center_crop: false,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationConfig {
    pub fn toy() -> Self {
        AugmentationConfig {
            resize: 36,
            crop: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!("crop {} must lie in 1..={}", self.crop, self.resize)));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::Config(format!("flip probability {} outside [0,1]", self.flip_p)));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

pub fn resize(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    imageops::resize(img, size, size, FilterType::Triangle)
}

pub fn flip_horizontal(img: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(img)
}

fn luma(p: &Rgb<f32>) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness, contrast and saturation factors drawn from `[1-s, 1+s]`, applied in that order.
fn jitter<R: Rng + ?Sized>(pixels: &mut [Rgb<f32>], cfg: &AugmentationConfig, rng: &mut R) {
    let mut factor = |s: f64| if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) as f32 } else { 1.0 };
    let (b, c, s) = (factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation));
    let clamp = |v: f32| v.clamp(0.0, 1.0);
    for p in pixels.iter_mut() {
        p.0 = p.0.map(|v| clamp(v * b));
    }
    let mean_gray = pixels.iter().map(luma).sum::<f32>() / pixels.len().max(1) as f32;
    for p in pixels.iter_mut() {
        p.0 = p.0.map(|v| clamp(mean_gray + c * (v - mean_gray)));
        let gray = luma(p);
        p.0 = p.0.map(|v| clamp(gray + s * (v - gray)));
    }
}

/// `[3, H, W]` tensor, channels in RGB order, each value `(v/255 - mean) / std`.
pub fn normalize(img: &RgbImage, cfg: &AugmentationConfig) -> Tensor<f32> {
    let pixels: Vec<Rgb<f32>> = img.pixels().map(|p| Rgb(p.0.map(|v| v as f32 / 255.0))).collect();
    to_tensor(&pixels, img.width(), img.height(), cfg)
}

fn to_tensor(pixels: &[Rgb<f32>], w: u32, h: u32, cfg: &AugmentationConfig) -> Tensor<f32> {
    let hw = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, p) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = (p[c] - cfg.mean[c]) / cfg.std[c];
        }
    }
    Tensor::new(vec![3, h as usize, w as usize], data).expect("pixel count matches shape")
}

/// Resize, crop, flip, jitter, normalize.
pub fn augment_train<R: Rng + ?Sized>(img: &RgbImage, cfg: &AugmentationConfig, rng: &mut R) -> Tensor<f32> {
    let resized = resize(img, cfg.resize);
    let slack = cfg.resize - cfg.crop;
    let (x0, y0) = if cfg.center_crop {
        (slack / 2, slack / 2)
    } else {
        (rng.random_range(0..=slack), rng.random_range(0..=slack))
    };
    let mut crop = imageops::crop_imm(&resized, x0, y0, cfg.crop, cfg.crop).to_image();
    if cfg.flip_p > 0.0 && rng.random_bool(cfg.flip_p) {
        crop = flip_horizontal(&crop);
    }
    let mut pixels: Vec<Rgb<f32>> = crop.pixels().map(|p| Rgb(p.0.map(|v| v as f32 / 255.0))).collect();
    jitter(&mut pixels, cfg, rng);
    to_tensor(&pixels, cfg.crop, cfg.crop, cfg)
}

/// Resize straight to the crop size and normalize.
pub fn prepare_eval(img: &RgbImage, cfg: &AugmentationConfig) -> Tensor<f32> {
    normalize(&resize(img, cfg.crop), cfg)
}

/// Stack samples into `[B,3,S,S]`. Training samples draw their augmentation
/// stream from `(seed, epoch, index)`, so batch composition and thread
/// scheduling do not change the pixels.
pub fn load_batch(
    samples: &[Sample],
    indices: &[usize],
    cfg: &AugmentationConfig,
    train: Option<(u64, u64)>,
) -> Result<Tensor<f32>> {
    let images = indices
        .par_iter()
        .map(|&i| {
            let img = samples[i].source.load()?;
            Ok(match train {
                Some((seed, epoch)) => augment_train(&img, cfg, &mut rng_from(&[seed, epoch, i as u64])),
                None => prepare_eval(&img, cfg),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let s = cfg.crop as usize;
    let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
    for t in images {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![indices.len(), 3, s, s], data)
}

/// Per-identity appearance of a synthetic hand-like image.
struct Prototype {
    background: [f32; 3],
    foreground: [f32; 3],
    stripe_freq: f32,
    stripe_angle: f32,
    center: (f32, f32),
    radius: f32,
}

/// In-memory dataset of `num_ids` identities with `per_id` images each.
///
/// Each identity has its own colors, stripe texture and blob placement; each
/// image adds a small shift, brightness change and pixel noise.
pub fn synthetic_dataset(num_ids: usize, per_id: usize, size: u32, seed: u64) -> IdentityDataset {
    let mut items = Vec::with_capacity(num_ids * per_id);
    for id in 0..num_ids {
        let mut r = rng_from(&[seed, 0x5EED, id as u64]);
        let mut color = || [r.random::<f32>(), r.random::<f32>(), r.random::<f32>()];
        let background = color();
        let foreground = color();
        let proto = Prototype {
            background,
            foreground,
            stripe_freq: r.random_range(2.0..6.0),
            stripe_angle: r.random_range(0.0..std::f32::consts::PI),
            center: (r.random_range(0.3..0.7), r.random_range(0.3..0.7)),
            radius: r.random_range(0.2..0.35),
        };
        let identity = format!("id{id:03}");
        for k in 0..per_id {
            let mut r = rng_from(&[seed, 0x1AA6E, id as u64, k as u64]);
            let img = render(&proto, size, &mut r);
            let key = format!("{identity}/{k:03}");
            items.push((
                ImageSource::Memory {
                    key,
                    image: Arc::new(img),
                },
                identity.clone(),
                (size, size),
            ));
        }
    }
    IdentityDataset::from_records(PathBuf::from("synthetic"), items)
}

fn render<R: Rng + ?Sized>(p: &Prototype, size: u32, r: &mut R) -> RgbImage {
    let shift = (r.random_range(-0.06..0.06f32), r.random_range(-0.06..0.06f32));
    let gain = r.random_range(0.85..1.15f32);
    let (sin, cos) = p.stripe_angle.sin_cos();
    let n = size as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let u = x as f32 / n;
        let v = y as f32 / n;
        let du = u - p.center.0 - shift.0;
        let dv = v - p.center.1 - shift.1;
        let inside = (du * du + dv * dv).sqrt() < p.radius;
        let stripe = 0.5 + 0.5 * ((u * cos + v * sin) * p.stripe_freq * std::f32::consts::TAU).sin();
        let base = if inside { p.foreground } else { p.background };
        let mut px = [0u8; 3];
        for c in 0..3 {
            let tone = if inside { base[c] * (0.6 + 0.4 * stripe) } else { base[c] * (0.8 + 0.2 * stripe) };
            let noisy = tone * gain + r.random_range(-0.05..0.05f32);
            px[c] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}
