//! Synthetic wild-background multi-label pattern dataset.
//!
//! Scenes composite 1-3 labeled pattern patches over a cluttered background
//! that also carries unlabeled pattern-like distractor textures, recreating
//! the core difficulty of in-the-wild photos: pixels that look like a class
//! without belonging to the target. Generation is deterministic per
//! `(seed, sample_index)` and embarrassingly parallel.

mod patterns;

pub use patterns::render as render_pattern;

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered label names; order defines the target-vector index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub names: Vec<String>,
}

pub const DEFAULT_LABELS: [&str; 11] = [
    "Solid",
    "Plaid",
    "Floral",
    "Stripe",
    "Check",
    "Graphic",
    "Tie Dye",
    "Animal",
    "Words/Letters",
    "Dot",
    "Paisley",
];

impl Default for LabelVocabulary {
    fn default() -> Self {
        Self {
            names: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LabelVocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }
}

/// The 11-label default vocabulary.
pub fn build_vocabulary() -> LabelVocabulary {
    LabelVocabulary::default()
}

/// Per-label inclusion probabilities: geometric decay clamped below so every
/// label stays measurable on a desk-scale test split. Conditioned on the
/// non-empty rejection rule, exactly the first three labels land above a 5%
/// sample share.
pub fn default_label_frequencies(n_labels: usize) -> Vec<f64> {
    (0..n_labels)
        .map(|l| (0.35 * 0.36f64.powi(l as i32)).max(0.018))
        .collect()
}

/// Scene generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Upper bound on labeled patches per image (lower bound is 1).
    pub patches_per_image: usize,
    /// Per-label inclusion probability in [0, 1]; labels co-occur.
    pub label_frequencies: Vec<f64>,
    /// Distractor-texture density in [0, 1].
    pub background_clutter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            patches_per_image: 3,
            label_frequencies: default_label_frequencies(DEFAULT_LABELS.len()),
            background_clutter: 0.8,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if !(1..=3).contains(&self.patches_per_image) {
            return Err(Error::Config("patches_per_image must be in [1, 3]".into()));
        }
        if self.label_frequencies.is_empty() {
            return Err(Error::Config("label_frequencies must be nonempty".into()));
        }
        for (i, f) in self.label_frequencies.iter().enumerate() {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::Config(format!(
                    "label frequency {i} = {f} outside [0, 1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.background_clutter) {
            return Err(Error::Config("background_clutter must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_labels(&self) -> usize {
        self.label_frequencies.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One generated scene: image in [0, 1], multi-hot target, split tag.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub image: Array3<f32>,
    pub target: Vec<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub target: Vec<u8>,
    pub split: Split,
}

/// Dataset index: records plus the vocabulary and generator settings that
/// produced them.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub vocabulary: LabelVocabulary,
    pub generation_config: SceneConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    vocabulary: LabelVocabulary,
    generation_config: SceneConfig,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for `(seed, index)`; generation order never
/// affects sample content.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ index.wrapping_mul(0xA076_1D64_78BD_642F).wrapping_add(0x1D8E);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Renders a labeled texture patch; deterministic given the RNG stream.
pub fn render_pattern_patch(
    label_index: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>> {
    if label_index >= patterns::PATTERN_COUNT {
        return Err(Error::Config(format!(
            "label index {label_index} out of range (0..{})",
            patterns::PATTERN_COUNT
        )));
    }
    Ok(patterns::render(label_index, size, rng))
}

fn smooth_background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let grid = 5usize;
    let mut coarse = [[[0f32; 5]; 5]; 3];
    for channel in coarse.iter_mut() {
        for row in channel.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(0.25..0.75);
            }
        }
    }
    let mut buf = Array3::zeros((3, size, size));
    let scale = (grid - 1) as f32 / (size.max(2) - 1) as f32;
    for y in 0..size {
        for x in 0..size {
            let fy = y as f32 * scale;
            let fx = x as f32 * scale;
            let (y0, x0) = (fy as usize, fx as usize);
            let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            for c in 0..3 {
                let top = coarse[c][y0][x0] * (1.0 - tx) + coarse[c][y0][x1] * tx;
                let bot = coarse[c][y1][x0] * (1.0 - tx) + coarse[c][y1][x1] * tx;
                buf[[c, y, x]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    for v in buf.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    buf
}

fn paste(dst: &mut Array3<f32>, src: &Array3<f32>, y0: isize, x0: isize, alpha: f32) {
    let size = dst.shape()[1] as isize;
    let ph = src.shape()[1] as isize;
    let pw = src.shape()[2] as isize;
    for sy in 0..ph {
        let dy = y0 + sy;
        if dy < 0 || dy >= size {
            continue;
        }
        for sx in 0..pw {
            let dx = x0 + sx;
            if dx < 0 || dx >= size {
                continue;
            }
            for c in 0..3 {
                let old = dst[[c, dy as usize, dx as usize]];
                dst[[c, dy as usize, dx as usize]] =
                    old * (1.0 - alpha) + src[[c, sy as usize, sx as usize]] * alpha;
            }
        }
    }
}

fn draw_scene_labels(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    for _ in 0..100 {
        let mut chosen: Vec<usize> = Vec::new();
        for (l, f) in config.label_frequencies.iter().enumerate() {
            if rng.gen_bool(f.clamp(0.0, 1.0)) {
                chosen.push(l);
            }
        }
        if chosen.is_empty() {
            continue;
        }
        while chosen.len() > config.patches_per_image {
            let drop = rng.gen_range(0..chosen.len());
            chosen.remove(drop);
        }
        return chosen;
    }
    // bounded rejection exhausted: force the most frequent label
    let argmax = config
        .label_frequencies
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    vec![argmax]
}

fn overlap_frac(a: (isize, isize, isize), b: (isize, isize, isize)) -> f64 {
    // rects as (y, x, side)
    let (ay, ax, asd) = a;
    let (by, bx, bsd) = b;
    let iy = (ay + asd).min(by + bsd) - ay.max(by);
    let ix = (ax + asd).min(bx + bsd) - ax.max(bx);
    if iy <= 0 || ix <= 0 {
        0.0
    } else {
        (iy * ix) as f64 / (asd.min(bsd).pow(2)) as f64
    }
}

fn compose_scene_inner(
    config: &SceneConfig,
    sample_index: usize,
    forced_distractor: Option<usize>,
) -> ImageSample {
    let size = config.image_size;
    let mut rng = sample_rng(config.seed, sample_index as u64);
    let labels = draw_scene_labels(config, &mut rng);

    let mut image = smooth_background(size, &mut rng);

    // unlabeled distractor textures, blended at reduced opacity
    let n_distractors = (config.background_clutter * 5.0).round() as usize;
    let n_classes = config.n_labels().min(patterns::PATTERN_COUNT);
    for _ in 0..n_distractors {
        let class = rng.gen_range(0..n_classes);
        let side = ((rng.gen_range(0.15..0.30) * size as f64) as usize).max(4);
        let tex = patterns::render(class, side, &mut rng);
        let y = rng.gen_range(-(side as isize) / 2..size as isize - side as isize / 2);
        let x = rng.gen_range(-(side as isize) / 2..size as isize - side as isize / 2);
        let alpha = rng.gen_range(0.35..0.6);
        paste(&mut image, &tex, y, x, alpha);
    }
    if let Some(class) = forced_distractor {
        let side = (size / 4).max(4);
        let tex = patterns::render(class, side, &mut rng);
        paste(&mut image, &tex, 0, 0, 0.5);
    }

    // labeled patches are pasted opaquely and never occluded by distractors
    let mut placed: Vec<(isize, isize, isize)> = Vec::new();
    for &label in &labels {
        let side = ((rng.gen_range(0.25..0.45) * size as f64) as usize).max(4);
        let tex = patterns::render(label, side, &mut rng);
        let mut best = (0isize, 0isize);
        for _attempt in 0..20 {
            let y = rng.gen_range(0..(size - side).max(1)) as isize;
            let x = rng.gen_range(0..(size - side).max(1)) as isize;
            best = (y, x);
            let rect = (y, x, side as isize);
            if placed.iter().all(|p| overlap_frac(*p, rect) < 0.3) {
                break;
            }
        }
        paste(&mut image, &tex, best.0, best.1, 1.0);
        placed.push((best.0, best.1, side as isize));
    }

    let mut target = vec![0u8; config.n_labels()];
    for &l in &labels {
        target[l] = 1;
    }
    ImageSample {
        id: format!("s{sample_index:06}"),
        image,
        target,
        split: Split::Train,
    }
}

/// Builds the scene for `sample_index` under `config`.
pub fn compose_scene(config: &SceneConfig, sample_index: usize) -> Result<ImageSample> {
    config.validate()?;
    Ok(compose_scene_inner(config, sample_index, None))
}

/// Test hook: compose with one extra known distractor class in the
/// background; the target must be unaffected.
pub fn compose_scene_with_distractor(
    config: &SceneConfig,
    sample_index: usize,
    distractor_class: usize,
) -> Result<ImageSample> {
    config.validate()?;
    Ok(compose_scene_inner(config, sample_index, Some(distractor_class)))
}

fn image_to_png_bytes(image: &Array3<f32>) -> Result<Vec<u8>> {
    let size = image.shape()[1] as u32;
    let mut raw = Vec::with_capacity((size * size * 3) as usize);
    for y in 0..size as usize {
        for x in 0..size as usize {
            for c in 0..3 {
                raw.push((image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(size, size, raw)
        .expect("raw buffer matches dimensions");
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: "<memory>".into(),
        source: e,
    })?;
    Ok(bytes)
}

/// Generates `n_samples` scenes under `out_dir` (PNG images plus manifest
/// files). Returns the manifest with all records tagged `train`; apply
/// [`split_dataset`] afterwards.
pub fn generate_dataset(
    config: &SceneConfig,
    n_samples: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    config.validate()?;
    if n_samples < 10 {
        return Err(Error::Config(format!(
            "n_samples must be at least 10, got {n_samples}"
        )));
    }
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let results: Vec<Result<ManifestRecord>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let sample = compose_scene_inner(config, i, None);
            let rel_path = format!("images/{}.png", sample.id);
            let path = out_dir.join(&rel_path);
            let bytes = image_to_png_bytes(&sample.image)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ManifestRecord {
                id: sample.id,
                image_path: rel_path,
                target: sample.target,
                split: Split::Train,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(n_samples);
    for r in results {
        records.push(r?);
    }

    let manifest = DatasetManifest {
        records,
        vocabulary: LabelVocabulary {
            names: DEFAULT_LABELS
                .iter()
                .take(config.n_labels())
                .map(|s| s.to_string())
                .collect(),
        },
        generation_config: config.clone(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = DatasetHeader {
            vocabulary: self.vocabulary.clone(),
            generation_config: self.generation_config.clone(),
        };
        let header_path = dir.join("dataset.json");
        let file = std::fs::File::create(&header_path).map_err(|e| Error::io(&header_path, e))?;
        serde_json::to_writer_pretty(file, &header)?;

        let manifest_path = dir.join("manifest.jsonl");
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        );
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io(&manifest_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header_path = dir.join("dataset.json");
        let header: DatasetHeader = serde_json::from_reader(
            std::fs::File::open(&header_path).map_err(|e| Error::io(&header_path, e))?,
        )?;
        let manifest_path = dir.join("manifest.jsonl");
        let file = std::fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            records,
            vocabulary: header.vocabulary,
            generation_config: header.generation_config,
        })
    }

    pub fn ids_for(&self, split: Split) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn record(&self, id: &str) -> Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }
}

/// Randomly partitions records into train/test with `|train| =
/// round(n * train_fraction)`, seeded by the generation config.
pub fn split_dataset(manifest: &DatasetManifest, train_fraction: f64) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be strictly inside (0, 1), got {train_fraction}"
        )));
    }
    let n = manifest.records.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "degenerate split: {n_train} train of {n} records"
        )));
    }
    let mut rng = sample_rng(manifest.generation_config.seed, u64::MAX - 7);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out = manifest.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.records[idx].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    Ok(out)
}

/// Loads a batch by id: images standardized per channel to `(x - 0.5) / 0.5`,
/// targets exactly as stored. Shapes `[b, 3, s, s]` and `[b, c]`.
pub fn load_batch(
    manifest: &DatasetManifest,
    dataset_root: impl AsRef<Path>,
    ids: &[String],
) -> Result<(Array4<f32>, Array2<f32>)> {
    let root = dataset_root.as_ref();
    let size = manifest.generation_config.image_size;
    let n_labels = manifest.vocabulary.len();
    let mut images = Array4::<f32>::zeros((ids.len(), 3, size, size));
    let mut targets = Array2::<f32>::zeros((ids.len(), n_labels));

    let records: Vec<&ManifestRecord> = ids
        .iter()
        .map(|id| manifest.record(id))
        .collect::<Result<_>>()?;

    let decoded: Vec<Result<Array3<f32>>> = records
        .par_iter()
        .map(|record| {
            let path = root.join(&record.image_path);
            load_image_standardized(&path, size).map_err(|e| Error::Sample {
                id: record.id.clone(),
                message: e.to_string(),
            })
        })
        .collect();

    for (i, (record, image)) in records.iter().zip(decoded).enumerate() {
        images.index_axis_mut(ndarray::Axis(0), i).assign(&image?);
        for (l, v) in record.target.iter().enumerate() {
            targets[[i, l]] = *v as f32;
        }
    }
    Ok((images, targets))
}

fn load_image_standardized(path: &PathBuf, expect_size: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    if img.width() as usize != expect_size || img.height() as usize != expect_size {
        return Err(Error::Shape(format!(
            "image {} is {}x{}, expected {expect_size}x{expect_size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut out = Array3::<f32>::zeros((3, expect_size, expect_size));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            out[[c, y as usize, x as usize]] = (v - 0.5) / 0.5;
        }
    }
    Ok(out)
}

/// Per-label counts and sample shares, plus the strict `share > 0.05`
/// majority set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: Vec<usize>,
    pub shares: Vec<f64>,
    pub majority: Vec<usize>,
    pub n_samples: usize,
}

pub const MAJORITY_SHARE_THRESHOLD: f64 = 0.05;

/// Distribution over all records (`split = None`) or one split.
pub fn label_distribution(
    manifest: &DatasetManifest,
    split: Option<Split>,
) -> Result<LabelDistribution> {
    let records: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect();
    if records.is_empty() {
        return Err(Error::Eval("empty manifest".into()));
    }
    let n_labels = manifest.vocabulary.len();
    let mut counts = vec![0usize; n_labels];
    for r in &records {
        for (l, v) in r.target.iter().enumerate() {
            if *v != 0 {
                counts[l] += 1;
            }
        }
    }
    let n_samples = records.len();
    let shares: Vec<f64> = counts.iter().map(|c| *c as f64 / n_samples as f64).collect();
    let majority = shares
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > MAJORITY_SHARE_THRESHOLD)
        .map(|(l, _)| l)
        .collect();
    Ok(LabelDistribution {
        counts,
        shares,
        majority,
        n_samples,
    })
}

/// In-memory image store for repeated epoch iteration.
pub struct ImageStore {
    images: HashMap<String, Array3<f32>>,
    targets: HashMap<String, Vec<f32>>,
    n_labels: usize,
    image_size: usize,
}

impl ImageStore {
    /// Preloads (standardized) images for the given ids.
    pub fn preload(
        manifest: &DatasetManifest,
        dataset_root: impl AsRef<Path>,
        ids: &[String],
    ) -> Result<Self> {
        let root = dataset_root.as_ref();
        let size = manifest.generation_config.image_size;
        let loaded: Vec<Result<(String, Array3<f32>, Vec<f32>)>> = ids
            .par_iter()
            .map(|id| {
                let record = manifest.record(id)?;
                let image = load_image_standardized(&root.join(&record.image_path), size)
                    .map_err(|e| Error::Sample {
                        id: id.clone(),
                        message: e.to_string(),
                    })?;
                let target = record.target.iter().map(|v| *v as f32).collect();
                Ok((id.clone(), image, target))
            })
            .collect();
        let mut images = HashMap::new();
        let mut targets = HashMap::new();
        for item in loaded {
            let (id, image, target) = item?;
            images.insert(id.clone(), image);
            targets.insert(id, target);
        }
        Ok(Self {
            images,
            targets,
            n_labels: manifest.vocabulary.len(),
            image_size: size,
        })
    }

    pub fn batch(&self, ids: &[String]) -> Result<(Array4<f32>, Array2<f32>)> {
        let mut images = Array4::<f32>::zeros((ids.len(), 3, self.image_size, self.image_size));
        let mut targets = Array2::<f32>::zeros((ids.len(), self.n_labels));
        for (i, id) in ids.iter().enumerate() {
            let img = self
                .images
                .get(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            images.index_axis_mut(ndarray::Axis(0), i).assign(img);
            for (l, v) in self.targets[id].iter().enumerate() {
                targets[[i, l]] = *v;
            }
        }
        Ok((images, targets))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocabulary_has_eleven_fixed_names() {
        let vocab = build_vocabulary();
        assert_eq!(vocab.len(), 11);
        assert_eq!(vocab.name(0), "Solid");
        assert_eq!(vocab.index_of("Tie Dye").unwrap(), 6);
        assert!(matches!(
            vocab.index_of("Velvet"),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn solid_patch_has_tiny_per_channel_variance() {
        let mut rng = sample_rng(42, 0);
        let patch = render_pattern_patch(0, 64, &mut rng).unwrap();
        for c in 0..3 {
            let plane = patch.index_axis(ndarray::Axis(0), c);
            let mean = plane.mean().unwrap();
            let var = plane.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / plane.len() as f32;
            assert!(var < 0.01, "channel {c} variance {var}");
        }
    }

    #[test]
    fn stripe_patch_alternates_bands_along_one_axis() {
        // oracle: count sign changes of centered line means along each axis
        let sign_changes = |means: &[f32]| {
            let avg = means.iter().sum::<f32>() / means.len() as f32;
            let mut changes = 0;
            let mut prev = 0.0f32;
            for m in means {
                let d = m - avg;
                if d.abs() > 1e-4 {
                    if prev != 0.0 && d.signum() != prev.signum() {
                        changes += 1;
                    }
                    prev = d;
                }
            }
            changes
        };
        for trial in 0..4 {
            let mut rng = sample_rng(7, trial);
            let patch = render_pattern_patch(3, 64, &mut rng).unwrap();
            let gray = |y: usize, x: usize| {
                (patch[[0, y, x]] + patch[[1, y, x]] + patch[[2, y, x]]) / 3.0
            };
            let row_means: Vec<f32> =
                (0..64).map(|y| (0..64).map(|x| gray(y, x)).sum::<f32>() / 64.0).collect();
            let col_means: Vec<f32> =
                (0..64).map(|x| (0..64).map(|y| gray(y, x)).sum::<f32>() / 64.0).collect();
            let best = sign_changes(&row_means).max(sign_changes(&col_means));
            assert!(best >= 3, "trial {trial}: only {best} alternations");
        }
    }

    #[test]
    fn identical_rng_streams_give_bit_identical_patches() {
        for label in 0..11 {
            let mut a = sample_rng(9, label as u64);
            let mut b = sample_rng(9, label as u64);
            let pa = render_pattern_patch(label, 32, &mut a).unwrap();
            let pb = render_pattern_patch(label, 32, &mut b).unwrap();
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn invalid_label_index_is_rejected() {
        let mut rng = sample_rng(1, 1);
        assert!(render_pattern_patch(11, 32, &mut rng).is_err());
    }

    fn small_config() -> SceneConfig {
        SceneConfig {
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn scenes_have_one_to_three_labels_and_are_deterministic() {
        let config = small_config();
        for i in 0..20 {
            let s = compose_scene(&config, i).unwrap();
            let pop: usize = s.target.iter().map(|v| *v as usize).sum();
            assert!((1..=3).contains(&pop), "popcount {pop}");
            assert_eq!(s.target.len(), 11);
        }
        let a = compose_scene(&config, 7).unwrap();
        let b = compose_scene(&config, 7).unwrap();
        assert_eq!(a.target, b.target);
        for (x, y) in a.image.iter().zip(b.image.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_clutter_changes_pixels_not_targets() {
        let mut plain = small_config();
        plain.background_clutter = 0.0;
        let mut cluttered = small_config();
        cluttered.background_clutter = 1.0;
        for i in 0..10 {
            let a = compose_scene(&plain, i).unwrap();
            let b = compose_scene(&cluttered, i).unwrap();
            // label draws precede background work on the same stream
            assert_eq!(a.target, b.target, "sample {i}");
        }
        let a = compose_scene(&plain, 3).unwrap();
        let b = compose_scene(&cluttered, 3).unwrap();
        assert!(a.image != b.image);
    }

    #[test]
    fn injected_distractor_never_touches_target() {
        let config = small_config();
        for i in 0..10 {
            let base = compose_scene(&config, i).unwrap();
            // pick a class absent from the target
            let absent = (0..11).find(|l| base.target[*l] == 0).unwrap();
            let with = compose_scene_with_distractor(&config, i, absent).unwrap();
            assert_eq!(base.target, with.target);
            assert!(base.image != with.image, "distractor must alter pixels");
        }
    }

    #[test]
    fn default_frequencies_produce_exactly_three_majorities() {
        let mut config = small_config();
        config.image_size = 16;
        config.seed = 5;
        let n = 4000;
        let mut counts = vec![0usize; 11];
        for i in 0..n {
            let s = compose_scene(&config, i).unwrap();
            for (l, v) in s.target.iter().enumerate() {
                counts[l] += *v as usize;
            }
        }
        let shares: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();
        let majorities = shares.iter().filter(|s| **s > 0.05).count();
        assert_eq!(majorities, 3, "shares: {shares:?}");

        // binomial bound against the analytic conditional share of label 0
        let f = &config.label_frequencies;
        let p_none: f64 = f.iter().map(|p| 1.0 - p).product();
        let p0 = f[0] / (1.0 - p_none);
        let sigma = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!(
            (shares[0] - p0).abs() <= 3.0 * sigma,
            "share {} vs conditional {p0} (sigma {sigma})",
            shares[0]
        );
    }

    #[test]
    fn generate_dataset_writes_images_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.image_size = 24;
        let manifest = generate_dataset(&config, 12, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 12);
        for record in &manifest.records {
            assert!(dir.path().join(&record.image_path).exists());
            assert!(record.target.iter().any(|v| *v > 0));
        }
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.records.len(), 12);
        for (a, b) in manifest.records.iter().zip(&loaded.records) {
            assert_eq!(a.target, b.target);
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&small_config(), 5, dir.path()).is_err());
    }

    #[test]
    fn load_batch_shapes_and_missing_file_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config();
        config.image_size = 24;
        let manifest = generate_dataset(&config, 10, dir.path()).unwrap();
        let ids: Vec<String> = manifest.records.iter().take(4).map(|r| r.id.clone()).collect();
        let (images, targets) = load_batch(&manifest, dir.path(), &ids).unwrap();
        assert_eq!(images.shape(), &[4, 3, 24, 24]);
        assert_eq!(targets.shape(), &[4, 11]);
        // standardized range
        assert!(images.iter().all(|v| (-1.0..=1.0).contains(v)));

        assert!(matches!(
            load_batch(&manifest, dir.path(), &["nope".to_string()]),
            Err(Error::UnknownId(_))
        ));

        let victim = &manifest.records[0];
        std::fs::remove_file(dir.path().join(&victim.image_path)).unwrap();
        let err = load_batch(&manifest, dir.path(), &[victim.id.clone()]).unwrap_err();
        match err {
            Error::Sample { id, .. } => assert_eq!(id, victim.id),
            other => panic!("expected Sample error, got {other:?}"),
        }
    }

    fn synthetic_manifest(n: usize) -> DatasetManifest {
        let vocab = build_vocabulary();
        let records = (0..n)
            .map(|i| {
                let mut target = vec![0u8; vocab.len()];
                target[i % vocab.len()] = 1;
                ManifestRecord {
                    id: format!("s{i:06}"),
                    image_path: format!("images/s{i:06}.png"),
                    target,
                    split: Split::Train,
                }
            })
            .collect();
        DatasetManifest {
            records,
            vocabulary: vocab,
            generation_config: SceneConfig::default(),
        }
    }

    #[test]
    fn split_fractions_match_requested_partition() {
        let manifest = synthetic_manifest(1000);
        let split = split_dataset(&manifest, 0.7).unwrap();
        let train = split.records.iter().filter(|r| r.split == Split::Train).count();
        let test = split.records.iter().filter(|r| r.split == Split::Test).count();
        assert_eq!((train, test), (700, 300));

        let manifest = synthetic_manifest(10);
        let split = split_dataset(&manifest, 0.5).unwrap();
        let train = split.records.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 5);

        assert!(split_dataset(&manifest, 1.0).is_err());
        assert!(split_dataset(&manifest, 0.0).is_err());
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let manifest = synthetic_manifest(100);
        let a = split_dataset(&manifest, 0.7).unwrap();
        let b = split_dataset(&manifest, 0.7).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.split, y.split);
        }
    }

    #[test]
    fn label_distribution_counts_and_majority_rule() {
        let vocab = LabelVocabulary {
            names: vec!["a".into(), "b".into(), "c".into()],
        };
        let mut records = Vec::new();
        for i in 0..100 {
            // label 0 in 60 samples, label 1 in exactly 5, label 2 never
            let target = vec![u8::from(i < 60), u8::from(i < 5), 0];
            records.push(ManifestRecord {
                id: format!("s{i}"),
                image_path: String::new(),
                target,
                split: Split::Train,
            });
        }
        let manifest = DatasetManifest {
            records,
            vocabulary: vocab,
            generation_config: SceneConfig {
                label_frequencies: vec![0.5, 0.3, 0.2],
                ..Default::default()
            },
        };
        let dist = label_distribution(&manifest, None).unwrap();
        assert_eq!(dist.counts, vec![60, 5, 0]);
        assert!((dist.shares[0] - 0.6).abs() < 1e-12);
        // exactly 5% is minority under the strict rule
        assert_eq!(dist.majority, vec![0]);
        assert_eq!(dist.shares[2], 0.0);

        let empty = DatasetManifest {
            records: vec![],
            vocabulary: build_vocabulary(),
            generation_config: SceneConfig::default(),
        };
        assert!(label_distribution(&empty, None).is_err());
    }
}
