//! Datasets: synthetic long-tailed multi-label images, label-CSV ingestion
//! for chest X-ray style data, deterministic splits, and batching with the
//! positive-only stage-1 filter.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// The 14 canonical class names, dataset spelling.
pub const CHESTXRAY14_CLASSES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

/// ImageNet channel statistics used to normalize ingested images.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Train/val/test fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            val: 0.10,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 || self.train < 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::Config(format!(
                "split: fractions {:?} must be nonnegative and sum to 1",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Clone)]
enum ImageSource {
    /// All images resident as one [M,3,H,W] tensor.
    InMemory(Arc<Tensor>),
    /// PNG files decoded, resized and normalized on access.
    LazyPng {
        dir: PathBuf,
        files: Vec<String>,
        size: usize,
    },
}

/// Images plus a multi-hot label matrix and (after assignment) split tags.
#[derive(Clone)]
pub struct Dataset {
    images: ImageSource,
    /// Row-major [M,K] multi-hot labels, values 0.0/1.0.
    labels: Vec<f64>,
    pub class_names: Vec<String>,
    split_tags: Option<Vec<Split>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        match &self.images {
            ImageSource::InMemory(t) => t.shape()[0],
            ImageSource::LazyPng { files, .. } => files.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// (channels, height, width) of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match &self.images {
            ImageSource::InMemory(t) => {
                let s = t.shape();
                (s[1], s[2], s[3])
            }
            ImageSource::LazyPng { size, .. } => (3, *size, *size),
        }
    }

    pub fn label(&self, item: usize) -> &[f64] {
        let k = self.num_classes();
        &self.labels[item * k..][..k]
    }

    pub fn has_positive(&self, item: usize) -> bool {
        self.label(item).iter().any(|&v| v == 1.0)
    }

    /// Pixel data of one item, length 3*H*W.
    pub fn load_image(&self, item: usize) -> Result<Vec<f64>> {
        match &self.images {
            ImageSource::InMemory(t) => {
                let per = t.shape()[1] * t.shape()[2] * t.shape()[3];
                Ok(t.data()[item * per..][..per].to_vec())
            }
            ImageSource::LazyPng { dir, files, size } => {
                load_png_normalized(&dir.join(&files[item]), *size)
            }
        }
    }

    /// Tag every item with a split via a seed-determined permutation.
    /// Train and val sizes round down; the remainder is test.
    pub fn assign_splits(&mut self, fractions: SplitFractions, seed: u64) -> Result<()> {
        fractions.validate()?;
        let m = self.len();
        let n_train = (fractions.train * m as f64).floor() as usize;
        let n_val = (fractions.val * m as f64).floor() as usize;
        let n_test = m - n_train - n_val;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::Config(format!(
                "split: {} items give an empty split ({}/{}/{})",
                m, n_train, n_val, n_test
            )));
        }
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = stream_rng(seed, Stream::Split);
        for i in (1..m).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut tags = vec![Split::Test; m];
        for (pos, &item) in perm.iter().enumerate() {
            tags[item] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        self.split_tags = Some(tags);
        Ok(())
    }

    pub fn split_tag(&self, item: usize) -> Option<Split> {
        self.split_tags.as_ref().map(|t| t[item])
    }

    /// Item indices of a split, ascending.
    pub fn split_indices(&self, split: Split) -> Result<Vec<usize>> {
        let tags = self
            .split_tags
            .as_ref()
            .ok_or_else(|| Error::Usage("dataset: splits not assigned yet".into()))?;
        Ok((0..self.len()).filter(|&i| tags[i] == split).collect())
    }

    /// Split indices, optionally dropping items without a single positive
    /// label (the stage-1 filter).
    pub fn stage_indices(&self, split: Split, positive_only: bool) -> Result<Vec<usize>> {
        let mut idx = self.split_indices(split)?;
        if positive_only {
            idx.retain(|&i| self.has_positive(i));
        }
        if idx.is_empty() {
            return Err(Error::Config(format!(
                "dataset: split {} is empty{}",
                split.as_str(),
                if positive_only { " after positive filter" } else { "" }
            )));
        }
        Ok(idx)
    }

    /// Classes without a positive item in the given split.
    pub fn uncovered_classes(&self, split: Split) -> Result<Vec<usize>> {
        let idx = self.split_indices(split)?;
        let k = self.num_classes();
        let mut covered = vec![false; k];
        for &i in &idx {
            for (c, &v) in self.label(i).iter().enumerate() {
                if v == 1.0 {
                    covered[c] = true;
                }
            }
        }
        Ok((0..k).filter(|&c| !covered[c]).collect())
    }

    /// Assemble tensors for the given items.
    pub fn materialize(&self, indices: &[usize]) -> Result<Batch> {
        let (c, h, w) = self.image_shape();
        let k = self.num_classes();
        let per = c * h * w;
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            x.extend(self.load_image(i)?);
            y.extend_from_slice(self.label(i));
        }
        Ok(Batch {
            x: Tensor::from_vec(&[indices.len(), c, h, w], x)?,
            y: Tensor::from_vec(&[indices.len(), k], y)?,
            indices: indices.to_vec(),
        })
    }

    /// Empirical positive count per class over the whole set.
    pub fn positives_per_class(&self) -> Vec<usize> {
        let k = self.num_classes();
        let mut counts = vec![0usize; k];
        for i in 0..self.len() {
            for (c, &v) in self.label(i).iter().enumerate() {
                if v == 1.0 {
                    counts[c] += 1;
                }
            }
        }
        counts
    }
}

/// One materialized mini-batch.
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub indices: Vec<usize>,
}

/// Chunk (optionally shuffled) indices into batches; every chunk has
/// exactly `batch_size` items except possibly the last of the epoch.
pub fn epoch_index_batches(
    indices: &[usize],
    batch_size: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    if let Some(rng) = rng {
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ── synthetic generation ────────────────────────────────────────────────

/// Synthetic long-tailed dataset parameters. Class prevalence decays
/// geometrically: p_k = head_prevalence * tail_ratio^(k-1).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_images: usize,
    pub head_prevalence: f64,
    pub tail_ratio: f64,
    pub image_size: usize,
    /// Blob size range across classes (standard deviation in pixels).
    pub blob_scale_min: f64,
    pub blob_scale_max: f64,
    /// Texture stripe frequency range across classes.
    pub texture_freq_min: f64,
    pub texture_freq_max: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 14,
            num_images: 20_000,
            head_prevalence: 0.5,
            tail_ratio: 0.7,
            image_size: 16,
            blob_scale_min: 1.5,
            blob_scale_max: 4.5,
            texture_freq_min: 0.5,
            texture_freq_max: 2.5,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn prevalence(&self, class: usize) -> f64 {
        self.head_prevalence * self.tail_ratio.powi(class as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_images == 0 || self.image_size < 4 {
            return Err(Error::Config("synth: degenerate sizes".into()));
        }
        if !(0.0..=1.0).contains(&self.head_prevalence) || self.head_prevalence == 0.0 {
            return Err(Error::Config("synth: head_prevalence must be in (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.tail_ratio) || self.tail_ratio == 0.0 {
            return Err(Error::Config("synth: tail_ratio must be in (0,1]".into()));
        }
        let p_last = self.prevalence(self.num_classes - 1);
        if p_last < 5.0 / self.num_images as f64 {
            return Err(Error::Config(format!(
                "synth: rarest class prevalence {:.6} gives fewer than 5 expected positives \
                 over {} images",
                p_last, self.num_images
            )));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Config("synth: noise_level must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-class rendering attributes, a deterministic function of the class
/// index and the configured ranges.
struct ClassStyle {
    scale_u: f64,
    scale_v: f64,
    orientation: f64,
    frequency: f64,
    color: [f64; 3],
}

fn class_style(cfg: &SynthConfig, class: usize) -> ClassStyle {
    let k = cfg.num_classes;
    let frac = if k > 1 { class as f64 / (k - 1) as f64 } else { 0.0 };
    let scale = cfg.blob_scale_min + frac * (cfg.blob_scale_max - cfg.blob_scale_min);
    let freq = cfg.texture_freq_max - frac * (cfg.texture_freq_max - cfg.texture_freq_min);
    let angle = std::f64::consts::PI * class as f64 / k as f64;
    let hue = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
    let third = 2.0 * std::f64::consts::PI / 3.0;
    ClassStyle {
        scale_u: scale,
        scale_v: scale * 0.6,
        orientation: angle,
        frequency: freq,
        color: [
            0.5 + 0.5 * hue.cos(),
            0.5 + 0.5 * (hue - third).cos(),
            0.5 + 0.5 * (hue + third).cos(),
        ],
    }
}

/// Generate a long-tailed multi-label blob dataset. Labels are sampled
/// independently per class at the configured prevalence; each positive label
/// renders one position-randomized anisotropic blob with class-specific
/// size, orientation, stripe texture and color. Deterministic in the seed.
/// Every class is guaranteed at least one positive item overall.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (m, k, s) = (cfg.num_images, cfg.num_classes, cfg.image_size);
    let mut rng = stream_rng(cfg.seed, Stream::DataGen);

    let mut labels = vec![0.0f64; m * k];
    for i in 0..m {
        for c in 0..k {
            if rng.gen::<f64>() < cfg.prevalence(c) {
                labels[i * k + c] = 1.0;
            }
        }
    }
    // coverage guarantee: force one positive for any class that drew none
    for c in 0..k {
        if !(0..m).any(|i| labels[i * k + c] == 1.0) {
            let i = rng.gen_range(0..m);
            labels[i * k + c] = 1.0;
        }
    }

    let styles: Vec<ClassStyle> = (0..k).map(|c| class_style(cfg, c)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pixels = vec![0.0f64; m * 3 * s * s];
    for i in 0..m {
        let img = &mut pixels[i * 3 * s * s..][..3 * s * s];
        for c in 0..k {
            if labels[i * k + c] != 1.0 {
                continue;
            }
            let st = &styles[c];
            let margin = 0.2 * s as f64;
            let cx = rng.gen_range(margin..s as f64 - margin);
            let cy = rng.gen_range(margin..s as f64 - margin);
            let amplitude = rng.gen_range(0.8..1.2);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let (sin_o, cos_o) = st.orientation.sin_cos();
            for py in 0..s {
                for px in 0..s {
                    let dx = px as f64 - cx;
                    let dy = py as f64 - cy;
                    let u = dx * cos_o + dy * sin_o;
                    let v = -dx * sin_o + dy * cos_o;
                    let bump =
                        (-0.5 * ((u / st.scale_u).powi(2) + (v / st.scale_v).powi(2))).exp();
                    if bump < 1e-6 {
                        continue;
                    }
                    let tex = 1.0 + 0.4 * (st.frequency * u + phase).sin();
                    let value = amplitude * bump * tex;
                    for ch in 0..3 {
                        img[(ch * s + py) * s + px] += value * st.color[ch];
                    }
                }
            }
        }
        if cfg.noise_level > 0.0 {
            for v in img.iter_mut() {
                *v += cfg.noise_level * normal.sample(&mut rng);
            }
        }
    }

    Ok(Dataset {
        images: ImageSource::InMemory(Arc::new(Tensor::from_vec(&[m, 3, s, s], pixels)?)),
        labels,
        class_names: (0..k).map(|c| format!("class_{:02}", c)).collect(),
        split_tags: None,
    })
}

// ── export / import ─────────────────────────────────────────────────────

/// Write a dataset directory: `images.mams` (one [M,3,H,W] blob) plus
/// `labels.csv` (index column followed by one 0/1 column per class).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (c, h, w) = ds.image_shape();
    let per = c * h * w;
    let mut pixels = Vec::with_capacity(ds.len() * per);
    for i in 0..ds.len() {
        pixels.extend(ds.load_image(i)?);
    }
    let tensor = Tensor::from_vec(&[ds.len(), c, h, w], pixels)?;
    let mut f = fs::File::create(dir.join("images.mams"))?;
    tensor.write_to(&mut f)?;

    let mut out = String::new();
    out.push_str("index");
    for name in &ds.class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&i.to_string());
        for &v in ds.label(i) {
            out.push(',');
            out.push(if v == 1.0 { '1' } else { '0' });
        }
        out.push('\n');
    }
    let mut f = fs::File::create(dir.join("labels.csv"))?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut f = fs::File::open(dir.join("images.mams"))?;
    let tensor = Tensor::read_from(&mut f)?;
    if tensor.shape().len() != 4 {
        return Err(Error::Format("dataset: images.mams must be rank 4".into()));
    }
    let m = tensor.shape()[0];

    let mut rdr = csv::Reader::from_path(dir.join("labels.csv"))
        .map_err(|e| Error::Format(format!("dataset: labels.csv: {}", e)))?;
    let class_names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format(format!("dataset: labels.csv headers: {}", e)))?
        .iter()
        .skip(1)
        .map(|s| s.to_string())
        .collect();
    let k = class_names.len();
    let mut labels = vec![0.0f64; m * k];
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("dataset: labels.csv: {}", e)))?;
        if i >= m {
            return Err(Error::Format("dataset: more label rows than images".into()));
        }
        for c in 0..k {
            let field = record
                .get(c + 1)
                .ok_or_else(|| Error::Format("dataset: short label row".into()))?;
            labels[i * k + c] = match field {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(Error::Format(format!(
                        "dataset: label value '{}' is not 0/1",
                        other
                    )))
                }
            };
        }
        rows += 1;
    }
    if rows != m {
        return Err(Error::Format(format!(
            "dataset: {} label rows for {} images",
            rows, m
        )));
    }
    Ok(Dataset {
        images: ImageSource::InMemory(Arc::new(tensor)),
        labels,
        class_names,
        split_tags: None,
    })
}

// ── chest X-ray label ingestion ─────────────────────────────────────────

/// Ingestion side effects worth surfacing.
#[derive(Debug, Default, Clone)]
pub struct IngestReport {
    pub rows: usize,
    /// (token, occurrences) for finding names outside the class list.
    pub unknown_tokens: Vec<(String, usize)>,
    /// Items dropped because their image file was missing.
    pub dropped_missing_images: usize,
}

/// Parse a ChestX-ray14-style label CSV ("Image Index", "Finding Labels"
/// with pipe-separated names, "No Finding" for all-negative) into a dataset.
/// When `image_dir` is given, rows whose file is absent are dropped and
/// images load lazily (grayscale PNG -> 3 channels, bilinear resize to
/// `image_size`, ImageNet normalization).
pub fn ingest_chestxray14(
    label_csv: &Path,
    image_dir: Option<&Path>,
    class_list: &[String],
    image_size: usize,
) -> Result<(Dataset, IngestReport)> {
    let mut rdr = csv::Reader::from_path(label_csv)
        .map_err(|e| Error::Input(format!("ingest: {}: {}", label_csv.display(), e)))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Input(format!("ingest: headers: {}", e)))?
        .clone();
    let find_col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("ingest: missing column '{}'", name)))
    };
    let img_col = find_col("Image Index")?;
    let label_col = find_col("Finding Labels")?;

    let mut report = IngestReport::default();
    let mut files = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Input(format!("ingest: row: {}", e)))?;
        report.rows += 1;
        let file = record
            .get(img_col)
            .ok_or_else(|| Error::Input("ingest: short row".into()))?
            .to_string();
        if let Some(dir) = image_dir {
            if !dir.join(&file).is_file() {
                report.dropped_missing_images += 1;
                continue;
            }
        }
        let mut row = vec![0.0f64; class_list.len()];
        let findings = record
            .get(label_col)
            .ok_or_else(|| Error::Input("ingest: short row".into()))?;
        for token in findings.split('|') {
            let token = token.trim();
            if token.is_empty() || token == "No Finding" {
                continue;
            }
            match class_list.iter().position(|c| c == token) {
                Some(c) => row[c] = 1.0,
                None => {
                    match report.unknown_tokens.iter_mut().find(|(t, _)| t == token) {
                        Some((_, n)) => *n += 1,
                        None => report.unknown_tokens.push((token.to_string(), 1)),
                    }
                }
            }
        }
        files.push(file);
        labels.extend(row);
    }

    let images = match image_dir {
        Some(dir) => ImageSource::LazyPng {
            dir: dir.to_path_buf(),
            files,
            size: image_size,
        },
        // labels-only ingestion keeps zero-pixel placeholders in memory
        None => ImageSource::LazyPng {
            dir: PathBuf::new(),
            files,
            size: image_size,
        },
    };
    Ok((
        Dataset {
            images,
            labels,
            class_names: class_list.to_vec(),
            split_tags: None,
        },
        report,
    ))
}

fn load_png_normalized(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("image {}: {}", path.display(), e)))?;
    let gray = img.to_luma8();
    let resized = image::imageops::resize(
        &gray,
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = vec![0.0f64; 3 * size * size];
    for (i, px) in resized.pixels().enumerate() {
        let v = px.0[0] as f64 / 255.0;
        for ch in 0..3 {
            out[ch * size * size + i] = (v - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
        }
    }
    Ok(out)
}
