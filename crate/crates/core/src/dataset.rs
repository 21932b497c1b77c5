//! Corpus ingestion, deterministic splitting and image preprocessing.
//!
//! A corpus is a directory with one subdirectory per class:
//!
//! ```text
//! <root>/{cardboard,glass,metal,paper,plastic,trash}/*.{jpg,jpeg,png}
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneEntry, Normalization};
use crate::labels::{ClassLabel, NUM_CLASSES};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("class directory `{0}` is missing")]
    MissingClassDirectory(ClassLabel),
    #[error("unexpected directory `{0}` in corpus root")]
    UnknownDirectory(String),
    #[error("corpus contains no decodable images")]
    EmptyCorpus,
    #[error("invalid split ratios {0:?}: each must be in [0, 1] and the sum at most 1")]
    InvalidRatios([f64; 3]),
    #[error("cannot decode image {path}: {source}")]
    DecodeFailure {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("split manifest refers to `{0}`, which is not a valid corpus id")]
    BadManifestEntry(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// One corpus image. `id` is the path relative to the corpus root with `/`
/// separators, e.g. `glass/glass12.jpg`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub path: PathBuf,
    pub label: ClassLabel,
}

impl LabeledImage {
    pub fn decode(&self) -> Result<DynamicImage, DatasetError> {
        decode_path(&self.path)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusReport {
    pub per_class: [usize; NUM_CLASSES],
    /// `(id, reason)` for image files that failed to decode.
    pub skipped: Vec<(String, String)>,
}

impl CorpusReport {
    pub fn total(&self) -> usize {
        self.per_class.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub images: Vec<LabeledImage>,
    pub report: CorpusReport,
}

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        .unwrap_or(false)
}

fn is_hidden(name: &str) -> bool {
    name.starts_with('.')
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DatasetError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if is_hidden(&name) {
            continue;
        }
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Scans a class-per-directory corpus. Files that fail to decode are
/// skipped and listed in the report.
pub fn load_corpus(root: impl AsRef<Path>) -> Result<Corpus, DatasetError> {
    let root = root.as_ref();
    let mut present = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if is_hidden(&name) || !entry.path().is_dir() {
            continue;
        }
        match name.parse::<ClassLabel>() {
            Ok(label) => present.push(label),
            Err(_) => return Err(DatasetError::UnknownDirectory(name)),
        }
    }
    if let Some(missing) = ClassLabel::ALL.into_iter().find(|l| !present.contains(l)) {
        return Err(DatasetError::MissingClassDirectory(missing));
    }

    let mut images = Vec::new();
    let mut report = CorpusReport::default();
    for label in ClassLabel::ALL {
        let mut files = Vec::new();
        collect_files(&root.join(label.name()), &mut files)?;
        for path in files {
            let id = relative_id(root, &path);
            match decode_path(&path) {
                Ok(_) => {
                    report.per_class[label.index()] += 1;
                    images.push(LabeledImage { id, path, label });
                }
                Err(e) => {
                    log::warn!("skipping {id}: {e}");
                    report.skipped.push((id, e.to_string()));
                }
            }
        }
    }
    if images.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Corpus { root: root.to_path_buf(), images, report })
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Train/test/validation fractions. Whatever the three leave unassigned
/// goes to training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.60, test: 0.13, validation: 0.17 }
    }
}

impl SplitRatios {
    pub fn new(train: f64, test: f64, validation: f64) -> Self {
        Self { train, test, validation }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.test, self.validation]
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let r = self.as_array();
        let ok = r.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && r.iter().sum::<f64>() <= 1.0 + 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::InvalidRatios(r))
        }
    }

    /// `(train, test, validation)` counts for `n` items.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let part = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).min(n);
        let test = part(self.test);
        let validation = part(self.validation).min(n - test);
        (n - test - validation, test, validation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub stratified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
    Validation,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "validation" | "val" => Ok(Self::Validation),
            other => Err(format!("unknown split `{other}` (expected train, test or validation)")),
        }
    }
}

impl DatasetSplits {
    pub fn get(&self, which: SplitName) -> &[LabeledImage] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
            SplitName::Validation => &self.validation,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[LabeledImage]| v.iter().map(|i| i.id.clone()).collect();
        SplitManifest {
            seed: self.seed,
            ratios: self.ratios.as_array(),
            stratified: self.stratified,
            train: ids(&self.train),
            test: ids(&self.test),
            validation: ids(&self.validation),
        }
    }
}

pub fn class_counts(images: &[LabeledImage]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for i in images {
        counts[i.label.index()] += 1;
    }
    counts
}

/// Seeded Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Deterministic partition. Items are sorted by id, shuffled with the seed,
/// then the first `floor(N * test)` go to test, the next
/// `floor(N * validation)` to validation and the rest to train. With
/// `stratified`, the same arithmetic is applied within each class.
pub fn split_corpus(
    corpus: &[LabeledImage],
    ratios: SplitRatios,
    seed: u64,
    stratified: bool,
) -> Result<DatasetSplits, DatasetError> {
    ratios.validate()?;
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = DatasetSplits {
        train: Vec::new(),
        test: Vec::new(),
        validation: Vec::new(),
        seed,
        ratios,
        stratified,
    };
    let groups: Vec<Vec<LabeledImage>> = if stratified {
        ClassLabel::ALL
            .iter()
            .map(|l| corpus.iter().filter(|i| i.label == *l).cloned().collect())
            .collect()
    } else {
        vec![corpus.to_vec()]
    };
    for mut group in groups {
        group.sort_by(|a, b| a.id.cmp(&b.id));
        shuffle(&mut group, &mut rng);
        let (_, n_test, n_val) = ratios.counts(group.len());
        let mut rest = group.into_iter();
        splits.test.extend(rest.by_ref().take(n_test));
        splits.validation.extend(rest.by_ref().take(n_val));
        splits.train.extend(rest);
    }
    Ok(splits)
}

/// Serialized split, sufficient to reproduce the partition exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    #[serde(default)]
    pub stratified: bool,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub validation: Vec<String>,
}

impl SplitManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Rebuilds the splits against a corpus root; labels come from the
    /// first path component of each id.
    pub fn resolve(&self, root: impl AsRef<Path>) -> Result<DatasetSplits, DatasetError> {
        let root = root.as_ref();
        let to_images = |ids: &[String]| -> Result<Vec<LabeledImage>, DatasetError> {
            ids.iter()
                .map(|id| {
                    let label = id
                        .split('/')
                        .next()
                        .and_then(|c| c.parse::<ClassLabel>().ok())
                        .ok_or_else(|| DatasetError::BadManifestEntry(id.clone()))?;
                    Ok(LabeledImage { id: id.clone(), path: root.join(id), label })
                })
                .collect()
        };
        Ok(DatasetSplits {
            train: to_images(&self.train)?,
            test: to_images(&self.test)?,
            validation: to_images(&self.validation)?,
            seed: self.seed,
            ratios: SplitRatios::new(self.ratios[0], self.ratios[1], self.ratios[2]),
            stratified: self.stratified,
        })
    }
}

/// Normalized image in height x width x channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub value_range: (f64, f64),
}

impl<T: Scalar> ImageTensor<T> {
    pub fn constant(height: usize, width: usize, v: T, value_range: (f64, f64)) -> Self {
        Self { height, width, data: vec![v; height * width * 3], value_range }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    /// Copies into channel-major (CHW) order.
    pub fn to_chw(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); plane * 3];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }
}

pub fn decode_path(path: &Path) -> Result<DynamicImage, DatasetError> {
    let reader = image::ImageReader::open(path).map_err(io_err(path))?;
    let reader = reader.with_guessed_format().map_err(io_err(path))?;
    reader.decode().map_err(|source| DatasetError::DecodeFailure { path: path.to_path_buf(), source })
}

pub fn decode_bytes(bytes: &[u8]) -> Result<DynamicImage, image::ImageError> {
    image::load_from_memory(bytes)
}

/// Converts to RGB and resizes (bilinear) to the backbone input size.
/// Images already at that size are passed through untouched.
pub fn resize_for(image: &DynamicImage, entry: &BackboneEntry) -> RgbImage {
    let (h, w) = entry.input_size;
    let rgb = image.to_rgb8();
    if rgb.dimensions() == (w as u32, h as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
    }
}

pub fn normalize<T: Scalar>(rgb: &RgbImage, norm: Normalization) -> ImageTensor<T> {
    let (w, h) = rgb.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in rgb.pixels() {
        data.extend(norm.apply(px.0).map(T::from_f64_lossy));
    }
    ImageTensor { height: h as usize, width: w as usize, data, value_range: norm.value_range() }
}

pub fn preprocess_image<T: Scalar>(image: &DynamicImage, entry: &BackboneEntry) -> ImageTensor<T> {
    normalize(&resize_for(image, entry), entry.normalization)
}

/// Decode, resize and normalize one corpus image for a registered backbone.
pub fn preprocess<T: Scalar>(image: &LabeledImage, backbone_id: &str) -> Result<ImageTensor<T>, DatasetError> {
    let entry = backbone::lookup(backbone_id).ok_or_else(|| DatasetError::UnknownBackbone(backbone_id.to_string()))?;
    Ok(preprocess_image(&image.decode()?, entry))
}

/// Decoded and resized images kept in memory as 8-bit RGB, normalized on demand.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub images: Vec<RgbImage>,
    pub labels: Vec<ClassLabel>,
}

impl ImageSet {
    pub fn load(items: &[LabeledImage], entry: &BackboneEntry) -> Result<Self, DatasetError> {
        let mut set = ImageSet::default();
        for item in items {
            set.images.push(resize_for(&item.decode()?, entry));
            set.labels.push(item.label);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> HashMap<ClassLabel, usize> {
        let mut m = HashMap::new();
        for l in &self.labels {
            *m.entry(*l).or_default() += 1;
        }
        m
    }
}
