//! Deterministic synthetic corpora for tests, demos and smoke runs.
//!
//! Each class gets its own hue and stripe orientation, perturbed per image
//! by seeded jitter and noise, so the classes are separable but no two
//! images are identical.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{build_classifier, Classifier, ClassifierError, HeadConfig, TrainConfig, WeightsSource};
use crate::dataset::ImageSet;
use crate::export::{export_portable, PortableArtifact};
use crate::labels::ClassLabel;

const BASE: [[f64; 3]; 6] = [
    [150.0, 110.0, 70.0],
    [70.0, 160.0, 120.0],
    [140.0, 140.0, 150.0],
    [225.0, 225.0, 205.0],
    [60.0, 100.0, 210.0],
    [90.0, 70.0, 60.0],
];

pub fn synthetic_image(label: ClassLabel, index: usize, width: u32, height: u32) -> RgbImage {
    let k = label.index();
    let mut rng = ChaCha8Rng::seed_from_u64(((k as u64) << 32) ^ index as u64 ^ 0x5eed);
    let angle = k as f64 * std::f64::consts::PI / 6.0 + rng.random_range(-0.15..0.15);
    let freq = 0.08 + 0.03 * k as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = RgbImage::new(width, height);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let t = (x as f64 * ca + y as f64 * sa) * freq * 64.0 / width.max(1) as f64 + phase;
        let stripe = 35.0 * t.sin();
        let noise = rng.random_range(-12.0..12.0);
        *px = Rgb(std::array::from_fn(|c| (BASE[k][c] + tint[c] + stripe + noise).clamp(0.0, 255.0) as u8));
    }
    img
}

/// Writes `per_class` PNG images into each class directory under `root`.
pub fn write_corpus(root: &Path, per_class: usize, width: u32, height: u32) -> std::io::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for label in ClassLabel::ALL {
        let dir = root.join(label.name());
        std::fs::create_dir_all(&dir)?;
        for i in 0..per_class {
            let path = dir.join(format!("{}{:03}.png", label.name(), i));
            synthetic_image(label, i, width, height).save(&path).map_err(std::io::Error::other)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Encodes a synthetic image as PNG bytes, for upload tests.
pub fn png_bytes(label: ClassLabel, index: usize, width: u32, height: u32) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    synthetic_image(label, index, width, height)
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory png");
    out.into_inner()
}

/// A random-init classifier given one short epoch on six synthetic images,
/// enough to calibrate batch norm and break the head's symmetry.
pub fn quick_classifier(backbone_id: &str, seed: u64) -> Result<Classifier<f32>, ClassifierError> {
    let mut model = build_classifier::<f32>(backbone_id, HeadConfig::default(), &WeightsSource::Random, seed)?;
    let (h, w) = model.backbone().input_size;
    let set = ImageSet {
        images: ClassLabel::ALL.iter().map(|l| synthetic_image(*l, 0, w as u32, h as u32)).collect(),
        labels: ClassLabel::ALL.to_vec(),
    };
    let cfg = TrainConfig { max_epochs: 1, batch_size: 6, learning_rate: 1e-3, ..TrainConfig::default() };
    model.fit(&set, &ImageSet::default(), &cfg, |_| {})?;
    Ok(model)
}

/// Exports a [`quick_classifier`] to `path` for serving and prediction tests.
pub fn quick_artifact(path: &Path, backbone_id: &str, seed: u64) -> Result<PortableArtifact, Box<dyn std::error::Error>> {
    let model = quick_classifier(backbone_id, seed)?;
    Ok(export_portable(&model, path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = synthetic_image(ClassLabel::Glass, 3, 32, 24);
        assert_eq!(a, synthetic_image(ClassLabel::Glass, 3, 32, 24));
        assert_ne!(a, synthetic_image(ClassLabel::Glass, 4, 32, 24));
        assert_ne!(a, synthetic_image(ClassLabel::Metal, 3, 32, 24));
        assert_eq!(a.dimensions(), (32, 24));
    }

    #[test]
    fn corpus_layout_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2, 16, 16).unwrap();
        let corpus = crate::dataset::load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.report.per_class, [2; 6]);
        assert_eq!(corpus.images[0].id, "cardboard/cardboard000.png");
    }
}
