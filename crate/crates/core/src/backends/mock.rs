//! Deterministic stand-ins for the image-side models.

use image::{Rgb, RgbImage};

use super::{ControlExtractorBackend, FeatureExtractor, GeneratorBackend, ImageTextScorer, PerceptualDistance};
use crate::control::{luma, threshold_gray, ControlMap, ControlType, Payload};
use crate::digest::{image_digest, unit_hash};
use crate::error::BackendError;

pub use super::policy::MockPolicy;
pub use super::{ScriptedOracle, SyntheticOracle};

/// Hashes (image digest, text) onto a stable value in [0, 1).
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer;

impl ImageTextScorer for MockScorer {
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError> {
        Ok(unit_hash(&[&image_digest(image), text.as_bytes()]))
    }

    fn raw_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

/// Scorer backed by a closure; handy for crafting score tables in tests.
pub struct FnScorer<F> {
    f: F,
    range: (f64, f64),
}

impl<F> FnScorer<F>
where
    F: Fn(&RgbImage, &str) -> f64 + Send + Sync,
{
    pub fn new(range: (f64, f64), f: F) -> Self {
        FnScorer { f, range }
    }
}

impl<F> ImageTextScorer for FnScorer<F>
where
    F: Fn(&RgbImage, &str) -> f64 + Send + Sync,
{
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError> {
        Ok((self.f)(image, text))
    }

    fn raw_range(&self) -> (f64, f64) {
        self.range
    }
}

/// Paints the control map's layout in a prompt-dependent tint with a little
/// seeded noise. Output dimensions always match the control map.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockGenerator;

impl GeneratorBackend for MockGenerator {
    fn generate(&self, prompt: &str, control: &ControlMap, seed: u64) -> Result<RgbImage, BackendError> {
        let gray = control.to_gray();
        let tint: [f64; 3] = [0u8, 1, 2].map(|c| unit_hash(&[prompt.as_bytes(), &[c]]) * 255.0);
        let seed_bytes = seed.to_le_bytes();
        Ok(RgbImage::from_fn(control.width(), control.height(), |x, y| {
            let g = gray.get_pixel(x, y)[0] as f64;
            let noise = (unit_hash(&[&seed_bytes, &x.to_le_bytes(), &y.to_le_bytes()]) - 0.5) * 16.0;
            Rgb(tint.map(|t| (0.75 * g + 0.25 * t + noise).round().clamp(0.0, 255.0) as u8))
        }))
    }
}

/// Mean absolute channel difference scaled to [0, 1].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockPerceptual;

impl PerceptualDistance for MockPerceptual {
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, BackendError> {
        if a.dimensions() != b.dimensions() {
            return Err(BackendError::malformed(format!("perceptual distance on {:?} vs {:?}", a.dimensions(), b.dimensions())));
        }
        let n = a.as_raw().len().max(1) as f64;
        let total: u64 = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y) as u64).sum();
        Ok(total as f64 / (255.0 * n))
    }
}

/// Luma-based extractor: binary types threshold at 128, DEPTH returns luma,
/// SEG quantizes luma into `seg_classes` bands.
#[derive(Debug, Clone, Copy)]
pub struct MockExtractor {
    pub seg_classes: u32,
}

impl Default for MockExtractor {
    fn default() -> Self {
        MockExtractor { seg_classes: 4 }
    }
}

impl ControlExtractorBackend for MockExtractor {
    fn extract(&self, image: &RgbImage, control_type: ControlType) -> Result<ControlMap, BackendError> {
        let (w, h) = image.dimensions();
        let y = luma(image).into_raw();
        let wrap = |r: crate::error::Result<ControlMap>| r.map_err(|e| BackendError::malformed(e.to_string()));
        match control_type {
            ControlType::Depth => wrap(ControlMap::new(control_type, w, h, Payload::Gray(y))),
            ControlType::Seg => {
                let k = self.seg_classes.max(1);
                let data = y.iter().map(|&v| (v as u32 * k / 256).min(k - 1)).collect();
                wrap(ControlMap::new(control_type, w, h, Payload::Labels { data, class_count: k }))
            }
            _ => {
                let gray = image::GrayImage::from_raw(w, h, y).expect("luma dimensions");
                wrap(threshold_gray(&gray, 128, control_type))
            }
        }
    }
}

/// Fixed-dimension features: per-bin mean intensity where pixel `i` falls
/// into bin `i mod d`.
#[derive(Debug, Clone, Copy)]
pub struct MockFeatures {
    dim: usize,
}

impl MockFeatures {
    pub fn new(dim: usize) -> Self {
        MockFeatures { dim: dim.max(1) }
    }
}

impl FeatureExtractor for MockFeatures {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>, BackendError> {
        let mut sums = vec![0.0; self.dim];
        let mut counts = vec![0usize; self.dim];
        for (i, p) in image.pixels().enumerate() {
            let b = i % self.dim;
            sums[b] += p.0.iter().map(|&c| c as f64).sum::<f64>() / (3.0 * 255.0);
            counts[b] += 1;
        }
        Ok(sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect())
    }
}

/// Feature extractor backed by a closure.
pub struct FnFeatures<F> {
    dim: usize,
    f: F,
}

impl<F> FnFeatures<F>
where
    F: Fn(&RgbImage) -> Vec<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnFeatures { dim, f }
    }
}

impl<F> FeatureExtractor for FnFeatures<F>
where
    F: Fn(&RgbImage) -> Vec<f64> + Send + Sync,
{
    fn dimension(&self) -> usize {
        self.dim
    }

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>, BackendError> {
        let v = (self.f)(image);
        if v.len() != self.dim {
            return Err(BackendError::malformed(format!("expected {} features, got {}", self.dim, v.len())));
        }
        Ok(v)
    }
}
