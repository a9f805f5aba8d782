//! Conditional-consistency metrics and the Fréchet distance.

use std::collections::BTreeSet;
use std::path::Path;

use image::{GrayImage, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::backends::{ControlExtractorBackend, FeatureExtractor};
use crate::control::{ControlMap, ControlType, Payload};
use crate::curation::Provenance;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 255.0 }
    }
}

fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("dimension mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w1: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let mut w: Vec<f64> = w1.iter().flat_map(|a| w1.iter().map(move |b| a * b)).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Mean local SSIM over all positions where the Gaussian window fits.
pub fn ssim(a: &GrayImage, b: &GrayImage, params: &SsimParams) -> Result<f64> {
    same_dims(a.dimensions(), b.dimensions())?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    let n = params.window;
    if n == 0 || w < n || h < n {
        return Err(Error::invalid(format!("image {w}x{h} is smaller than the {n}px window")));
    }
    let win = gaussian_window(n, params.sigma);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let (pa, pb) = (a.as_raw(), b.as_raw());
    let (nx, ny) = (w - n + 1, h - n + 1);
    let local = par::map_range(nx * ny, |p| {
        let (x0, y0) = (p % nx, p / nx);
        let patch = |i: usize| (y0 + i / n) * w + x0 + i % n;
        let (mut ma, mut mb) = (0.0, 0.0);
        for (i, wt) in win.iter().enumerate() {
            ma += wt * pa[patch(i)] as f64;
            mb += wt * pb[patch(i)] as f64;
        }
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for (i, wt) in win.iter().enumerate() {
            let da = pa[patch(i)] as f64 - ma;
            let db = pb[patch(i)] as f64 - mb;
            va += wt * da * da;
            vb += wt * db * db;
            cov += wt * da * db;
        }
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    });
    Ok(local.iter().sum::<f64>() / local.len() as f64)
}

fn binary_bits(map: &ControlMap) -> Result<&[u8]> {
    match map.payload() {
        Payload::Binary(v) => Ok(v),
        _ => Err(Error::invalid(format!("edge F1 needs binary maps, got a non-binary {} map", map.control_type()))),
    }
}

/// Pixel-level edge F1. A pixel on one side matches when the other side has
/// an edge within `tolerance` pixels (Chebyshev distance).
pub fn edge_f1(pred: &ControlMap, gt: &ControlMap, tolerance: u32) -> Result<f64> {
    same_dims(pred.dimensions(), gt.dimensions())?;
    let (p, g) = (binary_bits(pred)?, binary_bits(gt)?);
    let (w, h) = (pred.width() as i64, pred.height() as i64);
    let t = tolerance as i64;
    let near = |bits: &[u8], x: i64, y: i64| {
        { (y - t).max(0)..=(y + t).min(h - 1) }
            .any(|yy| ((x - t).max(0)..=(x + t).min(w - 1)).any(|xx| bits[(yy * w + xx) as usize] == 1))
    };
    let matched = |from: &[u8], to: &[u8]| -> (usize, usize) {
        let mut hit = 0;
        let mut total = 0;
        for (i, &v) in from.iter().enumerate() {
            if v == 1 {
                total += 1;
                if near(to, i as i64 % w, i as i64 / w) {
                    hit += 1;
                }
            }
        }
        (hit, total)
    };
    let (tp_p, n_p) = matched(p, g);
    let (tp_r, n_g) = matched(g, p);
    let precision = if n_p == 0 { 0.0 } else { tp_p as f64 / n_p as f64 };
    let recall = if n_g == 0 { 0.0 } else { tp_r as f64 / n_g as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn rmse(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    same_dims(a.dimensions(), b.dimensions())?;
    let n = a.as_raw().len();
    if n == 0 {
        return Err(Error::invalid("rmse of empty images"));
    }
    let sq: f64 = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok((sq / n as f64).sqrt())
}

/// Mean IoU over the classes present in the ground truth.
pub fn miou_labels(pred: &[u32], gt: &[u32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("label maps differ in size: {} vs {}", pred.len(), gt.len())));
    }
    let classes: BTreeSet<u32> = gt.iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::invalid("empty label maps"));
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &g) in pred.iter().zip(gt) {
                let (ip, ig) = (p == c, g == c);
                inter += usize::from(ip && ig);
                union += usize::from(ip || ig);
            }
            inter as f64 / union as f64
        })
        .sum();
    Ok(total / classes.len() as f64)
}

pub fn miou(pred: &ControlMap, gt: &ControlMap) -> Result<f64> {
    same_dims(pred.dimensions(), gt.dimensions())?;
    match (pred.payload(), gt.payload()) {
        (Payload::Labels { data: p, .. }, Payload::Labels { data: g, .. }) => miou_labels(p, g),
        _ => Err(Error::invalid("mIoU needs label maps")),
    }
}

/// Mean and unbiased covariance (row-major, d x d) of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub sample_count: usize,
}

impl GaussianSummary {
    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dimension();
        DMatrix::from_row_slice(d, d, &self.covariance)
    }
}

pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianSummary> {
    if features.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 feature vectors, got {}", features.len())));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("feature vectors must share a positive dimension"));
    }
    let n = features.len();
    let rows: Vec<f64> = features.iter().flatten().copied().collect();
    let x = DMatrix::from_row_slice(n, d, &rows);
    let mean: DVector<f64> = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let sym = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary {
        mean: mean.iter().copied().collect(),
        covariance: (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| sym[(i, j)]).collect(),
        sample_count: n,
    })
}

/// Square root of a symmetric PSD matrix; small negative eigenvalues from
/// round-off are clamped, larger ones are reported.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &v in eig.eigenvalues.iter() {
        if v < -1e-8 * scale {
            return Err(Error::Numerical(format!("covariance product has negative eigenvalue {v:e}")));
        }
        roots.push(v.max(0.0).sqrt());
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(roots.clone()));
    Ok((&eig.eigenvectors * d * eig.eigenvectors.transpose(), roots))
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the trace of the
/// cross term taken from the symmetric product `S1^(1/2) S2 S1^(1/2)`.
pub fn frechet_distance(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    if g1.dimension() != g2.dimension() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", g1.dimension(), g2.dimension())));
    }
    let mean_term: f64 = g1.mean.iter().zip(&g2.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let (s1, s2) = (g1.cov_matrix(), g2.cov_matrix());
    let (root1, _) = psd_sqrt(&s1)?;
    let product = &root1 * &s2 * &root1;
    let (_, cross_roots) = psd_sqrt(&product)?;
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * cross_roots.iter().sum::<f64>();
    Ok(value.max(0.0))
}

/// What generated images are compared against.
pub enum References {
    /// Ground-truth photos; control maps are extracted from them and they
    /// also feed the Fréchet distance.
    Images(Vec<RgbImage>),
    /// Ground-truth control maps only; no Fréchet distance.
    Maps(Vec<ControlMap>),
}

impl References {
    fn len(&self) -> usize {
        match self {
            References::Images(v) => v.len(),
            References::Maps(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub ssim: SsimParams,
    pub edge_tolerance: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Miou,
    EdgeF1,
    Ssim,
    Rmse,
}

impl Metric {
    pub fn for_control(control_type: ControlType) -> Self {
        match control_type {
            ControlType::Seg => Metric::Miou,
            ControlType::Canny => Metric::EdgeF1,
            ControlType::Hed | ControlType::Lineart => Metric::Ssim,
            ControlType::Depth => Metric::Rmse,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Rmse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub control_type: ControlType,
    pub metric: Metric,
    pub per_image: Vec<f64>,
    pub aggregate: f64,
    pub fid: Option<f64>,
    pub generated_count: usize,
    pub reference_count: usize,
    pub provenance: Provenance,
}

fn consistency(metric: Metric, generated: &ControlMap, reference: &ControlMap, settings: &EvalSettings) -> Result<f64> {
    match metric {
        Metric::Miou => miou(generated, reference),
        Metric::EdgeF1 => edge_f1(generated, reference, settings.edge_tolerance),
        Metric::Ssim => ssim(&generated.to_gray(), &reference.to_gray(), &settings.ssim),
        Metric::Rmse => rmse(&generated.to_gray(), &reference.to_gray()),
    }
}

fn features_of(images: &[RgbImage], fx: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    par::map_indexed(images, |_, img| {
        let f = fx.features(img)?;
        if f.len() != fx.dimension() {
            return Err(Error::invalid(format!("feature extractor returned {} values, declared {}", f.len(), fx.dimension())));
        }
        Ok(f)
    })
    .into_iter()
    .collect()
}

/// Re-extracts control maps from generated images, compares them with the
/// references using the metric for `control_type`, and, when reference
/// photos and a feature backend are available, computes the Fréchet distance.
pub fn evaluate_suite(
    generated: &[RgbImage],
    references: &References,
    control_type: ControlType,
    extractor: &dyn ControlExtractorBackend,
    features: Option<&dyn FeatureExtractor>,
    settings: &EvalSettings,
    provenance: &Provenance,
) -> Result<EvalReport> {
    if generated.is_empty() {
        return Err(Error::invalid("no generated images to evaluate"));
    }
    if generated.len() != references.len() {
        return Err(Error::invalid(format!("{} generated images but {} references", generated.len(), references.len())));
    }
    let metric = Metric::for_control(control_type);
    let per_image: Vec<f64> = par::map_indexed(generated, |i, img| -> Result<f64> {
        let produced = extractor.extract(img, control_type)?;
        let reference = match references {
            References::Images(v) => extractor.extract(&v[i], control_type)?,
            References::Maps(v) => v[i].clone(),
        };
        consistency(metric, &produced, &reference, settings).map_err(|e| Error::invalid(format!("image {i}: {e}")))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let aggregate = per_image.iter().sum::<f64>() / per_image.len() as f64;

    let fid = match (references, features) {
        (References::Images(refs), Some(fx)) if generated.len() >= 2 => {
            let g = fit_gaussian(&features_of(generated, fx)?)?;
            let r = fit_gaussian(&features_of(refs, fx)?)?;
            Some(frechet_distance(&g, &r)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        control_type,
        metric,
        aggregate,
        fid,
        generated_count: generated.len(),
        reference_count: references.len(),
        per_image,
        provenance: provenance.clone(),
    })
}

#[derive(Serialize)]
struct ImageRow {
    index: usize,
    metric: Metric,
    value: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    summary: &'a EvalReport,
}

/// One row per image followed by the full report as a summary row.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (index, &value) in report.per_image.iter().enumerate() {
        text.push_str(&crate::jsonl::to_line(&ImageRow { index, metric: report.metric, value })?);
        text.push('\n');
    }
    text.push_str(&crate::jsonl::to_line(&SummaryRow { summary: report })?);
    text.push('\n');
    crate::jsonl::write_text(path, &text)
}
