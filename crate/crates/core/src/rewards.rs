//! Scalar rewards for training and for best-of-K selection.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backends::{ControlExtractorBackend, ImageTextScorer, PerceptualDistance};
use crate::control::ControlMap;
use crate::error::{BackendError, Error, Result};
use crate::format::{parse_response, RawResponse};

/// Reinforcement reward: normalized alignment plus binary format term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub align: f64,
    pub format: f64,
    pub total: f64,
    /// Set when the response was well formed but its answer was empty.
    pub degenerate: bool,
}

impl RewardBreakdown {
    pub fn new(align: f64, format: f64) -> Self {
        RewardBreakdown { align, format, total: align + format, degenerate: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub value: f64,
    pub degenerate: bool,
}

/// Maps a raw score from the scorer's declared range onto [0, 1]; values
/// outside the declared range are clamped.
pub fn normalize_score(raw: f64, range: (f64, f64)) -> f64 {
    let (lo, hi) = range;
    ((raw - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Image-text alignment between the ground-truth photo and an enhanced
/// prompt, normalized to [0, 1]. An empty prompt scores 0 and is flagged.
pub fn alignment_reward(
    gt_image: &RgbImage,
    enhanced_prompt: &str,
    scorer: &dyn ImageTextScorer,
) -> Result<AlignmentScore, BackendError> {
    if enhanced_prompt.trim().is_empty() {
        log::debug!("empty enhanced prompt scored as zero alignment");
        return Ok(AlignmentScore { value: 0.0, degenerate: true });
    }
    let raw = scorer.score(gt_image, enhanced_prompt)?;
    if !raw.is_finite() {
        return Err(BackendError::malformed(format!("scorer returned {raw}")));
    }
    Ok(AlignmentScore { value: normalize_score(raw, scorer.raw_range()), degenerate: false })
}

/// Format reward plus, for well-formed responses, the alignment of the
/// extracted answer with the ground-truth photo.
pub fn rft_reward(
    gt_image: &RgbImage,
    response: &RawResponse,
    scorer: &dyn ImageTextScorer,
) -> Result<RewardBreakdown, BackendError> {
    let parsed = parse_response(response);
    if !parsed.well_formed {
        return Ok(RewardBreakdown::new(0.0, 0.0));
    }
    let align = alignment_reward(gt_image, &parsed.answer_text, scorer)?;
    let mut r = RewardBreakdown::new(align.value, 1.0);
    r.degenerate = align.degenerate;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrmWeights {
    pub semantic: f64,
    pub structural: f64,
    /// Min-max normalize each term over the candidate set before weighting.
    pub normalize: bool,
}

impl Default for OrmWeights {
    fn default() -> Self {
        OrmWeights { semantic: 1.0, structural: 1.0, normalize: false }
    }
}

/// Selection reward: preference score against the original prompt minus the
/// perceptual distance between the re-extracted and the requested control map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrmReward {
    /// Weighted semantic term.
    pub semantic: f64,
    /// Weighted structural penalty, >= 0.
    pub structural_penalty: f64,
    pub total: f64,
    pub raw_semantic: f64,
    pub raw_penalty: f64,
}

impl OrmReward {
    pub fn from_raw(raw_semantic: f64, raw_penalty: f64, weights: &OrmWeights) -> Self {
        Self::weighted(raw_semantic, raw_penalty, raw_semantic, raw_penalty, weights)
    }

    pub(crate) fn weighted(raw_semantic: f64, raw_penalty: f64, semantic: f64, penalty: f64, w: &OrmWeights) -> Self {
        let semantic = w.semantic * semantic;
        let structural_penalty = w.structural * penalty;
        OrmReward { semantic, structural_penalty, total: semantic - structural_penalty, raw_semantic, raw_penalty }
    }
}

/// Raw terms before weighting; also returns the extracted control map.
pub fn orm_terms(
    candidate: &RgbImage,
    original_prompt: &str,
    control_map: &ControlMap,
    scorer: &dyn ImageTextScorer,
    perceptual: &dyn PerceptualDistance,
    extractor: &dyn ControlExtractorBackend,
) -> Result<(f64, f64, ControlMap)> {
    let extracted = extractor.extract(candidate, control_map.control_type())?;
    if extracted.control_type() != control_map.control_type() {
        return Err(Error::from(BackendError::malformed(format!(
            "extractor returned {} for a {} request",
            extracted.control_type(),
            control_map.control_type()
        ))));
    }
    let semantic = scorer.score(candidate, original_prompt)?;
    let penalty = perceptual.distance(&extracted.to_rgb(), &control_map.to_rgb())?;
    if !semantic.is_finite() || !penalty.is_finite() || penalty < 0.0 {
        return Err(BackendError::malformed(format!("bad ORM terms: semantic {semantic}, penalty {penalty}")).into());
    }
    Ok((semantic, penalty, extracted))
}

/// Scores one candidate image against the original prompt and control map.
pub fn orm_reward(
    candidate: &RgbImage,
    original_prompt: &str,
    control_map: &ControlMap,
    scorer: &dyn ImageTextScorer,
    perceptual: &dyn PerceptualDistance,
    extractor: &dyn ControlExtractorBackend,
    weights: &OrmWeights,
) -> Result<OrmReward> {
    let (semantic, penalty, _) = orm_terms(candidate, original_prompt, control_map, scorer, perceptual, extractor)?;
    Ok(OrmReward::from_raw(semantic, penalty, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FnScorer, MockExtractor, MockPerceptual};
    use crate::control::ControlType;
    use proptest::prelude::*;

    fn constant_scorer(v: f64) -> FnScorer<impl Fn(&RgbImage, &str) -> f64 + Send + Sync> {
        FnScorer::new((-1.0, 1.0), move |_, _| v)
    }

    #[test]
    fn range_map_endpoints() {
        let img = RgbImage::new(2, 2);
        assert_eq!(alignment_reward(&img, "p", &constant_scorer(1.0)).unwrap().value, 1.0);
        assert_eq!(alignment_reward(&img, "p", &constant_scorer(0.0)).unwrap().value, 0.5);
        assert_eq!(alignment_reward(&img, "p", &constant_scorer(-1.0)).unwrap().value, 0.0);
        let empty = alignment_reward(&img, "  ", &constant_scorer(1.0)).unwrap();
        assert_eq!(empty, AlignmentScore { value: 0.0, degenerate: true });
    }

    #[test]
    fn rft_reward_cases() {
        let img = RgbImage::new(2, 2);
        // raw 0.2 on [-1, 1] maps to 0.6
        let s = constant_scorer(0.2);
        let r = rft_reward(&img, &"<think>t</think><answer>a cat</answer>".into(), &s).unwrap();
        assert!((r.align - 0.6).abs() < 1e-12);
        assert_eq!(r.format, 1.0);
        assert_eq!(r.total, r.align + r.format);
        assert_eq!(rft_reward(&img, &"<answer>a</answer>".into(), &s).unwrap(), RewardBreakdown::new(0.0, 0.0));
        let empty = rft_reward(&img, &"<think>t</think><answer></answer>".into(), &s).unwrap();
        assert_eq!((empty.align, empty.format, empty.total), (0.0, 1.0, 1.0));
        assert!(empty.degenerate);
    }

    #[test]
    fn orm_arithmetic() {
        let r = OrmReward::from_raw(0.8, 0.3, &OrmWeights::default());
        assert!((r.total - 0.5).abs() < 1e-15);
        assert_eq!(r.total, r.semantic - r.structural_penalty);
    }

    #[test]
    fn orm_identity_penalty_is_zero() {
        let img = RgbImage::from_fn(8, 8, |x, _| image::Rgb(if x < 4 { [0; 3] } else { [255; 3] }));
        let ext = MockExtractor::default();
        let control = ext.extract(&img, ControlType::Canny).unwrap();
        let scorer = FnScorer::new((0.0, 40.0), |_, _| 20.23);
        let r = orm_reward(&img, "raw", &control, &scorer, &MockPerceptual, &ext, &OrmWeights::default()).unwrap();
        assert_eq!(r.structural_penalty, 0.0);
        assert_eq!(r.total, 20.23);
    }

    proptest! {
        #[test]
        fn rft_total_in_unit_interval_pair(raw in -5.0f64..5.0, text in "[a-z<>/ ]{0,40}") {
            let s = constant_scorer(raw);
            let r = rft_reward(&RgbImage::new(1, 1), &RawResponse(text), &s).unwrap();
            prop_assert!((0.0..=2.0).contains(&r.total));
            prop_assert!((0.0..=1.0).contains(&r.align));
        }

        #[test]
        fn orm_decreasing_in_penalty(sem in -30.0f64..30.0, p in 0.0f64..1.0, dp in 1e-6f64..1.0) {
            let w = OrmWeights::default();
            prop_assert!(OrmReward::from_raw(sem, p + dp, &w).total < OrmReward::from_raw(sem, p, &w).total);
        }

        #[test]
        fn constant_shift_moves_total(sem in -30.0f64..30.0, p in 0.0f64..1.0, c in -10.0f64..10.0) {
            let w = OrmWeights::default();
            let shifted = OrmReward::from_raw(sem + c, p, &w).total - OrmReward::from_raw(sem, p, &w).total;
            prop_assert!((shifted - c).abs() < 1e-9);
        }

        #[test]
        fn alignment_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(normalize_score(lo, (-1.0, 1.0)) <= normalize_score(hi, (-1.0, 1.0)));
        }
    }
}
