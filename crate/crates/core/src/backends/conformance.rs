//! Interface checks shared by mocks and real adapters.
//!
//! Each function probes one contract and returns a description of the first
//! violation found. Point them at any adapter before wiring it into a run.

use image::{Rgb, RgbImage};

use super::{
    ControlExtractorBackend, FeatureExtractor, GeneratorBackend, GradientSignal, ImageTextScorer, OracleClient,
    PerceptualDistance, PolicyBackend, SignalTerm,
};
use crate::control::{ControlMap, ControlType, Payload};
use crate::error::BackendErrorKind;

pub type Verdict = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Verdict {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Gradient probe pattern used by several checks.
pub fn probe_image(width: u32, height: u32, salt: u8) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| Rgb([(x * 13 + y * 7) as u8 ^ salt, (x * 3) as u8, (y * 11) as u8 ^ salt]))
}

pub fn check_policy(policy: &mut dyn PolicyBackend) -> Verdict {
    let q = "describe the scene";
    let a = policy.sample(q, 6, 1.0, 17).map_err(|e| e.to_string())?;
    let b = policy.sample(q, 6, 1.0, 17).map_err(|e| e.to_string())?;
    ensure(a.len() == 6, || format!("asked for 6 samples, got {}", a.len()))?;
    ensure(a == b, || "sampling is not seed-deterministic".into())?;
    for r in &a {
        let lp = policy.sequence_logprob(q, r).map_err(|e| e.to_string())?;
        ensure(lp.is_finite() && lp <= 0.0, || format!("logprob {lp} of {:?} is not a finite value <= 0", r.as_str()))?;
    }

    let snap = policy.snapshot();
    let target = a[0].clone();
    let frozen = snap.sequence_logprob(q, &target).map_err(|e| e.to_string())?;
    let before = policy.sequence_logprob(q, &target).map_err(|e| e.to_string())?;
    let signal = GradientSignal {
        learning_rate: 0.1,
        terms: vec![SignalTerm { question: q.into(), response: target.clone(), coefficient: -1.0 }],
    };
    policy.apply_update(&signal).map_err(|e| e.to_string())?;
    let after = policy.sequence_logprob(q, &target).map_err(|e| e.to_string())?;
    ensure(after >= before, || format!("reinforcing a sample lowered its logprob ({before} -> {after})"))?;
    let frozen_after = snap.sequence_logprob(q, &target).map_err(|e| e.to_string())?;
    ensure(frozen == frozen_after, || "snapshot changed after an update".into())
}

pub fn check_scorer(scorer: &dyn ImageTextScorer) -> Verdict {
    let img = probe_image(16, 16, 0);
    let s1 = scorer.score(&img, "a photo").map_err(|e| e.to_string())?;
    let s2 = scorer.score(&img, "a photo").map_err(|e| e.to_string())?;
    ensure(s1 == s2, || format!("scores differ on repeat: {s1} vs {s2}"))?;
    let (lo, hi) = scorer.raw_range();
    ensure(lo < hi, || format!("declared range ({lo}, {hi}) is empty"))
}

pub fn check_perceptual(dist: &dyn PerceptualDistance) -> Verdict {
    let (a, b) = (probe_image(16, 12, 0), probe_image(16, 12, 0x5a));
    let aa = dist.distance(&a, &a).map_err(|e| e.to_string())?;
    ensure(aa == 0.0, || format!("distance(x, x) = {aa}"))?;
    let ab = dist.distance(&a, &b).map_err(|e| e.to_string())?;
    let ba = dist.distance(&b, &a).map_err(|e| e.to_string())?;
    ensure(ab >= 0.0, || format!("negative distance {ab}"))?;
    ensure(ab == ba, || format!("asymmetric distance {ab} vs {ba}"))
}

pub fn check_generator(generator: &dyn GeneratorBackend) -> Verdict {
    let map = ControlMap::new(ControlType::Depth, 9, 5, Payload::Gray((0..45).map(|v| v as u8 * 5).collect()))
        .map_err(|e| e.to_string())?;
    let img = generator.generate("a house", &map, 3).map_err(|e| e.to_string())?;
    ensure(img.dimensions() == map.dimensions(), || {
        format!("generated {:?} for a {:?} control map", img.dimensions(), map.dimensions())
    })
}

pub fn check_extractor(extractor: &dyn ControlExtractorBackend, types: &[ControlType]) -> Verdict {
    let img = probe_image(12, 10, 3);
    for &t in types {
        let m = extractor.extract(&img, t).map_err(|e| e.to_string())?;
        ensure(m.control_type() == t, || format!("requested {t}, got {}", m.control_type()))?;
        ensure(m.dimensions() == img.dimensions(), || format!("{t} map has dimensions {:?}", m.dimensions()))?;
    }
    Ok(())
}

pub fn check_features(features: &dyn FeatureExtractor) -> Verdict {
    let d = features.dimension();
    for salt in [0u8, 99] {
        let v = features.features(&probe_image(10, 10, salt)).map_err(|e| e.to_string())?;
        ensure(v.len() == d, || format!("feature length {} != declared {d}", v.len()))?;
    }
    Ok(())
}

/// Oracle check for adapters that must answer a trivial request.
pub fn check_oracle(oracle: &dyn OracleClient) -> Verdict {
    match oracle.complete("system", "Original prompt: \"a cup.\"\n", &[probe_image(4, 4, 1)], 1) {
        Ok(_) => Ok(()),
        Err(e) if matches!(e.kind, BackendErrorKind::Transport | BackendErrorKind::Timeout) => {
            Err(format!("oracle unreachable: {e}"))
        }
        Err(e) => Err(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::*;
    use crate::backends::{MockPolicy, SyntheticOracle};
    use crate::control::{CannyParams, ExtractorRegistry};
    use std::sync::Arc;

    #[test]
    fn mocks_conform() {
        check_policy(&mut MockPolicy::new(0)).unwrap();
        check_scorer(&MockScorer).unwrap();
        check_perceptual(&MockPerceptual).unwrap();
        check_generator(&MockGenerator).unwrap();
        check_extractor(&MockExtractor::default(), &ControlType::ALL).unwrap();
        check_features(&MockFeatures::new(8)).unwrap();
        check_oracle(&SyntheticOracle::new(0.0)).unwrap();
        let reg = ExtractorRegistry::new()
            .with_native_canny(CannyParams::default())
            .register(ControlType::Depth, Arc::new(MockExtractor::default()));
        check_extractor(&reg, &[ControlType::Canny, ControlType::Depth]).unwrap();
    }

    #[test]
    fn broken_adapter_is_caught() {
        struct Lopsided;
        impl PerceptualDistance for Lopsided {
            fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, crate::error::BackendError> {
                Ok(a.as_raw()[0] as f64 - b.as_raw()[0] as f64 + 1.0)
            }
        }
        assert!(check_perceptual(&Lopsided).is_err());
    }
}
