//! Best-of-K inference: sample K enhanced prompts, render one candidate per
//! prompt, and keep the candidate with the highest output reward.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backends::{ControlExtractorBackend, GeneratorBackend, ImageTextScorer, PerceptualDistance, PolicyBackend};
use crate::control::ControlMap;
use crate::curation::{question_text, Provenance};
use crate::digest::{derive_seed, sha256_hex};
use crate::error::{BackendError, BackendErrorKind, Error, Result};
use crate::format::parse_response;
use crate::par;
use crate::rewards::{orm_terms, OrmReward, OrmWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub k: usize,
    pub temperature: f64,
    /// Extra samples drawn for a slot whose sample was malformed.
    pub max_resamples: usize,
    /// Render all K candidates from the original prompt when no sample parses.
    pub fallback_to_original: bool,
    pub weights: OrmWeights,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { k: 10, temperature: 1.0, max_resamples: 3, fallback_to_original: true, weights: OrmWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub enhanced_prompt: String,
    pub seed: u64,
    #[serde(skip)]
    pub image: Option<RgbImage>,
    #[serde(skip)]
    pub extracted_map: Option<ControlMap>,
    pub reward: Option<OrmReward>,
    pub scorable: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub winner: usize,
    pub candidates: Vec<Candidate>,
}

impl SelectionResult {
    pub fn winner(&self) -> &Candidate {
        &self.candidates[self.winner]
    }
}

/// Draws `k` enhanced prompts, resampling malformed or empty answers up to
/// `max_resamples` times per slot. Slots that never parse are dropped.
pub fn enhance_prompts(
    policy: &dyn PolicyBackend,
    question: &str,
    k: usize,
    max_resamples: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut prompts = Vec::with_capacity(k);
    for slot in 0..k {
        let mut found = None;
        for attempt in 0..=max_resamples {
            let s = derive_seed(seed, "enhance", (slot * (max_resamples + 1) + attempt) as u64);
            let sample = policy.sample(question, 1, temperature, s)?;
            let raw = sample.into_iter().next().ok_or_else(|| BackendError::malformed("policy returned no sample"))?;
            let parsed = parse_response(&raw);
            if parsed.well_formed && !parsed.answer_text.trim().is_empty() {
                found = Some(parsed.answer_text);
                break;
            }
            log::debug!("slot {slot} attempt {attempt}: malformed sample ({:?})", parsed.violation);
        }
        match found {
            Some(p) => prompts.push(p),
            None => log::warn!("slot {slot} dropped after {} malformed samples", max_resamples + 1),
        }
    }
    if prompts.is_empty() {
        return Err(BackendError::malformed(format!("no well-formed enhanced prompt among {k} slots")).into());
    }
    Ok(prompts)
}

/// Renders one candidate per prompt. A failed generation marks only that
/// candidate as unscorable.
pub fn generate_candidates(
    generator: &dyn GeneratorBackend,
    prompts: &[String],
    control_map: &ControlMap,
    seeds: &[u64],
) -> Result<Vec<Candidate>> {
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts to generate from"));
    }
    if seeds.len() != prompts.len() {
        return Err(Error::invalid(format!("{} seeds for {} prompts", seeds.len(), prompts.len())));
    }
    Ok(par::map_indexed(prompts, |i, prompt| {
        let result = generator.generate(prompt, control_map, seeds[i]).and_then(|img| {
            if img.dimensions() == control_map.dimensions() {
                Ok(img)
            } else {
                Err(BackendError::malformed(format!(
                    "generated {:?}, control map is {:?}",
                    img.dimensions(),
                    control_map.dimensions()
                )))
            }
        });
        let (image, error) = match result {
            Ok(img) => (Some(img), None),
            Err(e) => {
                log::warn!("candidate {i} generation failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        Candidate {
            index: i,
            enhanced_prompt: prompt.clone(),
            seed: seeds[i],
            scorable: image.is_some(),
            image,
            extracted_map: None,
            reward: None,
            error,
        }
    }))
}

/// First index holding the maximum value; `None` entries never win.
pub fn argmax_lowest(totals: &[Option<f64>]) -> Option<usize> {
    totals
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, t)| match (*t, best) {
            (Some(v), Some((_, b))) if v > b => Some((i, v)),
            (Some(v), None) => Some((i, v)),
            _ => best,
        })
        .map(|(i, _)| i)
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Scores every scorable candidate against the original prompt and the
/// requested control map, then picks the highest total.
#[allow(clippy::too_many_arguments)]
pub fn select_best(
    mut candidates: Vec<Candidate>,
    original_prompt: &str,
    control_map: &ControlMap,
    scorer: &dyn ImageTextScorer,
    perceptual: &dyn PerceptualDistance,
    extractor: &dyn ControlExtractorBackend,
    weights: &OrmWeights,
) -> Result<SelectionResult> {
    let terms = par::map_indexed(&candidates, |_, c| match (&c.image, c.scorable) {
        (Some(img), true) => Some(orm_terms(img, original_prompt, control_map, scorer, perceptual, extractor)),
        _ => None,
    });
    let mut scored = Vec::new();
    for (c, t) in candidates.iter_mut().zip(terms) {
        match t {
            Some(Ok((s, p, map))) => {
                c.extracted_map = Some(map);
                scored.push((c.index, s, p));
            }
            Some(Err(e)) => {
                log::warn!("candidate {} could not be scored: {e}", c.index);
                c.scorable = false;
                c.error = Some(e.to_string());
            }
            None => c.scorable = false,
        }
    }
    if scored.is_empty() {
        return Err(Error::invalid("no scorable candidates"));
    }
    let raw_s: Vec<f64> = scored.iter().map(|t| t.1).collect();
    let raw_p: Vec<f64> = scored.iter().map(|t| t.2).collect();
    let (s, p) = if weights.normalize { (min_max(&raw_s), min_max(&raw_p)) } else { (raw_s.clone(), raw_p.clone()) };
    let by_index: Vec<usize> = scored.iter().map(|t| t.0).collect();
    for (j, &idx) in by_index.iter().enumerate() {
        let c = candidates.iter_mut().find(|c| c.index == idx).expect("scored candidate exists");
        c.reward = Some(OrmReward::weighted(raw_s[j], raw_p[j], s[j], p[j], weights));
    }
    let totals: Vec<Option<f64>> = candidates.iter().map(|c| c.reward.filter(|_| c.scorable).map(|r| r.total)).collect();
    let winner = argmax_lowest(&totals).expect("at least one scored candidate");
    Ok(SelectionResult { winner, candidates })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub original_prompt: String,
    pub control_map: ControlMap,
    pub k: usize,
    pub seed: u64,
}

impl InferenceRequest {
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.original_prompt.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(self.control_map.control_type().name().as_bytes());
        bytes.extend_from_slice(&self.control_map.width().to_le_bytes());
        bytes.extend_from_slice(&self.control_map.height().to_le_bytes());
        bytes.extend_from_slice(self.control_map.to_rgb().as_raw());
        bytes.extend_from_slice(&(self.k as u64).to_le_bytes());
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        sha256_hex(&bytes)
    }
}

pub struct InferenceBackends<'a> {
    pub policy: &'a dyn PolicyBackend,
    pub generator: &'a dyn GeneratorBackend,
    pub scorer: &'a dyn ImageTextScorer,
    pub perceptual: &'a dyn PerceptualDistance,
    pub extractor: &'a dyn ControlExtractorBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub request_digest: String,
    pub original_prompt: String,
    pub control_type: crate::ControlType,
    pub k: usize,
    pub seed: u64,
    pub fallback_used: bool,
    pub weights: OrmWeights,
    pub candidates: Vec<Candidate>,
    pub winner: usize,
    pub provenance: Provenance,
}

pub struct InferenceOutcome {
    pub image: RgbImage,
    pub selection: SelectionResult,
    pub audit: AuditRecord,
}

pub fn run_inference(
    request: &InferenceRequest,
    backends: &InferenceBackends<'_>,
    config: &InferenceConfig,
    provenance: &Provenance,
) -> Result<InferenceOutcome> {
    let control_type = request.control_map.control_type();
    let question = question_text(control_type, &request.original_prompt);
    let enhanced = enhance_prompts(
        backends.policy,
        &question,
        request.k,
        config.max_resamples,
        config.temperature,
        derive_seed(request.seed, "enhance-root", 0),
    );
    let (prompts, fallback_used) = match enhanced {
        Ok(p) => (p, false),
        Err(Error::Backend(e)) if e.kind == BackendErrorKind::MalformedOutput && config.fallback_to_original => {
            log::warn!("{e}; using the original prompt for all candidates");
            (vec![request.original_prompt.clone(); request.k], true)
        }
        Err(e) => return Err(e.in_stage("enhance")),
    };
    let seeds: Vec<u64> = (0..prompts.len()).map(|i| derive_seed(request.seed, "generate", i as u64)).collect();
    let candidates =
        generate_candidates(backends.generator, &prompts, &request.control_map, &seeds).map_err(|e| e.in_stage("generate"))?;
    let selection = select_best(
        candidates,
        &request.original_prompt,
        &request.control_map,
        backends.scorer,
        backends.perceptual,
        backends.extractor,
        &config.weights,
    )
    .map_err(|e| e.in_stage("select"))?;
    let image = selection.winner().image.clone().expect("winner has an image");
    let audit = AuditRecord {
        request_digest: request.digest(),
        original_prompt: request.original_prompt.clone(),
        control_type,
        k: request.k,
        seed: request.seed,
        fallback_used,
        weights: config.weights,
        candidates: selection.candidates.clone(),
        winner: selection.winner,
        provenance: provenance.clone(),
    };
    Ok(InferenceOutcome { image, selection, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FnScorer, MockExtractor, MockGenerator, MockPerceptual, MockPolicy, MockScorer};
    use crate::backends::{GradientSignal, PolicyState, ReferencePolicy};
    use crate::control::{ControlType, Payload};
    use crate::format::RawResponse;
    use image::Rgb;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn depth_map(w: u32, h: u32) -> ControlMap {
        ControlMap::new(ControlType::Depth, w, h, Payload::Gray(vec![0; (w * h) as usize])).unwrap()
    }

    /// Candidate `i` is a constant image of gray level `i`.
    fn indexed(n: usize) -> Vec<Candidate> {
        (0..n)
            .map(|i| Candidate {
                index: i,
                enhanced_prompt: format!("p{i}"),
                seed: i as u64,
                image: Some(RgbImage::from_pixel(2, 2, Rgb([i as u8; 3]))),
                extracted_map: None,
                reward: None,
                scorable: true,
                error: None,
            })
            .collect()
    }

    fn pick(semantic: Vec<f64>, weights: OrmWeights) -> usize {
        let n = semantic.len();
        let scorer = FnScorer::new((0.0, 1.0), move |img: &RgbImage, _: &str| semantic[img.get_pixel(0, 0)[0] as usize]);
        select_best(indexed(n), "o", &depth_map(2, 2), &scorer, &ZeroDistance, &MockExtractor::default(), &weights)
            .unwrap()
            .winner
    }

    struct ZeroDistance;

    impl PerceptualDistance for ZeroDistance {
        fn distance(&self, _: &RgbImage, _: &RgbImage) -> Result<f64, BackendError> {
            Ok(0.0)
        }
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(pick(vec![0.2, 0.5, 0.4], OrmWeights::default()), 1);
        assert_eq!(pick(vec![0.4, 0.4], OrmWeights::default()), 0);
        assert_eq!(argmax_lowest(&[None, Some(-1.0), Some(-1.0)]), Some(1));
        assert_eq!(argmax_lowest(&[None, None]), None);
    }

    #[test]
    fn unscorable_never_wins() {
        let mut c = indexed(3);
        c[2].image = None;
        c[2].scorable = false;
        let scorer = FnScorer::new((0.0, 1.0), |img: &RgbImage, _: &str| img.get_pixel(0, 0)[0] as f64);
        let r = select_best(c, "o", &depth_map(2, 2), &scorer, &ZeroDistance, &MockExtractor::default(), &OrmWeights::default())
            .unwrap();
        assert_eq!(r.winner, 1);
        let mut none = indexed(1);
        none[0].scorable = false;
        assert!(select_best(
            none,
            "o",
            &depth_map(2, 2),
            &scorer,
            &ZeroDistance,
            &MockExtractor::default(),
            &OrmWeights::default()
        )
        .is_err());
    }

    #[test]
    fn semantic_uses_original_prompt() {
        // Candidate 0 matches its own enhanced prompt best; candidate 1 matches the original.
        let scorer = FnScorer::new((0.0, 1.0), |img: &RgbImage, text: &str| match (img.get_pixel(0, 0)[0], text) {
            (0, "p0") => 0.9,
            (0, _) => 0.1,
            (1, "original") => 0.6,
            _ => 0.2,
        });
        let r = select_best(
            indexed(2),
            "original",
            &depth_map(2, 2),
            &scorer,
            &ZeroDistance,
            &MockExtractor::default(),
            &OrmWeights::default(),
        )
        .unwrap();
        assert_eq!(r.winner, 1);
    }

    #[test]
    fn weights_can_flip_winner() {
        // Gray level doubles as the structural distance from the all-zero depth map.
        let scorer = FnScorer::new((0.0, 1.0), |img: &RgbImage, _: &str| img.get_pixel(0, 0)[0] as f64);
        let run = |w: OrmWeights| {
            select_best(indexed(3), "o", &depth_map(2, 2), &scorer, &MockPerceptual, &MockExtractor::default(), &w)
                .unwrap()
                .winner
        };
        assert_eq!(run(OrmWeights { semantic: 1.0, structural: 0.0, normalize: false }), 2);
        assert_eq!(run(OrmWeights { semantic: 0.0, structural: 1.0, normalize: false }), 0);
    }

    #[test]
    fn normalized_terms_are_in_unit_range() {
        let scorer = FnScorer::new((0.0, 1.0), |img: &RgbImage, _: &str| 10.0 * img.get_pixel(0, 0)[0] as f64);
        let w = OrmWeights { normalize: true, ..OrmWeights::default() };
        let r = select_best(indexed(4), "o", &depth_map(2, 2), &scorer, &MockPerceptual, &MockExtractor::default(), &w).unwrap();
        for c in &r.candidates {
            let rw = c.reward.unwrap();
            assert!((0.0..=1.0).contains(&rw.semantic) && (0.0..=1.0).contains(&rw.structural_penalty));
        }
    }

    struct FailingGenerator(usize);

    impl GeneratorBackend for FailingGenerator {
        fn generate(&self, prompt: &str, control: &ControlMap, seed: u64) -> Result<RgbImage, BackendError> {
            if prompt == format!("p{}", self.0) {
                return Err(BackendError::transport("boom"));
            }
            MockGenerator.generate(prompt, control, seed)
        }
    }

    #[test]
    fn generation_failure_is_isolated() {
        let prompts: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        let c = generate_candidates(&FailingGenerator(1), &prompts, &depth_map(4, 4), &[1, 2, 3]).unwrap();
        assert_eq!(c.iter().map(|c| c.index).collect::<Vec<_>>(), [0, 1, 2]);
        assert_eq!(c.iter().filter(|c| c.scorable).count(), 2);
        let again = generate_candidates(&FailingGenerator(1), &prompts, &depth_map(4, 4), &[1, 2, 3]).unwrap();
        assert_eq!(c, again);
    }

    /// Always emits text without tags.
    struct Mumbler;

    impl ReferencePolicy for Mumbler {
        fn sequence_logprob(&self, _: &str, _: &RawResponse) -> Result<f64, BackendError> {
            Ok(-1.0)
        }
    }

    impl PolicyBackend for Mumbler {
        fn sample(&self, _: &str, count: usize, _: f64, _: u64) -> Result<Vec<RawResponse>, BackendError> {
            Ok(vec![RawResponse::from("just words"); count])
        }
        fn apply_update(&mut self, _: &GradientSignal) -> Result<PolicyState, BackendError> {
            Ok(self.state())
        }
        fn snapshot(&self) -> Arc<dyn ReferencePolicy> {
            Arc::new(Mumbler)
        }
        fn state(&self) -> PolicyState {
            PolicyState { updates: 0, digest: String::new() }
        }
        fn export_state(&self) -> Result<serde_json::Value, BackendError> {
            Ok(serde_json::Value::Null)
        }
        fn import_state(&mut self, _: &serde_json::Value) -> Result<(), BackendError> {
            Ok(())
        }
    }

    fn request(k: usize) -> InferenceRequest {
        let map = MockExtractor::default()
            .extract(&RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 0])), ControlType::Canny)
            .unwrap();
        InferenceRequest { original_prompt: "a cat".into(), control_map: map, k, seed: 11 }
    }

    #[test]
    fn malformed_policy_falls_back() {
        assert!(enhance_prompts(&Mumbler, "q", 3, 1, 1.0, 0).is_err());
        let ext = MockExtractor::default();
        let b = InferenceBackends {
            policy: &Mumbler,
            generator: &MockGenerator,
            scorer: &MockScorer,
            perceptual: &MockPerceptual,
            extractor: &ext,
        };
        let out = run_inference(&request(4), &b, &InferenceConfig::default(), &Provenance::default()).unwrap();
        assert!(out.audit.fallback_used);
        assert_eq!(out.audit.candidates.len(), 4);
        assert!(out.audit.candidates.iter().all(|c| c.enhanced_prompt == "a cat"));
        let strict = InferenceConfig { fallback_to_original: false, ..InferenceConfig::default() };
        match run_inference(&request(4), &b, &strict, &Provenance::default()) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "enhance"),
            other => panic!("{:?}", other.map(|o| o.audit)),
        }
    }

    /// Always emits a canonical think/answer pair.
    struct Tidy;

    impl ReferencePolicy for Tidy {
        fn sequence_logprob(&self, _: &str, _: &RawResponse) -> Result<f64, BackendError> {
            Ok(-1.0)
        }
    }

    impl PolicyBackend for Tidy {
        fn sample(&self, _: &str, count: usize, _: f64, seed: u64) -> Result<Vec<RawResponse>, BackendError> {
            Ok((0..count).map(|i| RawResponse(format!("<think>t</think><answer>cat {seed} {i}</answer>"))).collect())
        }
        fn apply_update(&mut self, _: &GradientSignal) -> Result<PolicyState, BackendError> {
            Ok(self.state())
        }
        fn snapshot(&self) -> Arc<dyn ReferencePolicy> {
            Arc::new(Tidy)
        }
        fn state(&self) -> PolicyState {
            PolicyState { updates: 0, digest: String::new() }
        }
        fn export_state(&self) -> Result<serde_json::Value, BackendError> {
            Ok(serde_json::Value::Null)
        }
        fn import_state(&mut self, _: &serde_json::Value) -> Result<(), BackendError> {
            Ok(())
        }
    }

    #[test]
    fn enhance_counts() {
        assert_eq!(enhance_prompts(&Tidy, "q", 10, 0, 1.0, 0).unwrap().len(), 10);
        assert_eq!(enhance_prompts(&Tidy, "q", 1, 0, 1.0, 0).unwrap().len(), 1);
        assert!(enhance_prompts(&Tidy, "q", 0, 0, 1.0, 0).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        let policy = MockPolicy::new(5);
        let ext = MockExtractor::default();
        let b = InferenceBackends {
            policy: &policy,
            generator: &MockGenerator,
            scorer: &MockScorer,
            perceptual: &MockPerceptual,
            extractor: &ext,
        };
        let cfg = InferenceConfig { max_resamples: 50, ..InferenceConfig::default() };
        let a = run_inference(&request(4), &b, &cfg, &Provenance::default()).unwrap();
        let again = run_inference(&request(4), &b, &cfg, &Provenance::default()).unwrap();
        assert_eq!(serde_json::to_string(&a.audit).unwrap(), serde_json::to_string(&again.audit).unwrap());
        assert_eq!(a.image, again.image);
        let one = run_inference(&request(1), &b, &cfg, &Provenance::default()).unwrap();
        assert_eq!(one.audit.candidates.len(), 1);
        assert_eq!(one.audit.winner, 0);
    }

    proptest! {
        #[test]
        fn winner_dominates_and_survives_removal(
            sem in proptest::collection::vec(-5.0f64..5.0, 1..10),
            shift in -100.0f64..100.0,
        ) {
            let w = OrmWeights::default();
            let winner = pick(sem.clone(), w);
            prop_assert!(sem.iter().all(|&s| s <= sem[winner]));
            prop_assert!(sem[..winner].iter().all(|&s| s < sem[winner]));
            let shifted: Vec<f64> = sem.iter().map(|s| s + shift).collect();
            prop_assert_eq!(argmax_lowest(&shifted.iter().map(|&s| Some(s)).collect::<Vec<_>>()), Some(winner));
            if sem.len() > 1 {
                let loser = (winner + 1) % sem.len();
                let mut totals: Vec<Option<f64>> = sem.iter().map(|&s| Some(s)).collect();
                totals[loser] = None;
                prop_assert_eq!(argmax_lowest(&totals), Some(winner));
            }
        }
    }
}
