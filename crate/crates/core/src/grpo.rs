//! Two-phase policy training.
//!
//! Supervised fine-tuning minimizes the mean negative sequence log-likelihood
//! of curated responses. Reinforcement fine-tuning samples a group of `G`
//! responses per question, z-scores their rewards within the group, and
//! minimizes
//!
//! ```text
//! loss = -(1/G) * sum_i [ A_i * log pi(o_i|q) - beta * KL_i ]
//! KL_i = exp(lr_i - lc_i) - (lr_i - lc_i) - 1
//! ```
//!
//! where `lc_i`/`lr_i` are sequence log-probabilities under the live policy
//! and the frozen reference.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{GradientSignal, ImageTextScorer, PolicyBackend, PolicyState, ReferencePolicy, SignalTerm};
use crate::curation::{load_rgb, CurationRecord};
use crate::digest::derive_seed;
use crate::error::{BackendError, Error, Result};
use crate::format::{format_reward, RawResponse};
use crate::par;
use crate::rewards::{rft_reward, RewardBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set; batches keep cycling through reshuffled epochs.
    pub max_steps: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { learning_rate: 5e-6, batch_size: 6, epochs: 1, max_steps: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveMode {
    /// Advantage-weighted log-likelihood with the KL penalty, no ratio.
    Literal,
    /// PPO-style clipped importance ratio over several inner updates per group.
    ClippedRatio { clip_epsilon: f64, inner_updates: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RftConfig {
    pub group_size: usize,
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    /// Questions per update step.
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    /// Reward groups with population std at or below this get zero advantages.
    pub epsilon: f64,
    pub objective: ObjectiveMode,
}

impl Default for RftConfig {
    fn default() -> Self {
        RftConfig {
            group_size: 12,
            kl_coefficient: 0.04,
            learning_rate: 1e-5,
            batch_size: 1,
            steps: 2400,
            temperature: 1.0,
            epsilon: 1e-8,
            objective: ObjectiveMode::Literal,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be at least 2, got {}", self.group_size)));
        }
        if self.kl_coefficient.is_nan() || self.kl_coefficient < 0.0 {
            return Err(Error::Config("kl_coefficient must be >= 0".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("temperature and batch_size must be positive".into()));
        }
        if let ObjectiveMode::ClippedRatio { clip_epsilon, inner_updates } = self.objective {
            if clip_epsilon.is_nan() || clip_epsilon <= 0.0 || inner_updates == 0 {
                return Err(Error::Config("clipped objective needs clip_epsilon > 0 and inner_updates >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the curated responses, with the matching
/// descent signal.
pub fn sft_loss(records: &[&CurationRecord], policy: &dyn ReferencePolicy, learning_rate: f64) -> Result<(f64, GradientSignal)> {
    if records.is_empty() {
        return Err(Error::invalid("sft batch is empty"));
    }
    if let Some(bad) = records.iter().find(|r| r.rejected_reason.is_some() || !r.well_formed) {
        return Err(Error::invalid(format!("record `{}` is not a kept record", bad.id)));
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(records.len());
    for r in records {
        let lp = policy.sequence_logprob(&r.question_text, &r.response_text)?;
        if !lp.is_finite() {
            return Err(Error::Numerical(format!("non-finite logprob for record `{}`", r.id)));
        }
        total -= lp;
        terms.push(SignalTerm { question: r.question_text.clone(), response: r.response_text.clone(), coefficient: -1.0 / n });
    }
    Ok((total / n, GradientSignal { learning_rate, terms }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub question: String,
    pub responses: Vec<RawResponse>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub logprobs_current: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
    /// Log-probabilities at sampling time, used by the clipped-ratio mode.
    pub logprobs_old: Vec<f64>,
}

impl TrajectoryGroup {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

fn logprobs(policy: &dyn ReferencePolicy, question: &str, responses: &[RawResponse]) -> Result<Vec<f64>, BackendError> {
    par::map_indexed(responses, |_, r| policy.sequence_logprob(question, r)).into_iter().collect()
}

/// Samples `group_size` responses and fills both log-probability vectors.
/// A failed sampling attempt is retried once with the same seed.
pub fn sample_group(
    policy: &dyn PolicyBackend,
    reference: &dyn ReferencePolicy,
    question: &str,
    config: &RftConfig,
    seed: u64,
) -> Result<TrajectoryGroup> {
    if config.group_size < 2 {
        return Err(Error::invalid(format!("group size {} < 2", config.group_size)));
    }
    let attempt = || -> Result<TrajectoryGroup, BackendError> {
        let responses = policy.sample(question, config.group_size, config.temperature, seed)?;
        if responses.len() != config.group_size {
            return Err(BackendError::malformed(format!(
                "policy returned {} samples, expected {}",
                responses.len(),
                config.group_size
            )));
        }
        let current = logprobs(policy, question, &responses)?;
        let reference = logprobs(reference, question, &responses)?;
        Ok(TrajectoryGroup {
            question: question.to_owned(),
            rewards: Vec::new(),
            advantages: Vec::new(),
            logprobs_old: current.clone(),
            logprobs_current: current,
            logprobs_ref: reference,
            responses,
        })
    };
    attempt().or_else(|e| {
        log::warn!("group sampling failed ({e}); retrying once");
        attempt().map_err(Error::from)
    })
}

/// Group-relative advantages: z-scores with the population standard
/// deviation. Degenerate groups (std <= epsilon) get all zeros.
pub fn compute_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("advantages need at least two rewards"));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numerical(format!("reward {i} is not finite")));
    }
    // Shifted two-pass: a shared offset cancels exactly.
    let pivot = rewards[0];
    let shifted: Vec<f64> = rewards.iter().map(|r| r - pivot).collect();
    let n = rewards.len() as f64;
    let mean = shifted.iter().sum::<f64>() / n;
    let std = (shifted.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std <= epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(shifted.iter().map(|d| (d - mean) / std).collect())
}

/// Non-negative per-sequence KL estimate, zero iff the log-probs agree.
pub fn kl_estimate(logprob_ref: f64, logprob_current: f64) -> f64 {
    let d = logprob_ref - logprob_current;
    (d.exp() - d - 1.0).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Quantity minimized; the negated objective.
    pub loss: f64,
    /// Group-averaged maximization objective.
    pub objective: f64,
    pub policy_term: f64,
    pub kl_mean: f64,
}

/// Evaluates the group objective and the descent signal on the policy.
pub fn rft_objective(group: &TrajectoryGroup, config: &RftConfig) -> Result<(ObjectiveValue, GradientSignal)> {
    let g = group.len();
    if g < 2 {
        return Err(Error::invalid("objective needs a group of at least two responses"));
    }
    for (name, v) in
        [("advantages", &group.advantages), ("logprobs_current", &group.logprobs_current), ("logprobs_ref", &group.logprobs_ref)]
    {
        if v.len() != g {
            return Err(Error::invalid(format!("{name} has length {}, expected {g}", v.len())));
        }
    }
    for i in 0..g {
        let lc = group.logprobs_current[i];
        let lr = group.logprobs_ref[i];
        if !lc.is_finite() || !lr.is_finite() || !group.advantages[i].is_finite() {
            return Err(Error::Numerical(format!("non-finite value for response {i}")));
        }
    }

    let beta = config.kl_coefficient;
    let gf = g as f64;
    let mut policy_term = 0.0;
    let mut kl_total = 0.0;
    let mut terms = Vec::with_capacity(g);
    for i in 0..g {
        let (a, lc, lr) = (group.advantages[i], group.logprobs_current[i], group.logprobs_ref[i]);
        let kl = kl_estimate(lr, lc);
        kl_total += kl;
        let (surrogate, d_surrogate) = match config.objective {
            ObjectiveMode::Literal => (a * lc, a),
            ObjectiveMode::ClippedRatio { clip_epsilon, .. } => {
                let lold = group.logprobs_old.get(i).copied().unwrap_or(lc);
                let ratio = (lc - lold).exp();
                let unclipped = ratio * a;
                let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * a;
                if unclipped <= clipped {
                    (unclipped, a * ratio)
                } else {
                    (clipped, 0.0)
                }
            }
        };
        policy_term += surrogate;
        // d(-beta*KL)/d(lc) = -beta * (1 - exp(lr - lc))
        let d_objective = d_surrogate - beta * (1.0 - (lr - lc).exp());
        let coefficient = -d_objective / gf;
        if !coefficient.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for response {i}")));
        }
        terms.push(SignalTerm { question: group.question.clone(), response: group.responses[i].clone(), coefficient });
    }
    let objective = (policy_term - beta * kl_total) / gf;
    let value = ObjectiveValue { loss: -objective, objective, policy_term: policy_term / gf, kl_mean: kl_total / gf };
    Ok((value, GradientSignal { learning_rate: config.learning_rate, terms }))
}

/// Per-response reward used during reinforcement fine-tuning.
pub trait RewardFn: Sync {
    fn eligible(&self, _record: &CurationRecord) -> bool {
        true
    }

    fn reward(&self, record: &CurationRecord, response: &RawResponse) -> Result<RewardBreakdown>;
}

/// Pays 1 for a well-formed response and nothing else.
#[derive(Debug, Clone, Copy, Default)]
pub struct FormatOnlyReward;

impl RewardFn for FormatOnlyReward {
    fn reward(&self, _record: &CurationRecord, response: &RawResponse) -> Result<RewardBreakdown> {
        Ok(RewardBreakdown::new(0.0, format_reward(response)))
    }
}

/// Normalized image-text alignment against the record's ground-truth photo
/// plus the format reward. Records without a photo are not eligible.
pub struct AlignmentFormatReward {
    scorer: Arc<dyn ImageTextScorer>,
    images: HashMap<PathBuf, RgbImage>,
}

impl AlignmentFormatReward {
    pub fn load(records: &[CurationRecord], scorer: Arc<dyn ImageTextScorer>) -> Result<Self> {
        let mut images = HashMap::new();
        for p in records.iter().filter_map(|r| r.gt_image_path.as_ref()) {
            if !images.contains_key(p) {
                images.insert(p.clone(), load_rgb(p)?);
            }
        }
        Ok(AlignmentFormatReward { scorer, images })
    }
}

impl RewardFn for AlignmentFormatReward {
    fn eligible(&self, record: &CurationRecord) -> bool {
        record.gt_image_path.as_ref().is_some_and(|p| self.images.contains_key(p))
    }

    fn reward(&self, record: &CurationRecord, response: &RawResponse) -> Result<RewardBreakdown> {
        let path = record
            .gt_image_path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record `{}` has no ground-truth image", record.id)))?;
        let img = self.images.get(path).ok_or_else(|| Error::invalid(format!("image {} not loaded", path.display())))?;
        Ok(rft_reward(img, response, self.scorer.as_ref())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftLogRow {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RftLogRow {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub objective: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub format_rate: f64,
    pub kl_mean: f64,
    pub degenerate_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub phase: String,
    pub start_step: usize,
    /// Global step count after the run.
    pub end_step: usize,
    pub losses: Vec<f64>,
    pub state: PolicyState,
}

fn update_or_abort(policy: &mut dyn PolicyBackend, signal: &GradientSignal, step: usize) -> Result<PolicyState> {
    let last_good = policy.state();
    policy.apply_update(signal).map_err(|e| {
        Error::from(BackendError {
            kind: e.kind,
            message: format!(
                "update at step {step} failed: {}; last good state after step {} has digest {}",
                e.message,
                step.saturating_sub(1),
                last_good.digest
            ),
        })
    })
}

/// Index of the record used at data position `pos` under per-epoch shuffles.
fn shuffled_index(n: usize, pos: usize, seed: u64, stage: &str, cache: &mut Option<(usize, Vec<usize>)>) -> usize {
    let epoch = pos / n;
    if cache.as_ref().map(|c| c.0) != Some(epoch) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stage, epoch as u64)));
        *cache = Some((epoch, order));
    }
    cache.as_ref().expect("filled above").1[pos % n]
}

/// Supervised fine-tuning over the kept records, starting at global step
/// `start_step` so that resumed runs continue numbering and data order.
pub fn train_sft(
    records: &[CurationRecord],
    policy: &mut dyn PolicyBackend,
    config: &SftConfig,
    seed: u64,
    start_step: usize,
    log: &mut dyn FnMut(&SftLogRow) -> Result<()>,
) -> Result<TrainSummary> {
    if records.is_empty() {
        return Err(Error::invalid("cannot fine-tune on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("sft batch_size must be positive".into()));
    }
    let n = records.len();
    let steps = config.max_steps.unwrap_or_else(|| config.epochs * n.div_ceil(config.batch_size));
    let mut losses = Vec::with_capacity(steps);
    let mut cache = None;
    for step in start_step..start_step + steps {
        let batch: Vec<&CurationRecord> = (0..config.batch_size)
            .map(|j| &records[shuffled_index(n, step * config.batch_size + j, seed, "sft-epoch", &mut cache)])
            .collect();
        let (loss, signal) = sft_loss(&batch, &*policy, config.learning_rate)?;
        update_or_abort(policy, &signal, step)?;
        losses.push(loss);
        log(&SftLogRow { phase: "sft".into(), step: step + 1, loss, batch_size: batch.len() })?;
    }
    Ok(TrainSummary { phase: "sft".into(), start_step, end_step: start_step + steps, losses, state: policy.state() })
}

/// Group-relative reinforcement fine-tuning against `reward_fn`.
#[allow(clippy::too_many_arguments)]
pub fn train_rft(
    records: &[CurationRecord],
    policy: &mut dyn PolicyBackend,
    reference: Arc<dyn ReferencePolicy>,
    reward_fn: &dyn RewardFn,
    config: &RftConfig,
    seed: u64,
    start_step: usize,
    log: &mut dyn FnMut(&RftLogRow) -> Result<()>,
) -> Result<TrainSummary> {
    config.validate()?;
    let eligible: Vec<&CurationRecord> = records.iter().filter(|r| reward_fn.eligible(r)).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no records are eligible for reinforcement fine-tuning"));
    }
    if eligible.len() < records.len() {
        log::info!("{} of {} records lack a ground-truth image and are skipped", records.len() - eligible.len(), records.len());
    }
    let n = eligible.len();
    let mut cache = None;
    let mut losses = Vec::with_capacity(config.steps);
    for step in start_step..start_step + config.steps {
        let mut groups = Vec::with_capacity(config.batch_size);
        let mut all_rewards = Vec::new();
        let mut well_formed = 0usize;
        let mut degenerate = 0usize;
        for j in 0..config.batch_size {
            let pos = step * config.batch_size + j;
            let record = eligible[shuffled_index(n, pos, seed, "rft-epoch", &mut cache)];
            let sample_seed = derive_seed(seed, "rft-sample", pos as u64);
            let mut group = sample_group(&*policy, reference.as_ref(), &record.question_text, config, sample_seed)?;
            let breakdowns: Vec<RewardBreakdown> =
                par::map_indexed(&group.responses, |_, r| reward_fn.reward(record, r)).into_iter().collect::<Result<_>>()?;
            well_formed += breakdowns.iter().filter(|b| b.format > 0.0).count();
            group.rewards = breakdowns.iter().map(|b| b.total).collect();
            group.advantages = compute_advantages(&group.rewards, config.epsilon)?;
            if group.advantages.iter().all(|&a| a == 0.0) {
                degenerate += 1;
            }
            all_rewards.extend_from_slice(&group.rewards);
            groups.push(group);
        }

        let inner = match config.objective {
            ObjectiveMode::Literal => 1,
            ObjectiveMode::ClippedRatio { inner_updates, .. } => inner_updates,
        };
        let mut first_value = None;
        for k in 0..inner {
            if k > 0 {
                for g in &mut groups {
                    g.logprobs_current = logprobs(&*policy, &g.question, &g.responses)?;
                }
            }
            let mut signal = GradientSignal { learning_rate: config.learning_rate, terms: Vec::new() };
            let mut value = ObjectiveValue { loss: 0.0, objective: 0.0, policy_term: 0.0, kl_mean: 0.0 };
            let b = groups.len() as f64;
            for g in &groups {
                let (v, s) = rft_objective(g, config)?;
                value.loss += v.loss / b;
                value.objective += v.objective / b;
                value.policy_term += v.policy_term / b;
                value.kl_mean += v.kl_mean / b;
                signal.terms.extend(s.terms.into_iter().map(|mut t| {
                    t.coefficient /= b;
                    t
                }));
            }
            update_or_abort(policy, &signal, step)?;
            first_value.get_or_insert(value);
        }
        let value = first_value.expect("at least one inner update");

        let count = all_rewards.len() as f64;
        let mean = all_rewards.iter().sum::<f64>() / count;
        let std = (all_rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / count).sqrt();
        losses.push(value.loss);
        log(&RftLogRow {
            phase: "rft".into(),
            step: step + 1,
            loss: value.loss,
            objective: value.objective,
            reward_mean: mean,
            reward_std: std,
            format_rate: well_formed as f64 / count,
            kl_mean: value.kl_mean,
            degenerate_groups: degenerate,
        })?;
    }
    Ok(TrainSummary { phase: "rft".into(), start_step, end_step: start_step + config.steps, losses, state: policy.state() })
}

/// Trailing moving average with a window of up to `window` points.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Checkpoint metadata persisted next to the backend state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub phase: String,
    pub step: usize,
    pub config_digest: String,
    pub tool_version: String,
    pub policy_digest: String,
    /// Backend state file, relative to the metadata file.
    pub state_file: String,
}

impl CheckpointMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        text.push('\n');
        crate::jsonl::write_text(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
    }

    pub fn state_path(&self, meta_path: &Path) -> PathBuf {
        meta_path.parent().unwrap_or(Path::new(".")).join(&self.state_file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockPolicy;
    use proptest::prelude::*;

    /// Reports preset logprobs per response text.
    struct FixedLogprobs(HashMap<String, f64>);

    impl ReferencePolicy for FixedLogprobs {
        fn sequence_logprob(&self, _q: &str, r: &RawResponse) -> Result<f64, BackendError> {
            Ok(self.0[r.as_str()])
        }
    }

    fn kept(id: &str, response: &str) -> CurationRecord {
        CurationRecord {
            id: id.into(),
            control_type: crate::ControlType::Canny,
            control_image_path: "c.png".into(),
            gt_image_path: None,
            original_prompt: "p".into(),
            question_text: format!("question {id}"),
            template_version: "t".into(),
            response_text: response.into(),
            think_text: String::new(),
            answer_text: String::new(),
            well_formed: true,
            rejected_reason: None,
        }
    }

    #[test]
    fn sft_loss_values() {
        let fixed = FixedLogprobs(HashMap::from([("one".into(), 0.0), ("e3".into(), -3.0), ("e1".into(), -1.0)]));
        let (a, b, c) = (kept("a", "one"), kept("b", "e3"), kept("c", "e1"));
        assert_eq!(sft_loss(&[&a, &a], &fixed, 0.1).unwrap().0, 0.0);
        assert_eq!(sft_loss(&[&b], &fixed, 0.1).unwrap().0, 3.0);
        let (loss, signal) = sft_loss(&[&c, &b], &fixed, 0.1).unwrap();
        assert_eq!(loss, 2.0);
        assert!(signal.terms.iter().all(|t| t.coefficient == -0.5));
        assert!(sft_loss(&[], &fixed, 0.1).is_err());
    }

    #[test]
    fn sft_loss_matches_mock_logprobs() {
        let p = MockPolicy::new(0);
        let recs = [kept("a", "<think>a</think><answer>cat</answer>"), kept("b", "<think>red</think><answer>sofa</answer>")];
        let lps: Vec<f64> = recs.iter().map(|r| p.sequence_logprob("", &r.response_text).unwrap()).collect();
        let (loss, _) = sft_loss(&recs.iter().collect::<Vec<_>>(), &p, 0.1).unwrap();
        assert!((loss - (-(lps[0] + lps[1]) / 2.0)).abs() < 1e-12);
        assert!(loss >= 0.0);
    }

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (x, e) in a.iter().zip(expected) {
            assert!((x - e).abs() < 1e-6);
        }
        assert_eq!(compute_advantages(&[5.0, 5.0, 5.0], 1e-8).unwrap(), [0.0; 3]);
        assert_eq!(compute_advantages(&[0.0, 2.0], 1e-8).unwrap(), [-1.0, 1.0]);
        assert!(compute_advantages(&[1.0], 1e-8).is_err());
    }

    fn group(adv: Vec<f64>, lc: Vec<f64>, lr: Vec<f64>) -> TrajectoryGroup {
        let responses = (0..adv.len()).map(|i| RawResponse(format!("r{i}"))).collect();
        TrajectoryGroup {
            question: "q".into(),
            responses,
            rewards: vec![0.0; adv.len()],
            advantages: adv,
            logprobs_old: lc.clone(),
            logprobs_current: lc,
            logprobs_ref: lr,
        }
    }

    #[test]
    fn objective_examples() {
        let cfg = RftConfig::default();
        let (v, _) = rft_objective(&group(vec![0.0, 0.0], vec![-2.0, -1.0], vec![-2.0, -1.0]), &cfg).unwrap();
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.kl_mean, 0.0);

        let cfg0 = RftConfig { kl_coefficient: 0.0, ..RftConfig::default() };
        let (v, _) = rft_objective(&group(vec![-1.0, 1.0], vec![-2.0, -1.0], vec![-5.0, -5.0]), &cfg0).unwrap();
        assert!((v.objective - 0.5).abs() < 1e-15);
        assert!((v.loss + 0.5).abs() < 1e-15);

        let (v, _) = rft_objective(&group(vec![-1.0, 1.0], vec![-2.0, -1.0], vec![-2.0, -1.0]), &cfg).unwrap();
        assert_eq!(v.kl_mean, 0.0);

        let bad = group(vec![0.0, 0.0], vec![f64::NAN, -1.0], vec![-1.0, -1.0]);
        match rft_objective(&bad, &cfg) {
            Err(Error::Numerical(m)) => assert!(m.contains("response 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn signal_matches_finite_differences() {
        let cfg = RftConfig { kl_coefficient: 0.3, ..RftConfig::default() };
        let base = group(vec![-1.2, 0.4, 0.8], vec![-3.0, -2.5, -4.0], vec![-2.8, -2.9, -3.1]);
        let (_, signal) = rft_objective(&base, &cfg).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut plus = base.clone();
            plus.logprobs_current[i] += h;
            let mut minus = base.clone();
            minus.logprobs_current[i] -= h;
            let fd = (rft_objective(&plus, &cfg).unwrap().0.loss - rft_objective(&minus, &cfg).unwrap().0.loss) / (2.0 * h);
            assert!((fd - signal.terms[i].coefficient).abs() < 1e-7, "{i}: {fd} vs {}", signal.terms[i].coefficient);
        }
    }

    #[test]
    fn single_advantage_sign_drives_logprob() {
        let cfg = RftConfig { kl_coefficient: 0.0, learning_rate: 0.5, ..RftConfig::default() };
        for sign in [1.0, -1.0] {
            let mut p = MockPolicy::new(3);
            let r = RawResponse::from("<think>a</think><answer>cat</answer>");
            let other = RawResponse::from("sofa");
            let lc = vec![p.sequence_logprob("q", &r).unwrap(), p.sequence_logprob("q", &other).unwrap()];
            let g = TrajectoryGroup {
                question: "q".into(),
                responses: vec![r.clone(), other],
                rewards: vec![0.0; 2],
                advantages: vec![sign, 0.0],
                logprobs_old: lc.clone(),
                logprobs_ref: lc.clone(),
                logprobs_current: lc.clone(),
            };
            let (_, signal) = rft_objective(&g, &cfg).unwrap();
            p.apply_update(&signal).unwrap();
            let after = p.sequence_logprob("q", &r).unwrap();
            assert_eq!((after - lc[0]).signum(), sign);
        }
    }

    #[test]
    fn group_sampling() {
        let p = MockPolicy::new(1);
        let snap = p.snapshot();
        let cfg = RftConfig::default();
        let a = sample_group(&p, snap.as_ref(), "q", &cfg, 9).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, sample_group(&p, snap.as_ref(), "q", &cfg, 9).unwrap());
        assert_eq!(a.logprobs_current, a.logprobs_ref);
        let one = RftConfig { group_size: 1, ..cfg };
        assert!(sample_group(&p, snap.as_ref(), "q", &one, 9).is_err());
    }

    fn synthetic_records(n: usize) -> Vec<CurationRecord> {
        let words = ["a", "red", "cat", "sits", "on", "sofa"];
        (0..n)
            .map(|i| {
                let t = format!("{} {}", words[i % 6], words[(i + 2) % 6]);
                let a = format!("{} {} {}", words[(i + 1) % 6], words[(i + 3) % 6], words[(i + 4) % 6]);
                kept(&format!("s{i}"), &crate::format::render(&t, &a))
            })
            .collect()
    }

    #[test]
    fn sft_descends_and_is_deterministic() {
        let recs = synthetic_records(20);
        let cfg = SftConfig { learning_rate: 0.5, batch_size: 4, epochs: 1, max_steps: Some(30) };
        let run = || {
            let mut p = MockPolicy::new(2);
            train_sft(&recs, &mut p, &cfg, 5, 0, &mut |_| Ok(())).unwrap()
        };
        let a = run();
        assert_eq!(a.losses.len(), 30);
        let head: f64 = a.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = a.losses[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
        assert_eq!(a, run());

        let mut p = MockPolicy::new(2);
        let before = p.state();
        let zero = SftConfig { max_steps: Some(0), ..cfg };
        let s = train_sft(&recs, &mut p, &zero, 5, 0, &mut |_| Ok(())).unwrap();
        assert_eq!(s.state, before);
        assert!(train_sft(&[], &mut p, &cfg, 5, 0, &mut |_| Ok(())).is_err());
    }

    #[test]
    fn resume_continues_numbering_and_order() {
        let recs = synthetic_records(7);
        let cfg = SftConfig { learning_rate: 0.3, batch_size: 3, epochs: 1, max_steps: Some(10) };
        let mut full = MockPolicy::new(4);
        let mut rows = Vec::new();
        train_sft(&recs, &mut full, &cfg, 1, 0, &mut |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();

        let mut part = MockPolicy::new(4);
        let mut resumed = Vec::new();
        let first = SftConfig { max_steps: Some(4), ..cfg.clone() };
        let s = train_sft(&recs, &mut part, &first, 1, 0, &mut |r| {
            resumed.push(r.clone());
            Ok(())
        })
        .unwrap();
        let rest = SftConfig { max_steps: Some(6), ..cfg };
        train_sft(&recs, &mut part, &rest, 1, s.end_step, &mut |r| {
            resumed.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rows, resumed);
        assert_eq!(resumed.last().unwrap().step, 10);
    }

    struct ConstantReward;

    impl RewardFn for ConstantReward {
        fn reward(&self, _: &CurationRecord, _: &RawResponse) -> Result<RewardBreakdown> {
            Ok(RewardBreakdown::new(0.5, 1.0))
        }
    }

    #[test]
    fn degenerate_rewards_leave_policy_unchanged() {
        let recs = synthetic_records(3);
        let mut p = MockPolicy::new(6);
        let before = p.export_state().unwrap();
        let reference = p.snapshot();
        let cfg = RftConfig { kl_coefficient: 0.0, learning_rate: 1.0, steps: 20, group_size: 4, ..RftConfig::default() };
        let mut rows = Vec::new();
        train_rft(&recs, &mut p, reference, &ConstantReward, &cfg, 0, 0, &mut |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(p.export_state().unwrap(), before);
        assert!(rows.iter().all(|r| r.degenerate_groups == 1));
    }

    #[test]
    fn clipped_mode_runs_and_learns() {
        let recs = synthetic_records(3);
        let mut p = MockPolicy::new(7);
        let reference = p.snapshot();
        let cfg = RftConfig {
            kl_coefficient: 0.0,
            learning_rate: 0.5,
            steps: 150,
            group_size: 8,
            objective: ObjectiveMode::ClippedRatio { clip_epsilon: 0.2, inner_updates: 2 },
            ..RftConfig::default()
        };
        let mut rates = Vec::new();
        train_rft(&recs, &mut p, reference, &FormatOnlyReward, &cfg, 0, 0, &mut |r| {
            rates.push(r.format_rate);
            Ok(())
        })
        .unwrap();
        let smooth = moving_average(&rates, 20);
        assert!(smooth.last().unwrap() > &smooth[19]);
    }

    #[test]
    fn config_validation() {
        assert!(RftConfig { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(RftConfig { kl_coefficient: -1.0, ..Default::default() }.validate().is_err());
        assert!(RftConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(RftConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in proptest::collection::vec(-100.0f64..100.0, 2..64)) {
            let a = compute_advantages(&rewards, 1e-8).unwrap();
            let n = a.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assume!(std > 1e-8);
            let am = a.iter().sum::<f64>() / n;
            let astd = (a.iter().map(|x| (x - am).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(am.abs() < 1e-9);
            prop_assert!((astd - 1.0).abs() < 1e-9);
        }

        #[test]
        fn advantages_affine_invariant(
            rewards in proptest::collection::vec(-10.0f64..10.0, 2..32),
            scale in 0.01f64..100.0,
            shift in -1000.0f64..1000.0,
        ) {
            let a = compute_advantages(&rewards, 1e-8).unwrap();
            let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
            let b = compute_advantages(&moved, 1e-8).unwrap();
            prop_assume!(a.iter().any(|&x| x != 0.0) && b.iter().any(|&x| x != 0.0));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_nonnegative(lr in -50.0f64..0.0, lc in -50.0f64..0.0) {
            let k = kl_estimate(lr, lc);
            prop_assert!(k >= 0.0);
            prop_assert_eq!(kl_estimate(lr, lr), 0.0);
            if lr != lc {
                prop_assert!(k > 0.0 || (lr - lc).abs() < 1e-7);
            }
        }
    }
}
