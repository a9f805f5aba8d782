//! A tiny trainable token-sequence policy.
//!
//! The policy is a first-order Markov chain over a small vocabulary (the four
//! format tags, a handful of words, `<unk>` and end-of-sequence). Each context
//! token owns a row of logits; the next token is drawn from the softmax of
//! that row. The question is ignored. Gradients of sequence log-probabilities
//! are exact: for every step `(ctx, tok)` the row `ctx` receives
//! `onehot(tok) - softmax(row)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GradientSignal, PolicyBackend, PolicyState, ReferencePolicy};
use crate::digest::sha256_hex;
use crate::error::BackendError;
use crate::format::{RawResponse, TAGS};

const EOS: usize = 0;
const UNK_TEXT: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockPolicyConfig {
    pub words: Vec<String>,
    pub max_len: usize,
    /// Half-width of the uniform noise used to initialize logits.
    pub init_scale: f64,
    /// Logit bonus on the transitions start->`<think>`, `</think>`->`<answer>`
    /// and `</answer>`->end, giving the untrained chain a small but nonzero
    /// chance of emitting the tag layout.
    pub format_prior: f64,
    /// Updates are rescaled so the gradient L2 norm never exceeds this.
    pub max_grad_norm: f64,
}

impl Default for MockPolicyConfig {
    fn default() -> Self {
        MockPolicyConfig {
            words: ["a", "red", "cat", "sits", "on", "sofa"].map(String::from).to_vec(),
            max_len: 12,
            init_scale: 0.5,
            format_prior: 2.0,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Params {
    vocab: Vec<String>,
    max_len: usize,
    /// Row 0 is the start context; row `1 + t` follows token `t`.
    logits: Vec<Vec<f64>>,
}

impl Params {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn probs(&self, ctx: usize, temperature: f64) -> Vec<f64> {
        let row = &self.logits[ctx];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| ((l - max) / temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    fn log_softmax_at(&self, ctx: usize, tok: usize) -> f64 {
        let row = &self.logits[ctx];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        (row[tok] - lse).min(0.0)
    }

    /// Context/token pairs visited while emitting `tokens`, including the
    /// closing end-of-sequence step when the sequence is shorter than max_len.
    fn steps(&self, tokens: &[usize]) -> Vec<(usize, usize)> {
        let mut ctx = 0;
        let mut out = Vec::with_capacity(tokens.len() + 1);
        for &t in tokens {
            out.push((ctx, t));
            ctx = 1 + t;
        }
        if tokens.len() < self.max_len {
            out.push((ctx, EOS));
        }
        out
    }

    fn logprob(&self, tokens: &[usize]) -> f64 {
        self.steps(tokens).into_iter().map(|(c, t)| self.log_softmax_at(c, t)).sum()
    }

    fn is_special(&self, tok: usize) -> bool {
        let s = &self.vocab[tok];
        s.starts_with('<')
    }

    fn tokenize(&self, text: &str) -> Vec<usize> {
        let unk = self.vocab_size() - 1;
        let specials: Vec<(usize, &str)> = self
            .vocab
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != EOS && self.is_special(*i))
            .map(|(i, s)| (i, s.as_str()))
            .collect();
        let special_at = |rest: &str| specials.iter().find(|(_, s)| rest.starts_with(s)).copied();

        let mut tokens = Vec::new();
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            if let Some((tok, s)) = special_at(rest) {
                tokens.push(tok);
                i += s.len();
                continue;
            }
            let c = rest.chars().next().expect("non-empty");
            if c.is_whitespace() {
                i += c.len_utf8();
                continue;
            }
            let mut end = i;
            for (off, ch) in rest.char_indices() {
                if ch.is_whitespace() || (off > 0 && special_at(&rest[off..]).is_some()) {
                    break;
                }
                end = i + off + ch.len_utf8();
            }
            let word = &text[i..end];
            let tok = self.vocab.iter().position(|v| v == word).filter(|&p| p != EOS).unwrap_or(unk);
            tokens.push(tok);
            i = end;
        }
        tokens
    }

    fn render(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &t in tokens {
            let special = self.is_special(t);
            if !special && prev_word {
                out.push(' ');
            }
            out.push_str(&self.vocab[t]);
            prev_word = !special;
        }
        out
    }
}

/// Trainable categorical sequence policy for desk-scale runs and tests.
#[derive(Debug, Clone)]
pub struct MockPolicy {
    params: Params,
    max_grad_norm: f64,
    updates: u64,
}

impl MockPolicy {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, &MockPolicyConfig::default())
    }

    pub fn with_config(seed: u64, config: &MockPolicyConfig) -> Self {
        let mut vocab = vec!["</s>".to_owned()];
        vocab.extend(TAGS.iter().map(|t| t.to_string()));
        vocab.extend(config.words.iter().filter(|w| !w.is_empty() && !w.starts_with('<')).cloned());
        vocab.push(UNK_TEXT.to_owned());
        let v = vocab.len();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits: Vec<Vec<f64>> =
            (0..=v).map(|_| (0..v).map(|_| config.init_scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).collect();
        let idx = |s: &str| vocab.iter().position(|x| x == s).expect("tag in vocab");
        let (think_open, think_close, answer_open, answer_close) = (idx(TAGS[0]), idx(TAGS[1]), idx(TAGS[2]), idx(TAGS[3]));
        logits[0][think_open] += config.format_prior;
        logits[1 + think_close][answer_open] += config.format_prior;
        logits[1 + answer_close][EOS] += config.format_prior;

        MockPolicy {
            params: Params { vocab, max_len: config.max_len.max(1), logits },
            max_grad_norm: config.max_grad_norm,
            updates: 0,
        }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.params.vocab
    }

    /// Canonical text of a response as this policy would emit it.
    pub fn normalize(&self, response: &RawResponse) -> RawResponse {
        RawResponse(self.params.render(&self.params.tokenize(response.as_str())))
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng, temperature: f64) -> RawResponse {
        let mut tokens = Vec::new();
        let mut ctx = 0;
        while tokens.len() < self.params.max_len {
            let probs = self.params.probs(ctx, temperature);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = i;
                    break;
                }
            }
            if tok == EOS {
                break;
            }
            tokens.push(tok);
            ctx = 1 + tok;
        }
        RawResponse(self.params.render(&tokens))
    }
}

#[derive(Debug)]
struct FrozenPolicy(Params);

impl ReferencePolicy for FrozenPolicy {
    fn sequence_logprob(&self, _question: &str, response: &RawResponse) -> Result<f64, BackendError> {
        Ok(self.0.logprob(&self.0.tokenize(response.as_str())))
    }
}

impl ReferencePolicy for MockPolicy {
    fn sequence_logprob(&self, _question: &str, response: &RawResponse) -> Result<f64, BackendError> {
        Ok(self.params.logprob(&self.params.tokenize(response.as_str())))
    }
}

impl PolicyBackend for MockPolicy {
    fn sample(&self, _question: &str, count: usize, temperature: f64, seed: u64) -> Result<Vec<RawResponse>, BackendError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(BackendError::malformed(format!("invalid sampling temperature {temperature}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count).map(|_| self.sample_one(&mut rng, temperature)).collect())
    }

    fn apply_update(&mut self, signal: &GradientSignal) -> Result<PolicyState, BackendError> {
        let v = self.params.vocab_size();
        let mut grad = vec![vec![0.0; v]; v + 1];
        for term in &signal.terms {
            if !term.coefficient.is_finite() {
                return Err(BackendError::malformed("non-finite gradient coefficient"));
            }
            if term.coefficient == 0.0 {
                continue;
            }
            let tokens = self.params.tokenize(term.response.as_str());
            for (ctx, tok) in self.params.steps(&tokens) {
                let probs = self.params.probs(ctx, 1.0);
                for (k, p) in probs.iter().enumerate() {
                    let onehot = if k == tok { 1.0 } else { 0.0 };
                    grad[ctx][k] += term.coefficient * (onehot - p);
                }
            }
        }
        let norm = grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 0.0 {
            let scale = if norm > self.max_grad_norm { self.max_grad_norm / norm } else { 1.0 };
            for (row, grow) in self.params.logits.iter_mut().zip(&grad) {
                for (l, g) in row.iter_mut().zip(grow) {
                    *l -= signal.learning_rate * scale * g;
                }
            }
        }
        self.updates += 1;
        Ok(self.state())
    }

    fn snapshot(&self) -> Arc<dyn ReferencePolicy> {
        Arc::new(FrozenPolicy(self.params.clone()))
    }

    fn state(&self) -> PolicyState {
        let bytes = serde_json::to_vec(&self.params).expect("params serialize");
        PolicyState { updates: self.updates, digest: sha256_hex(&bytes) }
    }

    fn export_state(&self) -> Result<serde_json::Value, BackendError> {
        serde_json::to_value(&self.params).map_err(|e| BackendError::malformed(e.to_string()))
    }

    fn import_state(&mut self, state: &serde_json::Value) -> Result<(), BackendError> {
        let params: Params = serde_json::from_value(state.clone()).map_err(|e| BackendError::malformed(e.to_string()))?;
        let v = params.vocab.len();
        if v < 6 || params.logits.len() != v + 1 || params.logits.iter().any(|r| r.len() != v) {
            return Err(BackendError::malformed("policy state has inconsistent shapes"));
        }
        self.params = params;
        Ok(())
    }
}
