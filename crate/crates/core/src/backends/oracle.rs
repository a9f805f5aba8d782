use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::OracleClient;
use crate::digest::{image_digest, unit_hash};
use crate::error::{BackendError, BackendErrorKind};
use crate::format::{render, RawResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    /// Per-attempt deadline; `None` waits indefinitely.
    pub timeout_ms: Option<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay_ms: 500, timeout_ms: Some(120_000) }
    }
}

/// Wraps an oracle with bounded retries, exponential backoff and a
/// per-attempt timeout. Transport and timeout failures are retried; malformed
/// output is returned immediately.
pub struct RetryingOracle {
    inner: Arc<dyn OracleClient>,
    policy: RetryPolicy,
}

impl RetryingOracle {
    pub fn new(inner: Arc<dyn OracleClient>, policy: RetryPolicy) -> Self {
        RetryingOracle { inner, policy }
    }

    fn attempt(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        attachments: &[RgbImage],
        seed: u64,
    ) -> Result<RawResponse, BackendError> {
        let Some(ms) = self.policy.timeout_ms else {
            return self.inner.complete(system_prompt, user_prompt, attachments, seed);
        };
        let (tx, rx) = mpsc::channel();
        let inner = Arc::clone(&self.inner);
        let (system, user, images) = (system_prompt.to_owned(), user_prompt.to_owned(), attachments.to_vec());
        thread::spawn(move || {
            let _ = tx.send(inner.complete(&system, &user, &images, seed));
        });
        rx.recv_timeout(Duration::from_millis(ms))
            .unwrap_or_else(|_| Err(BackendError::timeout(format!("oracle did not answer within {ms} ms"))))
    }
}

impl OracleClient for RetryingOracle {
    fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        attachments: &[RgbImage],
        seed: u64,
    ) -> Result<RawResponse, BackendError> {
        let mut attempt = 0;
        loop {
            match self.attempt(system_prompt, user_prompt, attachments, seed) {
                Ok(r) => return Ok(r),
                Err(e) if e.kind == BackendErrorKind::MalformedOutput => return Err(e),
                Err(e) if attempt >= self.policy.max_retries => {
                    return Err(BackendError { kind: e.kind, message: format!("{} (after {} attempts)", e.message, attempt + 1) })
                }
                Err(e) => {
                    let delay = self.policy.base_delay_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("oracle attempt {} failed: {e}; retrying in {delay} ms", attempt + 1);
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
            }
        }
    }

    fn order_sensitive(&self) -> bool {
        self.inner.order_sensitive()
    }
}

/// What a scripted oracle received on one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleCall {
    pub system_prompt: String,
    pub user_prompt: String,
    pub attachment_count: usize,
    pub seed: u64,
}

/// Replays a fixed sequence of outcomes, one per call. Once the script runs
/// out every call fails with a transport error.
#[derive(Debug, Default)]
pub struct ScriptedOracle {
    script: Mutex<VecDeque<Result<String, BackendError>>>,
    calls: Mutex<Vec<OracleCall>>,
}

impl ScriptedOracle {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_outcomes(responses.into_iter().map(|s| Ok(s.into())))
    }

    pub fn from_outcomes(outcomes: impl IntoIterator<Item = Result<String, BackendError>>) -> Self {
        ScriptedOracle { script: Mutex::new(outcomes.into_iter().collect()), calls: Mutex::default() }
    }

    pub fn calls(&self) -> Vec<OracleCall> {
        self.calls.lock().expect("oracle call log").clone()
    }
}

impl OracleClient for ScriptedOracle {
    fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        attachments: &[RgbImage],
        seed: u64,
    ) -> Result<RawResponse, BackendError> {
        self.calls.lock().expect("oracle call log").push(OracleCall {
            system_prompt: system_prompt.to_owned(),
            user_prompt: user_prompt.to_owned(),
            attachment_count: attachments.len(),
            seed,
        });
        match self.script.lock().expect("oracle script").pop_front() {
            Some(outcome) => outcome.map(RawResponse),
            None => Err(BackendError::transport("oracle script exhausted")),
        }
    }

    fn order_sensitive(&self) -> bool {
        true
    }
}

/// Stateless stand-in for a hosted reasoning model: writes a plausible
/// think/answer response from the original prompt quoted in the user message.
///
/// A deterministic fraction `flaw_rate` of responses is deliberately bad
/// (broken tags or a leaked reference to the attached photo) so that filtering
/// has something to do.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    pub flaw_rate: f64,
}

const DETAILS: [&str; 8] = [
    "soft window light from the left",
    "a wooden floor with visible grain",
    "muted warm colors",
    "a shallow depth of field",
    "a cloudy sky in the background",
    "natural skin tones and relaxed posture",
    "green plants near the edges",
    "clean studio lighting",
];

impl SyntheticOracle {
    pub fn new(flaw_rate: f64) -> Self {
        SyntheticOracle { flaw_rate }
    }
}

fn quoted_prompt(user_prompt: &str) -> &str {
    user_prompt.split_once("Original prompt: \"").and_then(|(_, rest)| rest.split_once("\"\n")).map(|(p, _)| p).unwrap_or("")
}

impl OracleClient for SyntheticOracle {
    fn complete(
        &self,
        _system_prompt: &str,
        user_prompt: &str,
        attachments: &[RgbImage],
        seed: u64,
    ) -> Result<RawResponse, BackendError> {
        let digests: Vec<[u8; 32]> = attachments.iter().map(image_digest).collect();
        let mut parts: Vec<&[u8]> = vec![user_prompt.as_bytes()];
        parts.extend(digests.iter().map(|d| d.as_slice()));
        let seed_bytes = seed.to_le_bytes();
        parts.push(&seed_bytes);
        let u = unit_hash(&parts);
        let pick = |salt: u8| {
            let mut p = parts.clone();
            let s = [salt];
            p.push(&s);
            DETAILS[(unit_hash(&p) * DETAILS.len() as f64) as usize % DETAILS.len()]
        };

        let prompt = quoted_prompt(user_prompt).trim();
        let subject = if prompt.is_empty() { "an everyday scene" } else { prompt.trim_end_matches('.') };
        let (d1, d2) = (pick(1), pick(2));
        let think = format!(
            "The control image outlines the main layout. The subject is {subject}. \
             The contours suggest {d1}, and the surroundings imply {d2}."
        );
        let answer = format!("{subject}, with {d1} and {d2}, photorealistic");

        let text = if u < self.flaw_rate / 2.0 {
            format!("<think>{think}</think>{answer}")
        } else if u < self.flaw_rate {
            render(&think, &format!("As the reference image shows, {answer}"))
        } else {
            render(&think, &answer)
        };
        Ok(RawResponse(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: AtomicU32,
        fail_first: u32,
        kind: BackendErrorKind,
    }

    impl OracleClient for Flaky {
        fn complete(&self, _: &str, _: &str, _: &[RgbImage], _: u64) -> Result<RawResponse, BackendError> {
            let n = self.failures.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(BackendError { kind: self.kind, message: "flaky".into() })
            } else {
                Ok("<think>t</think><answer>a</answer>".into())
            }
        }
    }

    fn no_wait() -> RetryPolicy {
        RetryPolicy { max_retries: 2, base_delay_ms: 0, timeout_ms: None }
    }

    #[test]
    fn retries_transport_failures() {
        let inner = Arc::new(Flaky { failures: AtomicU32::new(0), fail_first: 2, kind: BackendErrorKind::Transport });
        let oracle = RetryingOracle::new(inner.clone(), no_wait());
        assert!(oracle.complete("s", "u", &[], 0).is_ok());
        assert_eq!(inner.failures.load(Ordering::SeqCst), 3);

        let inner = Arc::new(Flaky { failures: AtomicU32::new(0), fail_first: 5, kind: BackendErrorKind::Transport });
        let err = RetryingOracle::new(inner.clone(), no_wait()).complete("s", "u", &[], 0).unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::Transport);
        assert_eq!(inner.failures.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn malformed_output_is_not_retried() {
        let inner = Arc::new(Flaky { failures: AtomicU32::new(0), fail_first: 5, kind: BackendErrorKind::MalformedOutput });
        let err = RetryingOracle::new(inner.clone(), no_wait()).complete("s", "u", &[], 0).unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::MalformedOutput);
        assert_eq!(inner.failures.load(Ordering::SeqCst), 1);
    }

    struct Slow;

    impl OracleClient for Slow {
        fn complete(&self, _: &str, _: &str, _: &[RgbImage], _: u64) -> Result<RawResponse, BackendError> {
            thread::sleep(Duration::from_millis(300));
            Ok("late".into())
        }
    }

    #[test]
    fn slow_oracle_times_out() {
        let policy = RetryPolicy { max_retries: 0, base_delay_ms: 0, timeout_ms: Some(20) };
        let err = RetryingOracle::new(Arc::new(Slow), policy).complete("s", "u", &[], 0).unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::Timeout);
    }

    #[test]
    fn script_replays_then_fails() {
        let oracle = ScriptedOracle::new(["one", "two"]);
        assert_eq!(oracle.complete("", "", &[], 0).unwrap().as_str(), "one");
        assert_eq!(oracle.complete("", "", &[], 0).unwrap().as_str(), "two");
        assert_eq!(oracle.complete("", "", &[], 0).unwrap_err().kind, BackendErrorKind::Transport);
        assert_eq!(oracle.calls().len(), 3);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let o = SyntheticOracle::new(0.0);
        let user = "Original prompt: \"a dog.\"\nmore";
        let a = o.complete("s", user, &[], 1).unwrap();
        assert_eq!(a, o.complete("s", user, &[], 1).unwrap());
        assert!(a.as_str().contains("a dog"));
        assert_eq!(crate::format::format_reward(&a), 1.0);
    }
}
