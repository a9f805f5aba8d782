//! Contracts for every external model, plus deterministic mocks.
//!
//! Real adapters (a served multimodal policy, a diffusion or autoregressive
//! generator, CLIP/PickScore, LPIPS, learned control extractors, a hosted
//! oracle) implement these traits and can be checked with [`conformance`].

use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::control::{ControlMap, ControlType};
use crate::error::BackendError;
use crate::format::RawResponse;

pub mod conformance;
pub mod mock;
mod oracle;
mod policy;

pub use oracle::{RetryPolicy, RetryingOracle, ScriptedOracle, SyntheticOracle};
pub use policy::{MockPolicy, MockPolicyConfig};

/// One term of a loss gradient: `coefficient * grad log pi(response | question)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTerm {
    pub question: String,
    pub response: RawResponse,
    pub coefficient: f64,
}

/// Opaque gradient description handed from a trainer to a policy backend.
///
/// The loss gradient is `sum_i coefficient_i * grad log pi(o_i | q_i)`; the
/// backend takes one descent step of size `learning_rate` along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSignal {
    pub learning_rate: f64,
    pub terms: Vec<SignalTerm>,
}

impl GradientSignal {
    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coefficient == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyState {
    pub updates: u64,
    pub digest: String,
}

/// Frozen scoring view of a policy.
pub trait ReferencePolicy: Send + Sync {
    /// log pi(response | question); always <= 0.
    fn sequence_logprob(&self, question: &str, response: &RawResponse) -> Result<f64, BackendError>;
}

/// The trainable reasoning policy.
///
/// `sample` and `sequence_logprob` may be called concurrently; `apply_update`
/// takes `&mut self` so updates are serialized by construction.
pub trait PolicyBackend: ReferencePolicy {
    fn sample(&self, question: &str, count: usize, temperature: f64, seed: u64) -> Result<Vec<RawResponse>, BackendError>;

    fn apply_update(&mut self, signal: &GradientSignal) -> Result<PolicyState, BackendError>;

    /// Immutable copy of the current parameters.
    fn snapshot(&self) -> Arc<dyn ReferencePolicy>;

    fn state(&self) -> PolicyState;

    fn export_state(&self) -> Result<serde_json::Value, BackendError>;

    fn import_state(&mut self, state: &serde_json::Value) -> Result<(), BackendError>;
}

pub trait GeneratorBackend: Send + Sync {
    /// Output dimensions equal the control map dimensions.
    fn generate(&self, prompt: &str, control: &ControlMap, seed: u64) -> Result<RgbImage, BackendError>;
}

pub trait ImageTextScorer: Send + Sync {
    fn score(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError>;

    /// Declared raw output range, used to normalize scores onto [0, 1].
    fn raw_range(&self) -> (f64, f64);
}

pub trait PerceptualDistance: Send + Sync {
    /// Symmetric, non-negative, zero on identical inputs.
    fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64, BackendError>;
}

pub trait ControlExtractorBackend: Send + Sync {
    fn extract(&self, image: &RgbImage, control_type: ControlType) -> Result<ControlMap, BackendError>;
}

pub trait OracleClient: Send + Sync {
    fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        attachments: &[RgbImage],
        seed: u64,
    ) -> Result<RawResponse, BackendError>;

    /// Whether responses depend on call order, which forbids concurrent use.
    fn order_sensitive(&self) -> bool {
        false
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn dimension(&self) -> usize;

    fn features(&self, image: &RgbImage) -> Result<Vec<f64>, BackendError>;
}
