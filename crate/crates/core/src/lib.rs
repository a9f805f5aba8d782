//! Reason-then-generate controllable image generation.
//!
//! A multimodal policy reads a control image and a sparse prompt, thinks in a
//! `<think>` block and writes an enriched prompt in an `<answer>` block. The
//! crate covers the whole loop around that policy:
//!
//! - [`curation`]: oracle-driven dataset building and filtering,
//! - [`grpo`]: supervised fine-tuning and group-relative reinforcement
//!   fine-tuning against verifiable rewards ([`rewards`]),
//! - [`selection`]: best-of-K inference with a metric-based reward,
//! - [`metrics`]: SSIM, edge F1, RMSE, mIoU and Fréchet distance,
//! - [`control`]: control maps and a native Canny extractor.
//!
//! All large models sit behind the traits in [`backends`], which also ships
//! deterministic mocks so the full pipeline runs on a laptop.

pub mod backends;
pub mod control;
pub mod curation;
pub mod digest;
pub mod error;
pub mod format;
pub mod grpo;
pub mod jsonl;
pub mod metrics;
pub mod par;
pub mod rewards;
pub mod selection;

pub use control::{ControlMap, ControlType};
pub use error::{BackendError, BackendErrorKind, Error, Result};
pub use format::{format_reward, parse_response, ParsedResponse, RawResponse, Violation};

/// Version stamped into every artifact.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));
