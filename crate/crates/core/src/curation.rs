//! Building the visual-reasoning dataset.
//!
//! An oracle model sees the control image, the target photo and the original
//! caption, and answers in the think/answer layout. Responses that break the
//! layout, have an empty answer, or leak the photo into the text are
//! rejected.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backends::OracleClient;
use crate::control::ControlType;
use crate::digest::derive_seed;
use crate::error::{BackendError, BackendErrorKind, Error, Result};
use crate::format::{parse_response, RawResponse, ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};
use crate::jsonl;
use crate::par;

pub const TEMPLATE_VERSION: &str = "control-reasoning/v1";

pub const SYSTEM_PROMPT: &str = "You are a visual reasoning assistant for controllable image generation. \
You read structural control images and write rich, faithful text prompts for an image generator.";

pub const DEFAULT_BLOCKLIST: [&str; 5] =
    ["ground truth", "reference image", "the provided image", "target image", "the original image"];

const EMPTY_PROMPT_MARKER: &str = "[EMPTY ORIGINAL PROMPT]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    BadFormat,
    GtReference,
    EmptyAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationRecord {
    pub id: String,
    pub control_type: ControlType,
    pub control_image_path: PathBuf,
    pub gt_image_path: Option<PathBuf>,
    pub original_prompt: String,
    pub question_text: String,
    pub template_version: String,
    pub response_text: RawResponse,
    pub think_text: String,
    pub answer_text: String,
    pub well_formed: bool,
    pub rejected_reason: Option<RejectReason>,
}

/// One row of a curation input manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationInput {
    pub id: String,
    pub control_image: PathBuf,
    #[serde(default)]
    pub gt_image: Option<PathBuf>,
    pub prompt: String,
}

/// An oracle call that failed after retries. Kept out of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureRecord {
    pub id: String,
    pub control_type: ControlType,
    pub control_image_path: PathBuf,
    pub gt_image_path: Option<PathBuf>,
    pub original_prompt: String,
    pub question_text: String,
    pub error_kind: String,
    pub error_message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_digest: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub counts: BTreeMap<ControlType, usize>,
    pub total: usize,
    pub template_version: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<CurationRecord>,
    manifest: Manifest,
}

impl Dataset {
    pub fn new(records: Vec<CurationRecord>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate record id `{}`", r.id)));
            }
        }
        let manifest = Manifest {
            counts: count_by_type(&records),
            total: records.len(),
            template_version: TEMPLATE_VERSION.to_owned(),
            provenance,
        };
        Ok(Dataset { records, manifest })
    }

    pub fn records(&self) -> &[CurationRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<CurationRecord> {
        self.records
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn count_by_type(records: &[CurationRecord]) -> BTreeMap<ControlType, usize> {
    let mut counts: BTreeMap<ControlType, usize> = ControlType::ALL.iter().map(|&t| (t, 0)).collect();
    for r in records {
        *counts.entry(r.control_type).or_default() += 1;
    }
    counts
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| Error::Image { path: path.to_owned(), message: e.to_string() })
}

/// Instantiates the oracle question for one control image. Fails when the
/// image is missing or does not decode.
pub fn build_question(control_type: ControlType, original_prompt: &str, control_image_path: &Path) -> Result<String> {
    load_rgb(control_image_path)?;
    Ok(question_text(control_type, original_prompt))
}

pub fn question_text(control_type: ControlType, original_prompt: &str) -> String {
    let prompt_note = if original_prompt.trim().is_empty() {
        format!("{EMPTY_PROMPT_MARKER} The caption is empty; infer the subject from the control image alone.\n")
    } else {
        String::new()
    };
    format!(
        "Template: {TEMPLATE_VERSION}\n\
         Control type: {desc}\n\
         Original prompt: \"{original_prompt}\"\n\
         {prompt_note}\
         The first attachment is a {desc}. Analyze its layout: identify the regions, contours and \
         spatial structure it encodes. Combine that layout with the original prompt to infer the \
         objects, attributes and spatial relations that should appear in the target image, including \
         ones the prompt does not mention but the layout implies. The second attachment, when present, \
         is only a hint for colors, materials and background; do not mention or describe it as an image.\n\
         Write your reasoning inside {THINK_OPEN}{THINK_CLOSE} tags, then the enhanced prompt inside \
         {ANSWER_OPEN}{ANSWER_CLOSE} tags.",
        desc = control_type.describe(),
    )
}

/// Asks the oracle about one control image and parses its answer. Both the
/// control image and, when present, the ground-truth photo are attached.
#[allow(clippy::too_many_arguments)]
pub fn curate_record(
    input: &CurationInput,
    control_type: ControlType,
    question: &str,
    control_image: &RgbImage,
    gt_image: Option<&RgbImage>,
    oracle: &dyn OracleClient,
    seed: u64,
) -> Result<CurationRecord, BackendError> {
    let mut attachments = vec![control_image.clone()];
    attachments.extend(gt_image.cloned());
    let response = oracle.complete(SYSTEM_PROMPT, question, &attachments, seed)?;
    let parsed = parse_response(&response);
    Ok(CurationRecord {
        id: input.id.clone(),
        control_type,
        control_image_path: input.control_image.clone(),
        gt_image_path: input.gt_image.clone(),
        original_prompt: input.prompt.clone(),
        question_text: question.to_owned(),
        template_version: TEMPLATE_VERSION.to_owned(),
        response_text: response,
        think_text: parsed.think_text,
        answer_text: parsed.answer_text,
        well_formed: parsed.well_formed,
        rejected_reason: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationOutcome {
    pub records: Vec<CurationRecord>,
    pub failures: Vec<FailureRecord>,
}

/// Curates every input with at most `concurrency` oracle requests in flight.
/// Output order follows input order. Inputs whose images cannot be read fail
/// the whole run; oracle failures land in `failures`.
pub fn curate_all(
    inputs: &[CurationInput],
    control_type: ControlType,
    oracle: &dyn OracleClient,
    concurrency: usize,
    root_seed: u64,
) -> Result<CurationOutcome> {
    let mut prepared = Vec::with_capacity(inputs.len());
    for input in inputs {
        let question = build_question(control_type, &input.prompt, &input.control_image)?;
        let control = load_rgb(&input.control_image)?;
        let gt = input.gt_image.as_deref().map(load_rgb).transpose()?;
        prepared.push((question, control, gt));
    }

    let run = |i: usize, (question, control, gt): &(String, RgbImage, Option<RgbImage>)| {
        let seed = derive_seed(root_seed, "curate", i as u64);
        curate_record(&inputs[i], control_type, question, control, gt.as_ref(), oracle, seed)
    };
    let results: Vec<Result<CurationRecord, BackendError>> = if oracle.order_sensitive() {
        prepared.iter().enumerate().map(|(i, p)| run(i, p)).collect()
    } else {
        par::with_width(concurrency, || par::map_indexed(&prepared, run))
    };

    let mut outcome = CurationOutcome { records: Vec::new(), failures: Vec::new() };
    for ((input, (question, _, _)), result) in inputs.iter().zip(&prepared).zip(results) {
        match result {
            Ok(r) => outcome.records.push(r),
            Err(e) => {
                log::warn!("oracle failed for record {}: {e}", input.id);
                outcome.failures.push(FailureRecord {
                    id: input.id.clone(),
                    control_type,
                    control_image_path: input.control_image.clone(),
                    gt_image_path: input.gt_image.clone(),
                    original_prompt: input.prompt.clone(),
                    question_text: question.clone(),
                    error_kind: kind_name(e.kind).to_owned(),
                    error_message: e.message,
                })
            }
        }
    }
    Ok(outcome)
}

fn kind_name(kind: BackendErrorKind) -> &'static str {
    match kind {
        BackendErrorKind::Transport => "TRANSPORT",
        BackendErrorKind::Timeout => "TIMEOUT",
        BackendErrorKind::MalformedOutput => "MALFORMED_OUTPUT",
    }
}

/// Case-insensitive blocklist over think and answer text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocklist {
    phrases: Vec<String>,
}

impl Default for Blocklist {
    fn default() -> Self {
        Blocklist::new(DEFAULT_BLOCKLIST)
    }
}

impl Blocklist {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Blocklist { phrases: phrases.into_iter().map(|p| p.as_ref().to_lowercase()).filter(|p| !p.is_empty()).collect() }
    }

    pub fn matches(&self, text: &str) -> bool {
        let lower = text.to_lowercase();
        self.phrases.iter().any(|p| lower.contains(p.as_str()))
    }
}

pub fn rejection_reason(record: &CurationRecord, blocklist: &Blocklist) -> Option<RejectReason> {
    if !record.well_formed {
        Some(RejectReason::BadFormat)
    } else if record.answer_text.trim().is_empty() {
        Some(RejectReason::EmptyAnswer)
    } else if blocklist.matches(&record.think_text) || blocklist.matches(&record.answer_text) {
        Some(RejectReason::GtReference)
    } else {
        None
    }
}

/// Splits records into the kept dataset and the rejected list with reasons.
pub fn filter_dataset(
    records: Vec<CurationRecord>,
    blocklist: &Blocklist,
    provenance: Provenance,
) -> Result<(Dataset, Vec<CurationRecord>)> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for mut r in records {
        r.rejected_reason = rejection_reason(&r, blocklist);
        if r.rejected_reason.is_some() {
            rejected.push(r);
        } else {
            kept.push(r);
        }
    }
    Ok((Dataset::new(kept, provenance)?, rejected))
}

/// Writes the manifest line followed by one record per line.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut text = jsonl::to_line(&ManifestLine { manifest: dataset.manifest.clone() })?;
    text.push('\n');
    for r in &dataset.records {
        text.push_str(&jsonl::to_line(r)?);
        text.push('\n');
    }
    jsonl::write_text(path, &text)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let lines = jsonl::read_raw_lines(path)?;
    let Some(((first_no, first), rest)) = lines.split_first() else {
        return Err(Error::Parse { line: 1, message: "missing manifest line".into() });
    };
    let ManifestLine { manifest } = jsonl::parse_line(*first_no, first)?;
    let mut records = Vec::with_capacity(rest.len());
    let mut seen = HashSet::new();
    for (no, line) in rest {
        let r: CurationRecord = jsonl::parse_line(*no, line)?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::Parse { line: *no, message: format!("duplicate record id `{}`", r.id) });
        }
        records.push(r);
    }
    if manifest.total != records.len() || manifest.counts != count_by_type(&records) {
        return Err(Error::Parse {
            line: *first_no,
            message: format!("manifest counts do not match the {} records in the file", records.len()),
        });
    }
    Ok(Dataset { records, manifest })
}
