//! Tag-structured reasoning output: `<think>...</think><answer>...</answer>`.
//!
//! A response is well formed when it holds exactly one think block and exactly
//! one answer block, each opened before it is closed, with the think block
//! ending before the answer block starts. Tags are matched literally and
//! case-sensitively. Text outside the two blocks is ignored.

use serde::{Deserialize, Serialize};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

pub const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Full text emitted by a policy or oracle.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawResponse(pub String);

impl RawResponse {
    pub fn new(text: impl Into<String>) -> Self {
        RawResponse(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for RawResponse {
    fn from(s: &str) -> Self {
        RawResponse(s.to_owned())
    }
}

impl From<String> for RawResponse {
    fn from(s: String) -> Self {
        RawResponse(s)
    }
}

/// First format rule a response breaks, checked in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    MissingThink,
    MissingAnswer,
    DuplicateTags,
    WrongOrder,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think_text: String,
    /// The enhanced prompt.
    pub answer_text: String,
    pub well_formed: bool,
    pub violation: Violation,
}

impl ParsedResponse {
    fn malformed(violation: Violation) -> Self {
        ParsedResponse { think_text: String::new(), answer_text: String::new(), well_formed: false, violation }
    }

    /// Canonical rendering of a well-formed response.
    pub fn render(&self) -> String {
        render(&self.think_text, &self.answer_text)
    }
}

pub fn render(think: &str, answer: &str) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

pub fn parse_response(raw: &RawResponse) -> ParsedResponse {
    let text = raw.as_str().trim();
    let count = |tag: &str| text.matches(tag).count();
    let [think_open, think_close, answer_open, answer_close] = TAGS.map(count);

    if think_open == 0 || think_close == 0 {
        return ParsedResponse::malformed(Violation::MissingThink);
    }
    if answer_open == 0 || answer_close == 0 {
        return ParsedResponse::malformed(Violation::MissingAnswer);
    }
    if think_open > 1 || think_close > 1 || answer_open > 1 || answer_close > 1 {
        return ParsedResponse::malformed(Violation::DuplicateTags);
    }

    // Each tag occurs exactly once from here on.
    let pos = |tag: &str| text.find(tag).expect("tag counted above");
    let (to, tc, ao, ac) = (pos(THINK_OPEN), pos(THINK_CLOSE), pos(ANSWER_OPEN), pos(ANSWER_CLOSE));
    let think_start = to + THINK_OPEN.len();
    let answer_start = ao + ANSWER_OPEN.len();
    if !(think_start <= tc && tc + THINK_CLOSE.len() <= ao && answer_start <= ac) {
        return ParsedResponse::malformed(Violation::WrongOrder);
    }

    ParsedResponse {
        think_text: text[think_start..tc].to_owned(),
        answer_text: text[answer_start..ac].to_owned(),
        well_formed: true,
        violation: Violation::None,
    }
}

/// 1.0 for a well-formed response, 0.0 otherwise.
pub fn format_reward(raw: &RawResponse) -> f64 {
    if parse_response(raw).well_formed {
        1.0
    } else {
        0.0
    }
}
