//! Reasoning-control markers and the think-block output grammar.
//!
//! A reasoning prompt is the instruction followed by `/think` and, for the
//! length-controlled modes, one of `/long`, `/medium` or `/short`. A reasoning
//! response has the shape `<think>` reasoning `</think>` answer; a direct
//! response is the answer alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const THINK_MARKER: &str = "/think";
pub const OPEN_THINK: &str = "<think>";
pub const CLOSE_THINK: &str = "</think>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningMode {
    Direct,
    Max,
    Long,
    Medium,
    Short,
}

impl ReasoningMode {
    pub const ALL: [ReasoningMode; 5] = [
        ReasoningMode::Direct,
        ReasoningMode::Max,
        ReasoningMode::Long,
        ReasoningMode::Medium,
        ReasoningMode::Short,
    ];

    /// The condensed modes, shortest budget first.
    pub const CONDENSED: [ReasoningMode; 3] =
        [ReasoningMode::Short, ReasoningMode::Medium, ReasoningMode::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningMode::Direct => "direct",
            ReasoningMode::Max => "max",
            ReasoningMode::Long => "long",
            ReasoningMode::Medium => "medium",
            ReasoningMode::Short => "short",
        }
    }

    /// Marker sequence appended to the instruction; `None` for direct mode.
    pub fn marker(self) -> Option<&'static str> {
        match self {
            ReasoningMode::Direct => None,
            ReasoningMode::Max => Some("/think"),
            ReasoningMode::Long => Some("/think /long"),
            ReasoningMode::Medium => Some("/think /medium"),
            ReasoningMode::Short => Some("/think /short"),
        }
    }

    /// Default condensation word budget for the length-controlled modes.
    pub fn word_budget(self) -> Option<usize> {
        match self {
            ReasoningMode::Long => Some(700),
            ReasoningMode::Medium => Some(150),
            ReasoningMode::Short => Some(50),
            _ => None,
        }
    }

    pub fn requires_reasoning(self) -> bool {
        self != ReasoningMode::Direct
    }
}

impl fmt::Display for ReasoningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown reasoning mode {0:?} (expected direct, max, long, medium or short)")]
pub struct UnknownMode(pub String);

impl FromStr for ReasoningMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReasoningMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MarkerError {
    #[error("response opens a think block but never closes it")]
    UnterminatedThink,
    #[error("response closes a think block that was never opened")]
    StrayDelimiter,
    #[error("response is empty")]
    EmptyResponse,
}

/// Appends the mode's markers to `instruction`, separated by single spaces.
pub fn build_prompt(instruction: &str, mode: ReasoningMode) -> String {
    match mode.marker() {
        None => instruction.to_string(),
        Some(marker) => format!("{instruction} {marker}"),
    }
}

/// Inverse of [`parse_response`] for delimiter-free parts.
pub fn compose_response(reasoning: Option<&str>, answer: &str) -> String {
    match reasoning {
        Some(r) => format!("{OPEN_THINK}{r}{CLOSE_THINK} {answer}"),
        None => answer.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub reasoning: Option<String>,
    pub answer: String,
    pub raw: String,
}

impl ParsedResponse {
    pub fn has_reasoning(&self) -> bool {
        self.reasoning.as_deref().is_some_and(|r| !r.trim().is_empty())
    }
}

/// Splits a model output into its think block and answer.
///
/// Leading whitespace before `<think>` is tolerated. Only the first think
/// block is recognised; delimiter text after it stays in the answer.
pub fn parse_response(raw: &str) -> Result<ParsedResponse, MarkerError> {
    if raw.trim().is_empty() {
        return Err(MarkerError::EmptyResponse);
    }
    let body = raw.trim_start();
    if let Some(rest) = body.strip_prefix(OPEN_THINK) {
        let Some(end) = rest.find(CLOSE_THINK) else {
            return Err(MarkerError::UnterminatedThink);
        };
        let reasoning = &rest[..end];
        let answer = rest[end + CLOSE_THINK.len()..].trim_start();
        return Ok(ParsedResponse {
            reasoning: Some(reasoning.to_string()),
            answer: answer.to_string(),
            raw: raw.to_string(),
        });
    }
    if body.contains(CLOSE_THINK) {
        return Err(MarkerError::StrayDelimiter);
    }
    Ok(ParsedResponse {
        reasoning: None,
        answer: raw.to_string(),
        raw: raw.to_string(),
    })
}

/// Whether the response's structure matches what the mode asks for.
pub fn validate(parsed: &ParsedResponse, mode: ReasoningMode) -> bool {
    if mode.requires_reasoning() {
        parsed.has_reasoning()
    } else {
        parsed.reasoning.is_none()
    }
}

pub trait Tokenizer {
    fn count(&self, text: &str) -> usize;
}

/// Splits on runs of Unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

pub fn count_reasoning_tokens(parsed: &ParsedResponse, tokenizer: &dyn Tokenizer) -> usize {
    parsed.reasoning.as_deref().map_or(0, |r| tokenizer.count(r))
}

/// Whitespace word count, used for condensation budgets.
pub fn word_count(text: &str) -> usize {
    WhitespaceTokenizer.count(text)
}
