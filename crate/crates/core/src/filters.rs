//! Rule-based post-processing: emoji stripping, length bounds, repetition
//! removal and exact deduplication, applied in that order.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::records::{InstructionRecord, ReasoningSample};

/// Code-point ranges treated as emoji.
pub const EMOJI_RANGES: &[(u32, u32)] = &[
    (0x1F600, 0x1F64F), // Emoticons
    (0x1F680, 0x1F6FF), // Transport and Map Symbols
    (0x1F300, 0x1F5FF), // Miscellaneous Symbols and Pictographs
    (0x1F900, 0x1F9FF), // Supplemental Symbols and Pictographs
    (0x2700, 0x27BF),   // Dingbats
    (0xFE0F, 0xFE0F),   // variation selector-16
    (0x200D, 0x200D),   // zero width joiner
];

pub fn is_emoji(c: char) -> bool {
    let cp = c as u32;
    EMOJI_RANGES.iter().any(|&(lo, hi)| (lo..=hi).contains(&cp))
}

/// Removes emoji code points. Whitespace around each removed run collapses to
/// a single space, or disappears at either end of the text.
pub fn strip_emoji(text: &str) -> String {
    if !text.chars().any(is_emoji) {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if !is_emoji(c) {
            out.push(c);
            continue;
        }
        // Swallow the rest of the run, including whitespace between emoji.
        let mut saw_space = false;
        while let Some(&n) = chars.peek() {
            if is_emoji(n) {
                chars.next();
            } else if n.is_whitespace() {
                saw_space = true;
                chars.next();
            } else {
                break;
            }
        }
        let trimmed_len = out.trim_end().len();
        if trimmed_len < out.len() {
            saw_space = true;
            out.truncate(trimmed_len);
        }
        if saw_space && !out.is_empty() && chars.peek().is_some() {
            out.push(' ');
        }
    }
    out
}

/// Fraction of repeated word n-grams: `1 - distinct / total`.
pub fn repetition_ratio(text: &str, n: usize) -> f64 {
    let n = n.max(1);
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() < n {
        return 0.0;
    }
    let total = words.len() - n + 1;
    if total <= 1 {
        return 0.0;
    }
    let distinct: HashSet<&[&str]> = words.windows(n).collect();
    1.0 - distinct.len() as f64 / total as f64
}

fn canonical(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// SHA-256 over the canonicalized (instruction, answer) pair, hex encoded.
pub fn dedup_key_parts(instruction: &str, answer: &str) -> String {
    let mut h = Sha256::new();
    h.update(canonical(instruction).as_bytes());
    h.update([0x1f]);
    h.update(canonical(answer).as_bytes());
    hex::encode(h.finalize())
}

/// Anything the filter pipeline can run over.
pub trait Filterable {
    /// Text fields that emoji stripping rewrites.
    fn texts_mut(&mut self) -> Vec<&mut String>;
    /// Text fields checked for repetition.
    fn texts(&self) -> Vec<&str>;
    /// The answer whose length is bounded.
    fn answer_text(&self) -> &str;
    fn dedup_key(&self) -> String;
}

impl Filterable for ReasoningSample {
    fn texts_mut(&mut self) -> Vec<&mut String> {
        let mut v = vec![&mut self.answer];
        if let Some(r) = self.reasoning.as_mut() {
            v.push(r);
        }
        v
    }

    fn texts(&self) -> Vec<&str> {
        let mut v = vec![self.answer.as_str()];
        v.extend(self.reasoning.as_deref());
        v
    }

    fn answer_text(&self) -> &str {
        &self.answer
    }

    /// Falls back to `record_id` when the instruction is not carried in meta.
    fn dedup_key(&self) -> String {
        let instr = self.instruction().unwrap_or(&self.record_id);
        dedup_key_parts(instr, &self.answer)
    }
}

impl Filterable for InstructionRecord {
    fn texts_mut(&mut self) -> Vec<&mut String> {
        let mut v = vec![&mut self.instruction];
        v.extend(self.gold_response.as_mut());
        v
    }

    fn texts(&self) -> Vec<&str> {
        let mut v = vec![self.instruction.as_str()];
        v.extend(self.gold_response.as_deref());
        v
    }

    fn answer_text(&self) -> &str {
        self.gold_response.as_deref().unwrap_or(&self.instruction)
    }

    fn dedup_key(&self) -> String {
        dedup_key_parts(&self.instruction, self.gold_response.as_deref().unwrap_or(""))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub ngram_n: usize,
    pub repetition_threshold: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ngram_n: 3,
            repetition_threshold: 0.5,
            min_len: 1,
            max_len: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FilterConfigError {
    #[error("ngram_n must be at least 1")]
    NgramZero,
    #[error("repetition_threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("min_len {0} exceeds max_len {1}")]
    LengthBounds(usize, usize),
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterConfigError> {
        if self.ngram_n == 0 {
            return Err(FilterConfigError::NgramZero);
        }
        if !(0.0..=1.0).contains(&self.repetition_threshold) {
            return Err(FilterConfigError::Threshold(self.repetition_threshold));
        }
        if self.min_len > self.max_len {
            return Err(FilterConfigError::LengthBounds(self.min_len, self.max_len));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub length: usize,
    pub repetition: usize,
    pub duplicate: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationCounts {
    pub emoji: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: DropCounts,
    pub mutated: MutationCounts,
}

impl FilterReport {
    pub fn reconciles(&self) -> bool {
        self.kept + self.dropped.length + self.dropped.repetition + self.dropped.duplicate
            == self.input
    }
}

/// Runs the rule chain, keeping the first occurrence of each dedup key.
pub fn run_filters<T: Filterable>(rows: Vec<T>, cfg: &FilterConfig) -> (Vec<T>, FilterReport) {
    let mut report = FilterReport {
        input: rows.len(),
        ..Default::default()
    };
    let mut seen: HashSet<String> = HashSet::with_capacity(rows.len());
    let mut kept = Vec::with_capacity(rows.len());
    for mut row in rows {
        let mut changed = false;
        for text in row.texts_mut() {
            let stripped = strip_emoji(text);
            if stripped != *text {
                *text = stripped;
                changed = true;
            }
        }
        if changed {
            report.mutated.emoji += 1;
        }

        let len = row.answer_text().chars().count();
        if len < cfg.min_len || len > cfg.max_len {
            report.dropped.length += 1;
            continue;
        }
        if row
            .texts()
            .iter()
            .any(|t| repetition_ratio(t, cfg.ngram_n) > cfg.repetition_threshold)
        {
            report.dropped.repetition += 1;
            continue;
        }
        if !seen.insert(row.dedup_key()) {
            report.dropped.duplicate += 1;
            continue;
        }
        kept.push(row);
    }
    report.kept = kept.len();
    (kept, report)
}
