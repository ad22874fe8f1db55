//! Synthetic data construction: generation from instructions or from raw
//! contexts, judge-based verification against gold responses, and
//! multi-length condensation of reasoning traces.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, GenRequest};
use crate::guard::{contains_restricted, RestrictableScript};
use crate::marker::{build_prompt, parse_response, validate, word_count, ReasoningMode};
use crate::records::{InstructionRecord, ReasoningSample, META_INSTRUCTION};

pub const DEFAULT_CONDENSE_PROMPT: &str = include_str!("../prompts/condense.txt");
pub const DEFAULT_VERIFY_PROMPT: &str = include_str!("../prompts/verify.txt");
pub const DEFAULT_CONTEXT_INSTRUCTION_PROMPT: &str =
    include_str!("../prompts/context_instruction.txt");
pub const DEFAULT_CONTEXT_ANSWER_PROMPT: &str = include_str!("../prompts/context_answer.txt");

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("record has an empty instruction")]
    EmptyInstruction,
    #[error("record has no context to generate from")]
    MissingContext,
    #[error("stage one produced an empty instruction")]
    StageOneEmpty,
    #[error("gold response is empty")]
    MissingGold,
    #[error("judge output has no integer score: {0:?}")]
    VerdictUnparsable(String),
    #[error("judge score {0} outside 0..=10")]
    VerdictOutOfRange(u64),
    #[error("condensation output is not a JSON object with a \"Reasoning\" string: {0:?}")]
    CondenseUnparsable(String),
    #[error("condensed reasoning has {words} words, limit is {limit}")]
    OverBudget { words: usize, limit: usize },
    #[error("mode {0} has no word budget")]
    NotCondensable(ReasoningMode),
    #[error("cannot read prompt template {path}: {source}")]
    Template {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Prompt templates. Placeholders are written `{Name}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub condense: String,
    pub verify: String,
    pub context_instruction: String,
    pub context_answer: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            condense: DEFAULT_CONDENSE_PROMPT.to_string(),
            verify: DEFAULT_VERIFY_PROMPT.to_string(),
            context_instruction: DEFAULT_CONTEXT_INSTRUCTION_PROMPT.to_string(),
            context_answer: DEFAULT_CONTEXT_ANSWER_PROMPT.to_string(),
        }
    }
}

impl PromptSet {
    /// Loads overrides from `dir`; any of `condense.txt`, `verify.txt`,
    /// `context_instruction.txt`, `context_answer.txt` that is missing keeps
    /// its default.
    pub fn load_dir(dir: &Path) -> Result<Self, SynthError> {
        let mut set = Self::default();
        for (name, slot) in [
            ("condense.txt", &mut set.condense),
            ("verify.txt", &mut set.verify),
            ("context_instruction.txt", &mut set.context_instruction),
            ("context_answer.txt", &mut set.context_answer),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|source| SynthError::Template {
                    path: path.display().to_string(),
                    source,
                })?;
            }
        }
        Ok(set)
    }
}

/// Single-pass `{Name}` substitution. Unknown placeholders and stray braces
/// are left as they are, and substituted values are never re-scanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub short: usize,
    pub medium: usize,
    pub long: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            short: 50,
            medium: 150,
            long: 700,
        }
    }
}

impl Budgets {
    pub fn for_mode(&self, mode: ReasoningMode) -> Option<usize> {
        match mode {
            ReasoningMode::Short => Some(self.short),
            ReasoningMode::Medium => Some(self.medium),
            ReasoningMode::Long => Some(self.long),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub max_in_flight: usize,
    pub verify_threshold: u8,
    pub budgets: Budgets,
    /// Allowed overshoot over a word budget, as a fraction.
    pub budget_slack: f64,
    /// Generated text containing these scripts is rejected.
    #[serde(skip)]
    pub ban_scripts: Vec<RestrictableScript>,
    #[serde(skip)]
    pub prompts: PromptSet,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 4096,
            seed: None,
            max_in_flight: 8,
            verify_threshold: 7,
            budgets: Budgets::default(),
            budget_slack: 0.2,
            ban_scripts: Vec::new(),
            prompts: PromptSet::default(),
        }
    }
}

impl SynthConfig {
    fn request(&self, user: String) -> GenRequest {
        GenRequest {
            system: None,
            user,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }

    pub fn word_limit(&self, budget: usize) -> usize {
        (budget as f64 * (1.0 + self.budget_slack)).floor() as usize
    }
}

/// An exhausted retry budget means the backend is down; corpus-level runs
/// abort on it instead of recording one failure per row.
fn is_unavailable(e: &SynthError) -> bool {
    matches!(e, SynthError::Backend(BackendError::BackendUnavailable { .. }))
}

// ---------------------------------------------------------------- generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Instruction,
    Context,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Instruction => "instruction",
            Strategy::Context => "context",
        }
    }
}

/// A generation that came back but failed structural checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedGeneration {
    pub record_id: String,
    pub mode: ReasoningMode,
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenOutcome {
    Accepted(ReasoningSample),
    Rejected(RejectedGeneration),
}

fn outcome_from_output(
    record_id: &str,
    instruction: &str,
    mode: ReasoningMode,
    strategy: Strategy,
    raw: &str,
    cfg: &SynthConfig,
) -> GenOutcome {
    let reject = |reason: String| {
        GenOutcome::Rejected(RejectedGeneration {
            record_id: record_id.to_string(),
            mode,
            reason,
            raw: raw.to_string(),
        })
    };
    let parsed = match parse_response(raw) {
        Ok(p) => p,
        Err(e) => return reject(e.to_string()),
    };
    if !validate(&parsed, mode) {
        let why = if mode.requires_reasoning() {
            "invalid: missing reasoning"
        } else {
            "invalid: unexpected think block"
        };
        return reject(why.to_string());
    }
    if !cfg.ban_scripts.is_empty() && contains_restricted(raw, &cfg.ban_scripts) {
        return reject("restricted script in output".to_string());
    }
    let answer = parsed.answer.trim();
    if answer.is_empty() {
        return reject("empty answer".to_string());
    }
    let meta = BTreeMap::from([
        (META_INSTRUCTION.to_string(), instruction.to_string()),
        ("strategy".to_string(), strategy.as_str().to_string()),
        ("valid".to_string(), "true".to_string()),
    ]);
    GenOutcome::Accepted(ReasoningSample {
        record_id: record_id.to_string(),
        mode,
        reasoning: parsed.reasoning.map(|r| r.trim().to_string()),
        answer: answer.to_string(),
        meta,
    })
}

/// Strategy one: answer an existing instruction in the requested mode.
pub async fn gen_from_instruction(
    record: &InstructionRecord,
    mode: ReasoningMode,
    backend: &dyn Backend,
    cfg: &SynthConfig,
) -> Result<GenOutcome, SynthError> {
    if record.instruction.trim().is_empty() {
        return Err(SynthError::EmptyInstruction);
    }
    let req = cfg.request(build_prompt(&record.instruction, mode));
    let res = backend.generate(&req).await?;
    Ok(outcome_from_output(
        &record.id,
        &record.instruction,
        mode,
        Strategy::Instruction,
        &res.text,
        cfg,
    ))
}

pub fn context_instruction_request(context: &str, cfg: &SynthConfig) -> GenRequest {
    cfg.request(render(
        &cfg.prompts.context_instruction,
        &[("Context", context)],
    ))
}

pub fn context_answer_request(
    context: &str,
    instruction: &str,
    mode: ReasoningMode,
    cfg: &SynthConfig,
) -> GenRequest {
    let body = render(
        &cfg.prompts.context_answer,
        &[("Context", context), ("Instruction", instruction)],
    );
    cfg.request(build_prompt(body.trim_end(), mode))
}

/// Strategy two: synthesize an instruction from the record's context, then
/// answer it grounded in that context. Returns the synthetic instruction.
pub async fn gen_from_context(
    record: &InstructionRecord,
    mode: ReasoningMode,
    backend: &dyn Backend,
    cfg: &SynthConfig,
) -> Result<(String, GenOutcome), SynthError> {
    let context = record
        .context
        .as_deref()
        .filter(|c| !c.trim().is_empty())
        .ok_or(SynthError::MissingContext)?;
    let stage1 = backend
        .generate(&context_instruction_request(context, cfg))
        .await?;
    // A hybrid model may still think out loud; keep only the answer part.
    let instruction = match parse_response(&stage1.text) {
        Ok(p) => p.answer.trim().to_string(),
        Err(_) => String::new(),
    };
    if instruction.is_empty() {
        return Err(SynthError::StageOneEmpty);
    }
    let stage2 = backend
        .generate(&context_answer_request(context, &instruction, mode, cfg))
        .await?;
    let outcome = outcome_from_output(
        &record.id,
        &instruction,
        mode,
        Strategy::Context,
        &stage2.text,
        cfg,
    );
    Ok((instruction, outcome))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub input: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub errors: usize,
}

#[derive(Debug, Default)]
pub struct GenerationRun {
    pub samples: Vec<ReasoningSample>,
    pub rejected: Vec<RejectedGeneration>,
    pub errors: Vec<(String, String)>,
    pub report: GenerationReport,
}

/// Generates one sample per record with bounded concurrency, in input order.
pub async fn generate_corpus(
    records: &[InstructionRecord],
    strategy: Strategy,
    mode: ReasoningMode,
    backend: &dyn Backend,
    cfg: &SynthConfig,
) -> Result<GenerationRun, SynthError> {
    let mut results: Vec<_> = stream::iter(records.iter().map(|rec| async move {
        let out = match strategy {
            Strategy::Instruction => gen_from_instruction(rec, mode, backend, cfg).await,
            Strategy::Context => gen_from_context(rec, mode, backend, cfg)
                .await
                .map(|(_, o)| o),
        };
        (rec.id.clone(), out)
    }))
    .buffered(cfg.max_in_flight.max(1))
    .collect()
    .await;
    if let Some(i) = results.iter().position(|(_, r)| r.as_ref().is_err_and(is_unavailable)) {
        return Err(results.swap_remove(i).1.unwrap_err());
    }

    let mut run = GenerationRun {
        report: GenerationReport {
            input: records.len(),
            ..Default::default()
        },
        ..Default::default()
    };
    for (id, out) in results {
        match out {
            Ok(GenOutcome::Accepted(s)) => run.samples.push(s),
            Ok(GenOutcome::Rejected(r)) => run.rejected.push(r),
            Err(e) => {
                tracing::warn!(record = %id, error = %e, "generation failed");
                run.errors.push((id, e.to_string()));
            }
        }
    }
    run.report.accepted = run.samples.len();
    run.report.rejected = run.rejected.len();
    run.report.errors = run.errors.len();
    Ok(run)
}

// ---------------------------------------------------------------- verification

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierVerdict {
    pub score: u8,
    pub threshold: u8,
    pub passed: bool,
    pub raw: String,
}

/// First standalone integer in the judge output: a digit run not glued to
/// letters, other digits, or a decimal point.
pub fn parse_score(text: &str) -> Result<u8, SynthError> {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_ascii_digit() {
            i += 1;
        }
        let prev = start.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i).copied();
        let decimal_before = prev == Some('.')
            && start >= 2
            && chars[start - 2].is_ascii_digit();
        let decimal_after = next == Some('.')
            && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit());
        let glued = prev.is_some_and(char::is_alphanumeric) || next.is_some_and(char::is_alphanumeric);
        if glued || decimal_before || decimal_after {
            continue;
        }
        let digits: String = chars[start..i].iter().collect();
        let value: u64 = digits.parse().unwrap_or(u64::MAX);
        return if value <= 10 {
            Ok(value as u8)
        } else {
            Err(SynthError::VerdictOutOfRange(value))
        };
    }
    Err(SynthError::VerdictUnparsable(text.to_string()))
}

pub fn verify_request(
    instruction: &str,
    gold: &str,
    response: &str,
    cfg: &SynthConfig,
) -> GenRequest {
    cfg.request(render(
        &cfg.prompts.verify,
        &[
            ("Instruction", instruction),
            ("PreferredAnswer", gold),
            ("Response", response),
        ],
    ))
}

/// Asks the judge to score `sample`'s answer against `gold` on 0..=10.
pub async fn verify(
    sample: &ReasoningSample,
    instruction: &str,
    gold: &str,
    threshold: u8,
    backend: &dyn Backend,
    cfg: &SynthConfig,
) -> Result<VerifierVerdict, SynthError> {
    if gold.trim().is_empty() {
        return Err(SynthError::MissingGold);
    }
    let req = verify_request(instruction, gold, &sample.answer, cfg);
    let res = backend.generate(&req).await?;
    let score = parse_score(&res.text)?;
    Ok(VerifierVerdict {
        score,
        threshold,
        passed: score >= threshold,
        raw: res.text,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub input: usize,
    pub passed: usize,
    pub failed: usize,
    pub skipped_no_gold: usize,
    pub unparsable: usize,
    pub missing_record: usize,
    pub errors: usize,
}

#[derive(Debug, Default)]
pub struct VerifyRun {
    pub kept: Vec<ReasoningSample>,
    pub dropped: Vec<(ReasoningSample, String)>,
    pub report: VerifyReport,
}

enum VerifyStep {
    Verdict(VerifierVerdict),
    NoGold,
    NoRecord,
    Failed(SynthError),
}

/// Gates every sample whose record has a gold response; samples without gold
/// are kept and flagged `verified=skipped_no_gold`.
pub async fn verify_corpus(
    samples: Vec<ReasoningSample>,
    records: &[InstructionRecord],
    backend: &dyn Backend,
    cfg: &SynthConfig,
) -> Result<VerifyRun, SynthError> {
    let by_id: HashMap<&str, &InstructionRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let threshold = cfg.verify_threshold;
    let mut steps: Vec<VerifyStep> = stream::iter(samples.iter().map(|s| {
        let rec = by_id.get(s.record_id.as_str()).copied();
        async move {
            let Some(rec) = rec else {
                return VerifyStep::NoRecord;
            };
            let Some(gold) = rec.gold_response.as_deref().filter(|g| !g.trim().is_empty())
            else {
                return VerifyStep::NoGold;
            };
            let instruction = s.instruction().unwrap_or(&rec.instruction);
            match verify(s, instruction, gold, threshold, backend, cfg).await {
                Ok(v) => VerifyStep::Verdict(v),
                Err(e) => VerifyStep::Failed(e),
            }
        }
    }))
    .buffered(cfg.max_in_flight.max(1))
    .collect()
    .await;

    if let Some(i) = steps
        .iter()
        .position(|s| matches!(s, VerifyStep::Failed(e) if is_unavailable(e)))
    {
        if let VerifyStep::Failed(e) = steps.swap_remove(i) {
            return Err(e);
        }
    }

    let mut run = VerifyRun {
        report: VerifyReport {
            input: samples.len(),
            ..Default::default()
        },
        ..Default::default()
    };
    for (mut sample, step) in samples.into_iter().zip(steps) {
        match step {
            VerifyStep::Verdict(v) => {
                sample
                    .meta
                    .insert("verify_score".into(), v.score.to_string());
                if v.passed {
                    sample.meta.insert("verified".into(), "passed".into());
                    run.report.passed += 1;
                    run.kept.push(sample);
                } else {
                    run.report.failed += 1;
                    let why = format!("score {} below threshold {}", v.score, v.threshold);
                    run.dropped.push((sample, why));
                }
            }
            VerifyStep::NoGold => {
                sample
                    .meta
                    .insert("verified".into(), "skipped_no_gold".into());
                run.report.skipped_no_gold += 1;
                run.kept.push(sample);
            }
            VerifyStep::NoRecord => {
                run.report.missing_record += 1;
                run.dropped.push((sample, "no matching record".into()));
            }
            VerifyStep::Failed(e) => {
                match e {
                    SynthError::VerdictUnparsable(_) | SynthError::VerdictOutOfRange(_) => {
                        run.report.unparsable += 1
                    }
                    _ => run.report.errors += 1,
                }
                run.dropped.push((sample, e.to_string()));
            }
        }
    }
    Ok(run)
}

// ---------------------------------------------------------------- condensation

pub fn condense_request(reasoning: &str, budget: usize, cfg: &SynthConfig) -> GenRequest {
    let n = budget.to_string();
    cfg.request(render(
        &cfg.prompts.condense,
        &[("Reasoning", reasoning), ("N_mode", &n)],
    ))
}

/// Extracts the `"Reasoning"` string from a judge reply. Tolerates code
/// fences, surrounding prose and the trailing comma the template shows.
pub fn parse_condensed(text: &str) -> Option<String> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    let body = &text[start..=end];
    let value: serde_json::Value = serde_json::from_str(body).ok().or_else(|| {
        let re = regex::Regex::new(r",\s*}").expect("static regex");
        serde_json::from_str(&re.replace_all(body, "}")).ok()
    })?;
    let obj = value.as_object()?;
    let reasoning = obj
        .iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case("reasoning"))
        .and_then(|(_, v)| v.as_str())?;
    let reasoning = reasoning.trim();
    (!reasoning.is_empty()).then(|| reasoning.to_string())
}

/// Condenses `reasoning` to the mode's word budget. Text already within
/// budget is returned unchanged. One retry on unparsable or over-budget
/// output.
pub async fn condense(
    reasoning: &str,
    mode: ReasoningMode,
    backend: &dyn Backend,
    cfg: &SynthConfig,
) -> Result<String, SynthError> {
    let budget = cfg
        .budgets
        .for_mode(mode)
        .ok_or(SynthError::NotCondensable(mode))?;
    if word_count(reasoning) <= budget {
        return Ok(reasoning.to_string());
    }
    let limit = cfg.word_limit(budget);
    let mut req = condense_request(reasoning, budget, cfg);
    let mut last = None;
    for attempt in 0..2u64 {
        req.seed = cfg.seed.map(|s| s.wrapping_add(attempt));
        let res = backend.generate(&req).await?;
        match parse_condensed(&res.text) {
            None => last = Some(SynthError::CondenseUnparsable(res.text)),
            Some(text) => {
                let words = word_count(&text);
                if words <= limit {
                    return Ok(text);
                }
                last = Some(SynthError::OverBudget { words, limit });
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondenseFailure {
    pub record_id: String,
    pub mode: ReasoningMode,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiLengthReport {
    pub input: usize,
    pub skipped_no_reasoning: usize,
    pub instances_kept: usize,
    pub instances_dropped: usize,
    pub samples_out: usize,
    pub failures: usize,
    /// Instances where shorter modes ended up with more words than longer ones.
    pub ordering_violations: usize,
    pub ordering_violation_rate: f64,
}

#[derive(Debug, Default)]
pub struct MultiLengthRun {
    pub samples: Vec<ReasoningSample>,
    pub failures: Vec<CondenseFailure>,
    pub report: MultiLengthReport,
}

/// For each reasoning sample, emits the original (tagged `max`) followed by
/// one condensed variant per requested mode.
pub async fn build_multilength_corpus(
    samples: &[ReasoningSample],
    modes: &[ReasoningMode],
    backend: &dyn Backend,
    cfg: &SynthConfig,
) -> Result<MultiLengthRun, SynthError> {
    for &m in modes {
        cfg.budgets.for_mode(m).ok_or(SynthError::NotCondensable(m))?;
    }
    let mut modes = modes.to_vec();
    modes.sort_by_key(|m| cfg.budgets.for_mode(*m));
    modes.dedup();

    let mut report = MultiLengthReport {
        input: samples.len(),
        ..Default::default()
    };
    let eligible: Vec<&ReasoningSample> = samples
        .iter()
        .filter(|s| s.reasoning.as_deref().is_some_and(|r| !r.trim().is_empty()))
        .collect();
    report.skipped_no_reasoning = samples.len() - eligible.len();

    let modes_ref = &modes;
    let mut per_instance: Vec<Vec<(ReasoningMode, Result<String, SynthError>)>> =
        stream::iter(eligible.iter().map(|s| async move {
            let reasoning = s.reasoning.as_deref().unwrap_or_default();
            let mut out = Vec::with_capacity(modes_ref.len());
            for &m in modes_ref {
                out.push((m, condense(reasoning, m, backend, cfg).await));
            }
            out
        }))
        .buffered(cfg.max_in_flight.max(1))
        .collect()
        .await;

    for results in &mut per_instance {
        if let Some(i) = results.iter().position(|(_, r)| r.as_ref().is_err_and(is_unavailable)) {
            return Err(results.swap_remove(i).1.unwrap_err());
        }
    }

    let mut run = MultiLengthRun::default();
    for (orig, results) in eligible.into_iter().zip(per_instance) {
        let mut variants = Vec::new();
        for (mode, res) in results {
            match res {
                Ok(text) => variants.push((mode, text)),
                Err(e) => {
                    tracing::warn!(record = %orig.record_id, %mode, error = %e, "condensation failed");
                    run.failures.push(CondenseFailure {
                        record_id: orig.record_id.clone(),
                        mode,
                        error: e.to_string(),
                    });
                }
            }
        }
        if variants.is_empty() {
            report.instances_dropped += 1;
            continue;
        }
        report.instances_kept += 1;
        let counts: Vec<usize> = variants.iter().map(|(_, t)| word_count(t)).collect();
        if counts.windows(2).any(|w| w[0] > w[1]) {
            tracing::warn!(record = %orig.record_id, ?counts, "budget ordering violated");
            report.ordering_violations += 1;
        }

        let mut max = orig.clone();
        max.mode = ReasoningMode::Max;
        run.samples.push(max);
        for (mode, text) in variants {
            let mut s = orig.clone();
            s.mode = mode;
            s.meta.insert("condensed_from".into(), "max".into());
            s.meta.insert("word_count".into(), word_count(&text).to_string());
            s.reasoning = Some(text);
            run.samples.push(s);
        }
    }
    report.failures = run.failures.len();
    report.samples_out = run.samples.len();
    report.ordering_violation_rate = if report.instances_kept == 0 {
        0.0
    } else {
        report.ordering_violations as f64 / report.instances_kept as f64
    };
    run.report = report;
    Ok(run)
}
