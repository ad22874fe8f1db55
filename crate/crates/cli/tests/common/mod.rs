//! Test fixtures: a deterministic scripted LLM, corpus builders and helpers
//! for recording cassettes in-process.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use controlpipe_core::backend::{RecordingBackend, ScriptedBackend};
use controlpipe_core::filters::{run_filters, FilterConfig};
use controlpipe_core::marker::{ReasoningMode, THINK_MARKER};
use controlpipe_core::records::{InstructionRecord, Lang, ReasoningSample};
use controlpipe_core::synth::{
    build_multilength_corpus, generate_corpus, verify_corpus, Strategy, SynthConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_controlpipe"))
}

pub fn run_cli(cwd: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(cwd)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn controlpipe")
}

pub fn fnv(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

const WORDS: &[&str] = &[
    "patient", "fever", "cough", "history", "exam", "lungs", "heart", "rate", "pressure", "blood",
    "count", "white", "cells", "elevated", "normal", "likely", "unlikely", "infection", "viral",
    "bacterial", "pneumonia", "bronchitis", "asthma", "consider", "rule", "out", "next", "step",
    "imaging", "chest", "radiograph", "shows", "infiltrate", "lobe", "right", "left", "therefore",
    "treatment", "antibiotic", "dose", "days", "follow", "up", "risk", "factors", "smoking", "age",
    "diabetes", "renal", "function", "adjust", "culture", "sputum", "gram", "stain", "positive",
    "negative", "option", "choice", "first", "second", "third", "fourth", "compare", "evidence",
    "guideline", "recommends", "because", "however", "also", "notes", "onset", "acute", "chronic",
    "symptoms", "duration", "week", "oxygen", "saturation", "low", "high", "stable", "admit",
    "outpatient", "score", "severity", "criteria", "meets", "does", "not", "so", "answer", "is",
];

/// Pseudo-random non-repetitive prose of `n` words, fixed by `seed`.
pub fn prose(seed: u64, n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| *WORDS.choose(&mut rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    Some(rest.find(end).map_or(rest, |i| &rest[..i]))
}

/// Deterministic stand-in for a chat model. It recognises the condensation,
/// verification and generation prompts by their shape.
pub fn scripted_llm() -> ScriptedBackend {
    ScriptedBackend::new(|req| {
        let user = &req.user;
        let h = fnv(user);
        if let Some(reasoning) = user
            .strip_prefix("# Reasoning\n")
            .and_then(|r| r.split("\n-----\n").next())
        {
            let n: usize = between(user, "within ", " words")
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0);
            // an imprecise condenser: lands between 60% and 110% of the budget
            let frac = 0.6 + (h % 51) as f64 / 100.0;
            let keep = (n as f64 * frac) as usize;
            let kept: Vec<&str> = reasoning.split_whitespace().take(keep).collect();
            return Ok(serde_json::json!({ "Reasoning": kept.join(" ") }).to_string());
        }
        if user.contains("preferred answer:") {
            let score = if h.is_multiple_of(10) { 5 } else { 8 };
            return Ok(score.to_string());
        }
        if let Some(instr) = user.strip_suffix(&format!(" {THINK_MARKER}")) {
            let words = 200 + (fnv(instr) % 1000) as usize;
            let letter = ['A', 'B', 'C', 'D'][(fnv(instr) % 4) as usize];
            return Ok(format!(
                "<think>{}</think> The best option is \\boxed{{{letter}}}.",
                prose(fnv(instr), words)
            ));
        }
        let letter = ['A', 'B', 'C', 'D'][(h % 4) as usize];
        Ok(format!("\\boxed{{{letter}}}"))
    })
}

pub fn records(n: usize) -> Vec<InstructionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    (0..n)
        .map(|i| {
            // records 1 and 2 share an instruction so the filter finds a duplicate
            let topic = if i == 2 { 1 } else { i };
            InstructionRecord {
                id: format!("r{i:04}"),
                lang: if i % 5 == 0 { Lang::Ko } else { Lang::En },
                context: None,
                instruction: format!("Case {topic}: {}?", prose(1000 + topic as u64, 12)),
                gold_response: (rng.gen_bool(0.8)).then(|| "The answer is B.".to_string()),
                source: "fixture".into(),
            }
        })
        .collect()
}

/// Runs generate, filter, verify and condense through a recording scripted
/// backend and returns the recorder holding every exchange.
pub async fn record_pipeline(
    records: &[InstructionRecord],
) -> (RecordingBackend<ScriptedBackend>, Vec<ReasoningSample>) {
    let cfg = SynthConfig::default();
    let rec = RecordingBackend::new(scripted_llm());
    let gen = generate_corpus(records, Strategy::Instruction, ReasoningMode::Max, &rec, &cfg)
        .await
        .expect("generate");
    let (filtered, _) = run_filters(gen.samples, &FilterConfig::default());
    let verified = verify_corpus(filtered, records, &rec, &cfg).await.expect("verify");
    let multi = build_multilength_corpus(&verified.kept, &ReasoningMode::CONDENSED, &rec, &cfg)
        .await
        .expect("condense");
    (rec, multi.samples)
}
