//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use controlpipe_core::backend::{Backend, HttpBackend, RecordingBackend, StubBackend};
use controlpipe_core::eval::{join_outputs, render_report, score, EvalQuestion, OutputRow};
use controlpipe_core::filters::{run_filters, FilterConfig, FilterReport, Filterable};
use controlpipe_core::guard::{
    demo_vocabulary, derive_restricted_set, guarded_sample, mask_logits, masked_softmax,
    parse_script_list, SampleOptions,
};
use controlpipe_core::marker::{parse_response, validate, ReasoningMode};
use controlpipe_core::records::{
    read_corpus, read_jsonl, rejects_path, write_corpus, write_jsonl, Corpus, InstructionRecord,
    Provenance, ReasoningSample, RejectedRow, Row,
};
use controlpipe_core::synth::{
    build_multilength_corpus, generate_corpus, verify_corpus, PromptSet, Strategy, SynthConfig,
};
use controlpipe_core::toy::{
    exact_answer_reward, mode_conditioning_eval, ppo_train, sft_train, validity_reward, ToyPolicy,
    ToyTask,
};
use controlpipe_core::train_math::{reward, RewardInput};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{AppConfig, BackendKind};
use crate::{BackendArgs, Command, CorpusKind, RewardChecker, Stage, StrategyArg, SynthArgs};

/// Seed of the held-out prompts used to report mode conditioning after SFT.
const HELD_OUT_SEED_OFFSET: u64 = 1_000_003;

pub fn run(cmd: Command, app: &AppConfig) -> Result<()> {
    match cmd {
        Command::Generate {
            input,
            out,
            strategy,
            mode,
            ban_scripts,
            backend,
            synth,
        } => generate(app, &input, &out, strategy, mode, ban_scripts, &backend, &synth),
        Command::Filter {
            input,
            out,
            kind,
            ngram,
            rep_threshold,
            min_len,
            max_len,
        } => {
            let mut cfg = app.filter.clone();
            if let Some(n) = ngram {
                cfg.ngram_n = n;
            }
            if let Some(t) = rep_threshold {
                cfg.repetition_threshold = t;
            }
            if let Some(n) = min_len {
                cfg.min_len = n;
            }
            if let Some(n) = max_len {
                cfg.max_len = n;
            }
            filter(&input, &out, kind, &cfg)
        }
        Command::Verify {
            input,
            records,
            out,
            threshold,
            backend,
            synth,
        } => verify(app, &input, &records, &out, threshold, &backend, &synth),
        Command::Condense {
            input,
            out,
            modes,
            backend,
            synth,
        } => condense(app, &input, &out, &modes, &backend, &synth),
        Command::Reward { input, out } => reward_cmd(&input, out.as_deref()),
        Command::TrainToy {
            stage,
            epochs,
            lr,
            clip_eps,
            batch_size,
            reward,
            out,
        } => train_toy(app, stage, epochs, lr, clip_eps, batch_size, reward, out.as_deref()),
        Command::Eval {
            items,
            outputs,
            report,
        } => eval(&items, &outputs, &report),
        Command::GuardDemo { ban_scripts, len } => guard_demo(app, &ban_scripts, len),
    }
}

// ---------------------------------------------------------------- shared

enum BuiltBackend {
    Http(HttpBackend),
    Stub(StubBackend),
    Recording(RecordingBackend<HttpBackend>, PathBuf),
}

impl BuiltBackend {
    fn get(&self) -> &dyn Backend {
        match self {
            BuiltBackend::Http(b) => b,
            BuiltBackend::Stub(b) => b,
            BuiltBackend::Recording(b, _) => b,
        }
    }

    fn finish(&self) -> Result<()> {
        if let BuiltBackend::Recording(b, path) = self {
            let n = b.save(path)?;
            tracing::info!(entries = n, path = %path.display(), "cassette saved");
        }
        Ok(())
    }
}

fn build_backend(app: &AppConfig, args: &BackendArgs) -> Result<BuiltBackend> {
    let mut cfg = app.backend.http.clone();
    if let Some(v) = &args.base_url {
        cfg.base_url = v.clone();
    }
    if let Some(v) = &args.model {
        cfg.model = v.clone();
    }
    if let Some(v) = &args.api_key_env {
        cfg.api_key_env = v.clone();
    }
    if let Some(v) = args.max_retries {
        cfg.max_retries = v;
    }
    if let Some(v) = args.max_in_flight {
        cfg.max_in_flight = v;
    }
    if let Some(v) = args.timeout_secs {
        cfg.timeout_secs = v;
    }
    cfg.validate()?;
    let kind = args.backend.unwrap_or(app.backend.kind);
    let cassette = args.cassette.clone().or_else(|| app.backend.cassette.clone());
    match kind {
        BackendKind::Stub => {
            if args.record.is_some() {
                bail!("--record needs the http backend");
            }
            let path = cassette.context("the stub backend needs --cassette")?;
            let stub = StubBackend::from_cassette(&path)
                .with_context(|| format!("loading cassette {}", path.display()))?;
            Ok(BuiltBackend::Stub(stub))
        }
        BackendKind::Http => {
            let http = HttpBackend::new(cfg)?;
            Ok(match &args.record {
                Some(p) => BuiltBackend::Recording(RecordingBackend::new(http), p.clone()),
                None => BuiltBackend::Http(http),
            })
        }
    }
}

fn synth_config(
    app: &AppConfig,
    args: &SynthArgs,
    backend: &BackendArgs,
    ban_scripts: Option<&str>,
) -> Result<SynthConfig> {
    let s = &app.synth;
    let prompts = match args.prompts.as_ref().or(s.prompts_dir.as_ref()) {
        Some(dir) => PromptSet::load_dir(dir)?,
        None => PromptSet::default(),
    };
    let ban_scripts = match ban_scripts {
        Some(list) => parse_script_list(list)?,
        None => parse_script_list(&s.ban_scripts.join(","))?,
    };
    Ok(SynthConfig {
        temperature: args.temperature.unwrap_or(s.temperature),
        max_tokens: args.max_tokens.unwrap_or(s.max_tokens),
        seed: app.seed,
        max_in_flight: backend
            .max_in_flight
            .unwrap_or(app.backend.http.max_in_flight)
            .max(1),
        verify_threshold: s.verify_threshold,
        budgets: s.budgets,
        budget_slack: s.budget_slack,
        ban_scripts,
        prompts,
    })
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn input_reject(r: &RejectedRow) -> Value {
    json!({"stage": "input", "line": r.line, "error": r.error, "raw": r.raw})
}

/// Writes `<out>.rejects`; an empty list removes a stale file instead.
fn write_reject_lines(out: &Path, rows: &[Value]) -> Result<()> {
    let path = rejects_path(out);
    if rows.is_empty() {
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        return Ok(());
    }
    write_jsonl(&path, rows)?;
    Ok(())
}

fn read_rows<T: Row>(path: &Path, rejects: &mut Vec<Value>) -> Result<Vec<T>> {
    let outcome = read_corpus::<T>(path)?;
    if !outcome.rejects.is_empty() {
        tracing::warn!(count = outcome.rejects.len(), path = %path.display(), "malformed input rows");
    }
    rejects.extend(outcome.rejects.iter().map(input_reject));
    Ok(outcome.corpus.rows)
}

fn write_rows<T: Row>(rows: Vec<T>, out: &Path, stage: &str) -> Result<()> {
    let corpus = Corpus::new(rows).with_provenance(Provenance::now(stage));
    write_corpus(&corpus, out)?;
    Ok(())
}

// ---------------------------------------------------------------- stages

#[allow(clippy::too_many_arguments)]
fn generate(
    app: &AppConfig,
    input: &Path,
    out: &Path,
    strategy: StrategyArg,
    mode: ReasoningMode,
    ban_scripts: Option<String>,
    backend_args: &BackendArgs,
    synth_args: &SynthArgs,
) -> Result<()> {
    let cfg = synth_config(app, synth_args, backend_args, ban_scripts.as_deref())?;
    let backend = build_backend(app, backend_args)?;
    let mut rejects = Vec::new();
    let records: Vec<InstructionRecord> = read_rows(input, &mut rejects)?;
    let strategy = match strategy {
        StrategyArg::Instruction => Strategy::Instruction,
        StrategyArg::Context => Strategy::Context,
    };
    let run = runtime()?.block_on(generate_corpus(&records, strategy, mode, backend.get(), &cfg))?;
    backend.finish()?;
    rejects.extend(run.rejected.iter().map(|r| {
        json!({"stage": "generate", "record_id": r.record_id, "mode": r.mode, "error": r.reason, "raw": r.raw})
    }));
    rejects.extend(
        run.errors
            .iter()
            .map(|(id, e)| json!({"stage": "generate", "record_id": id, "error": e})),
    );
    write_rows(run.samples, out, "generate")?;
    write_reject_lines(out, &rejects)?;
    print_json(&run.report)
}

fn detect_kind(path: &Path) -> Result<CorpusKind> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Ok(CorpusKind::Samples);
    };
    let v: Value = serde_json::from_str(first)
        .with_context(|| format!("{}: first row is not JSON", path.display()))?;
    Ok(if v.get("record_id").is_some() {
        CorpusKind::Samples
    } else {
        CorpusKind::Records
    })
}

fn filter_rows<T: Row + Filterable>(
    input: &Path,
    out: &Path,
    cfg: &FilterConfig,
) -> Result<FilterReport> {
    let mut rejects = Vec::new();
    let rows: Vec<T> = read_rows(input, &mut rejects)?;
    let (kept, report) = run_filters(rows, cfg);
    write_rows(kept, out, "filter")?;
    write_reject_lines(out, &rejects)?;
    Ok(report)
}

fn filter(input: &Path, out: &Path, kind: CorpusKind, cfg: &FilterConfig) -> Result<()> {
    cfg.validate()?;
    let kind = match kind {
        CorpusKind::Auto => detect_kind(input)?,
        k => k,
    };
    let report = match kind {
        CorpusKind::Records => filter_rows::<InstructionRecord>(input, out, cfg)?,
        _ => filter_rows::<ReasoningSample>(input, out, cfg)?,
    };
    print_json(&report)
}

fn verify(
    app: &AppConfig,
    input: &Path,
    records_path: &Path,
    out: &Path,
    threshold: Option<u8>,
    backend_args: &BackendArgs,
    synth_args: &SynthArgs,
) -> Result<()> {
    let mut cfg = synth_config(app, synth_args, backend_args, None)?;
    if let Some(t) = threshold {
        if t > 10 {
            bail!("--threshold must be within 0..=10");
        }
        cfg.verify_threshold = t;
    }
    let backend = build_backend(app, backend_args)?;
    let mut rejects = Vec::new();
    let samples: Vec<ReasoningSample> = read_rows(input, &mut rejects)?;
    let records: Vec<InstructionRecord> = read_rows(records_path, &mut Vec::new())?;
    let run = runtime()?.block_on(verify_corpus(samples, &records, backend.get(), &cfg))?;
    backend.finish()?;
    rejects.extend(
        run.dropped
            .iter()
            .map(|(s, why)| json!({"stage": "verify", "record_id": s.record_id, "mode": s.mode, "error": why})),
    );
    write_rows(run.kept, out, "verify")?;
    write_reject_lines(out, &rejects)?;
    print_json(&run.report)
}

fn condense(
    app: &AppConfig,
    input: &Path,
    out: &Path,
    modes: &str,
    backend_args: &BackendArgs,
    synth_args: &SynthArgs,
) -> Result<()> {
    let modes: Vec<ReasoningMode> = modes
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.trim().parse())
        .collect::<Result<_, _>>()?;
    let cfg = synth_config(app, synth_args, backend_args, None)?;
    let backend = build_backend(app, backend_args)?;
    let mut rejects = Vec::new();
    let samples: Vec<ReasoningSample> = read_rows(input, &mut rejects)?;
    let run = runtime()?.block_on(build_multilength_corpus(&samples, &modes, backend.get(), &cfg))?;
    backend.finish()?;
    rejects.extend(
        run.failures
            .iter()
            .map(|f| json!({"stage": "condense", "record_id": f.record_id, "mode": f.mode, "error": f.error})),
    );
    write_rows(run.samples, out, "condense")?;
    write_reject_lines(out, &rejects)?;
    print_json(&run.report)
}

#[derive(Deserialize)]
struct RewardRow {
    correct_prob: f64,
    response: String,
    mode: ReasoningMode,
}

#[derive(Serialize)]
struct RewardOut {
    correct_prob: f64,
    mode: ReasoningMode,
    valid: bool,
    reward: u8,
}

fn reward_cmd(input: &Path, out: Option<&Path>) -> Result<()> {
    let rows: Vec<RewardRow> = read_jsonl(input)?;
    let mut scored = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let valid = parse_response(&row.response).is_ok_and(|p| validate(&p, row.mode));
        let inp = RewardInput::new(row.correct_prob, valid)
            .with_context(|| format!("row {}", i + 1))?;
        scored.push(RewardOut {
            correct_prob: row.correct_prob,
            mode: row.mode,
            valid,
            reward: reward(inp),
        });
    }
    match out {
        Some(path) => {
            write_jsonl(path, &scored)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            for r in &scored {
                serde_json::to_writer(&mut stdout, r)?;
                writeln!(stdout)?;
            }
        }
    }
    let total: usize = scored.iter().map(|r| r.reward as usize).sum();
    tracing::info!(rows = scored.len(), rewarded = total, "rewards computed");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_toy(
    app: &AppConfig,
    stage: Stage,
    epochs: Option<usize>,
    lr: Option<f64>,
    clip_eps: Option<f64>,
    batch_size: Option<usize>,
    checker: RewardChecker,
    out: Option<&Path>,
) -> Result<()> {
    let seed = app.seed.unwrap_or(0);
    let mut policy = ToyPolicy::uniform();
    let (curve, summary) = match stage {
        Stage::Sft => {
            let mut cfg = app.toy.sft.clone();
            cfg.seed = seed;
            if let Some(n) = epochs {
                cfg.steps = n;
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            let curve = sft_train(&mut policy, &cfg)?;
            let mut held_out = ToyTask::new(seed.wrapping_add(HELD_OUT_SEED_OFFSET));
            let matched = mode_conditioning_eval(&policy, &mut held_out, 200, 16)?;
            tracing::info!(mode_match = matched, "held-out mode conditioning");
            (curve, json!({"stage": "sft", "steps": cfg.steps, "mode_match": matched}))
        }
        Stage::Ppo => {
            let mut cfg = app.toy.ppo.clone();
            cfg.seed = seed;
            if let Some(n) = epochs {
                cfg.epochs = n;
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = clip_eps {
                cfg.clip_epsilon = v;
            }
            if let Some(v) = batch_size {
                cfg.rollouts_per_epoch = v;
            }
            let res = match checker {
                RewardChecker::Validity => ppo_train(&mut policy, validity_reward, &cfg)?,
                RewardChecker::Exact => ppo_train(&mut policy, exact_answer_reward, &cfg)?,
            };
            let summary = json!({
                "stage": "ppo",
                "epochs": cfg.epochs,
                "first_reward": res.mean_reward.first(),
                "final_reward": res.mean_reward.last(),
                "rejected_updates": res.rejected_updates,
            });
            (res.mean_reward, summary)
        }
    };
    let mut csv = String::from("epoch,loss_or_reward\n");
    for (i, v) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{v}\n", i + 1));
    }
    match out {
        Some(path) => {
            std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            print_json(&summary)
        }
        None => {
            std::io::stdout().lock().write_all(csv.as_bytes())?;
            Ok(())
        }
    }
}

fn eval(items: &Path, outputs: &Path, report_dir: &Path) -> Result<()> {
    let questions: Vec<EvalQuestion> = read_jsonl(items)?;
    let outputs: Vec<OutputRow> = read_jsonl(outputs)?;
    let joined = join_outputs(&questions, &outputs)?;
    let report = score(&joined)?;
    render_report(&report, report_dir)?;
    print_json(&report.modes)
}

fn guard_demo(app: &AppConfig, ban_scripts: &str, len: usize) -> Result<()> {
    let vocab = demo_vocabulary();
    let scripts = parse_script_list(ban_scripts)?;
    let banned = derive_restricted_set(&vocab, &scripts);
    // Banned tokens get the highest logits so that masking is visible.
    let logits: Vec<f64> = (0..vocab.len())
        .map(|i| {
            if banned.contains(i) {
                4.0
            } else {
                ((i * 7) % 5) as f64 * 0.5
            }
        })
        .collect();
    let probs = masked_softmax(&mask_logits(&logits, &banned)?)?;
    let eos = vocab.tokens().iter().position(|t| t == "<eos>");
    let sampled = guarded_sample(
        |_| logits.clone(),
        &vocab,
        &banned,
        len,
        app.seed.unwrap_or(0),
        SampleOptions { stop_token: eos },
    )?;
    let tokens: Vec<&str> = sampled.iter().filter_map(|&i| vocab.token(i)).collect();
    let distribution: serde_json::Map<String, Value> = vocab
        .tokens()
        .iter()
        .zip(&probs)
        .map(|(t, p)| (t.clone(), json!(p)))
        .collect();
    print_json(&json!({
        "banned_scripts": scripts.iter().map(|s| format!("{s:?}").to_lowercase()).collect::<Vec<_>>(),
        "banned_tokens": banned.indices().filter_map(|i| vocab.token(i)).collect::<Vec<_>>(),
        "distribution": distribution,
        "sampled": tokens,
    }))
}
