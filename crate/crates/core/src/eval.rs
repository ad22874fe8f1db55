//! Multiple-choice scoring and cumulative reasoning-length curves.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::marker::{
    compose_response, count_reasoning_tokens, parse_response, ReasoningMode, WhitespaceTokenizer,
};
use crate::records::ReasoningSample;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no items to score")]
    EmptyBatch,
    #[error("item {id}: gold letter {gold:?} is not among the choices")]
    GoldNotInChoices { id: String, gold: String },
    #[error("output for unknown item id {0:?}")]
    UnknownItem(String),
    #[error("duplicate output for item {id:?} in mode {mode}")]
    DuplicateOutput { id: String, mode: ReasoningMode },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A benchmark question as stored in the items file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuestion {
    pub id: String,
    pub question: String,
    pub choices: BTreeMap<String, String>,
    pub gold: String,
}

/// A model output row: either a plain `{id, mode, output}` row or a
/// reasoning sample whose `record_id` names the item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputRow {
    Plain {
        id: String,
        mode: ReasoningMode,
        output: String,
    },
    Sample(ReasoningSample),
}

impl OutputRow {
    pub fn id(&self) -> &str {
        match self {
            OutputRow::Plain { id, .. } => id,
            OutputRow::Sample(s) => &s.record_id,
        }
    }

    pub fn mode(&self) -> ReasoningMode {
        match self {
            OutputRow::Plain { mode, .. } => *mode,
            OutputRow::Sample(s) => s.mode,
        }
    }

    pub fn raw_output(&self) -> String {
        match self {
            OutputRow::Plain { output, .. } => output.clone(),
            OutputRow::Sample(s) => compose_response(s.reasoning.as_deref(), &s.answer),
        }
    }
}

/// A question together with one raw model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub question: String,
    pub choices: BTreeMap<String, String>,
    pub gold: String,
    pub mode: ReasoningMode,
    pub output: String,
}

impl EvalItem {
    pub fn check(&self) -> Result<(), EvalError> {
        if self.choices.contains_key(&self.gold) {
            Ok(())
        } else {
            Err(EvalError::GoldNotInChoices {
                id: self.id.clone(),
                gold: self.gold.clone(),
            })
        }
    }
}

/// Pairs every output with its question. The result is ordered by mode and
/// then by item id, so every mode's curve shares the same x-axis.
pub fn join_outputs(
    questions: &[EvalQuestion],
    outputs: &[OutputRow],
) -> Result<Vec<EvalItem>, EvalError> {
    let by_id: HashMap<&str, &EvalQuestion> =
        questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut seen = std::collections::HashSet::new();
    let mut items = Vec::with_capacity(outputs.len());
    for row in outputs {
        let q = by_id
            .get(row.id())
            .ok_or_else(|| EvalError::UnknownItem(row.id().to_string()))?;
        if !seen.insert((row.id().to_string(), row.mode())) {
            return Err(EvalError::DuplicateOutput {
                id: row.id().to_string(),
                mode: row.mode(),
            });
        }
        items.push(EvalItem {
            id: q.id.clone(),
            question: q.question.clone(),
            choices: q.choices.clone(),
            gold: q.gold.clone(),
            mode: row.mode(),
            output: row.raw_output(),
        });
    }
    items.sort_by(|a, b| (a.mode, &a.id).cmp(&(b.mode, &b.id)));
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extracted {
    Letter(char),
    NoAnswer,
}

static BOXED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\\boxed\{([^{}]*)\}").unwrap());
static ANSWER_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?:\b(?i:answer)|정답)\s*[:：]\s*\(?([A-E])\)?(?:[^A-Za-z0-9]|$)").unwrap()
});

/// Letter inside the last `\boxed{..}` if that is a single A-E letter,
/// else the letter of the last `Answer: X` (or `정답: X`), else `NoAnswer`.
pub fn extract_answer(raw: &str) -> Extracted {
    if let Some(m) = BOXED.captures_iter(raw).last() {
        let inner = m[1].trim();
        let mut chars = inner.chars();
        if let (Some(c @ 'A'..='E'), None) = (chars.next(), chars.next()) {
            return Extracted::Letter(c);
        }
    }
    ANSWER_LINE
        .captures_iter(raw)
        .last()
        .and_then(|c| c[1].chars().next())
        .map_or(Extracted::NoAnswer, Extracted::Letter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub mode: ReasoningMode,
    pub predicted: Option<char>,
    pub gold: String,
    pub correct: bool,
    pub reasoning_tokens: usize,
    /// Whether the output parsed under the think-block grammar.
    pub well_formed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub items: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub total_reasoning_tokens: usize,
    pub mean_reasoning_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modes: BTreeMap<ReasoningMode, ModeSummary>,
    pub items: Vec<ItemRow>,
    /// Prefix sums of reasoning tokens per mode, in item order.
    pub cumulative: BTreeMap<ReasoningMode, Vec<usize>>,
}

pub fn score(items: &[EvalItem]) -> Result<EvalReport, EvalError> {
    score_with_modes(items, &[])
}

/// Like [`score`], but also reports each mode in `modes` even if no item
/// uses it (with zero items and an empty curve).
pub fn score_with_modes(
    items: &[EvalItem],
    modes: &[ReasoningMode],
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(items.len());
    let mut cumulative: BTreeMap<ReasoningMode, Vec<usize>> =
        modes.iter().map(|m| (*m, Vec::new())).collect();
    for item in items {
        item.check()?;
        let predicted = match extract_answer(&item.output) {
            Extracted::Letter(c) => Some(c),
            Extracted::NoAnswer => None,
        };
        let parsed = parse_response(&item.output);
        let reasoning_tokens = parsed
            .as_ref()
            .map_or(0, |p| count_reasoning_tokens(p, &WhitespaceTokenizer));
        let correct = predicted.is_some_and(|c| item.gold.len() == 1 && item.gold.starts_with(c));
        let series = cumulative.entry(item.mode).or_default();
        let prev = series.last().copied().unwrap_or(0);
        series.push(prev + reasoning_tokens);
        rows.push(ItemRow {
            id: item.id.clone(),
            mode: item.mode,
            predicted,
            gold: item.gold.clone(),
            correct,
            reasoning_tokens,
            well_formed: parsed.is_ok(),
        });
    }
    let modes = cumulative
        .keys()
        .map(|&mode| {
            let mine: Vec<&ItemRow> = rows.iter().filter(|r| r.mode == mode).collect();
            let n = mine.len();
            let correct = mine.iter().filter(|r| r.correct).count();
            let total: usize = mine.iter().map(|r| r.reasoning_tokens).sum();
            let ratio = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
            let summary = ModeSummary {
                items: n,
                correct,
                accuracy: ratio(correct as f64),
                total_reasoning_tokens: total,
                mean_reasoning_tokens: ratio(total as f64),
            };
            (mode, summary)
        })
        .collect();
    Ok(EvalReport {
        modes,
        items: rows,
        cumulative,
    })
}

fn write_file(path: &Path, body: &str) -> Result<(), EvalError> {
    std::fs::write(path, body).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `report.json` and one `cumulative_<mode>.csv` per mode into `dir`.
/// Returns the written paths.
pub fn render_report(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_file(&json_path, &json)?;
    written.push(json_path);
    for (mode, series) in &report.cumulative {
        let mut csv = String::from("index,cumulative_tokens\n");
        for (i, v) in series.iter().enumerate() {
            let _ = writeln!(csv, "{},{v}", i + 1);
        }
        let path = dir.join(format!("cumulative_{mode}.csv"));
        write_file(&path, &csv)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(id: &str, mode: ReasoningMode, output: &str, gold: &str) -> EvalItem {
        EvalItem {
            id: id.into(),
            question: "q".into(),
            choices: ["A", "B", "C", "D"]
                .iter()
                .map(|l| (l.to_string(), format!("opt {l}")))
                .collect(),
            gold: gold.into(),
            mode,
            output: output.into(),
        }
    }

    #[test]
    fn boxed_final_answer() {
        assert_eq!(extract_answer("...Final Answer: \\boxed{D}"), Extracted::Letter('D'));
    }

    #[test]
    fn last_boxed_wins() {
        assert_eq!(
            extract_answer("maybe \\boxed{B} ... on reflection \\boxed{D}"),
            Extracted::Letter('D')
        );
    }

    #[test]
    fn no_structured_answer() {
        assert_eq!(extract_answer("no structured answer"), Extracted::NoAnswer);
    }

    #[test]
    fn fallback_patterns() {
        assert_eq!(extract_answer("Answer: C"), Extracted::Letter('C'));
        assert_eq!(extract_answer("answer: (B)."), Extracted::Letter('B'));
        assert_eq!(extract_answer("정답: E"), Extracted::Letter('E'));
        assert_eq!(extract_answer("Answer: A\nthen Answer: B"), Extracted::Letter('B'));
        // boxed content that is not a single letter defers to the fallback
        assert_eq!(extract_answer("Answer: A \\boxed{42}"), Extracted::Letter('A'));
        assert_eq!(extract_answer("Answer: Aspirin"), Extracted::NoAnswer);
        assert_eq!(extract_answer("\\boxed{F}"), Extracted::NoAnswer);
    }

    #[test]
    fn half_correct() {
        let items = [
            item("1", ReasoningMode::Direct, "\\boxed{A}", "A"),
            item("2", ReasoningMode::Direct, "\\boxed{A}", "B"),
        ];
        let r = score(&items).unwrap();
        assert_eq!(r.modes[&ReasoningMode::Direct].accuracy, 0.5);
    }

    #[test]
    fn direct_has_zero_reasoning_tokens() {
        let items = [
            item("1", ReasoningMode::Direct, "\\boxed{A}", "A"),
            item("2", ReasoningMode::Direct, "so \\boxed{C}", "B"),
        ];
        let r = score(&items).unwrap();
        assert_eq!(r.modes[&ReasoningMode::Direct].total_reasoning_tokens, 0);
    }

    #[test]
    fn prefix_sum_series() {
        let items = [
            item("1", ReasoningMode::Max, "<think>a b c</think> \\boxed{A}", "A"),
            item("2", ReasoningMode::Max, "<think>a b c d e</think> \\boxed{A}", "A"),
            item("3", ReasoningMode::Max, "<think>a b</think> \\boxed{A}", "A"),
        ];
        let r = score(&items).unwrap();
        assert_eq!(r.cumulative[&ReasoningMode::Max], vec![3, 8, 10]);
        assert_eq!(r.modes[&ReasoningMode::Max].mean_reasoning_tokens, 10.0 / 3.0);
    }

    #[test]
    fn empty_and_invalid() {
        assert!(matches!(score(&[]), Err(EvalError::EmptyBatch)));
        let bad = item("1", ReasoningMode::Direct, "x", "Z");
        assert!(matches!(score(&[bad]), Err(EvalError::GoldNotInChoices { .. })));
    }

    #[test]
    fn render_two_modes_and_empty_partition() {
        let items = [
            item("1", ReasoningMode::Max, "<think>a b</think> \\boxed{A}", "A"),
            item("1", ReasoningMode::Direct, "\\boxed{A}", "A"),
        ];
        let r = score_with_modes(&items, &[ReasoningMode::Short]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = render_report(&r, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let csvs = files.iter().filter(|p| p.extension().unwrap() == "csv").count();
        assert_eq!(csvs, 3);
        let short = std::fs::read_to_string(dir.path().join("cumulative_short.csv")).unwrap();
        assert_eq!(short, "index,cumulative_tokens\n");
        let max = std::fs::read_to_string(dir.path().join("cumulative_max.csv")).unwrap();
        assert_eq!(max, "index,cumulative_tokens\n1,2\n");

        let before: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        render_report(&r, dir.path()).unwrap();
        let after: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn join_sorts_by_mode_then_id() {
        let q = |id: &str| EvalQuestion {
            id: id.into(),
            question: "q".into(),
            choices: [("A".into(), "x".into())].into(),
            gold: "A".into(),
        };
        let out = |id: &str, mode| OutputRow::Plain {
            id: id.into(),
            mode,
            output: "\\boxed{A}".into(),
        };
        let qs = [q("b"), q("a")];
        let outs = [
            out("b", ReasoningMode::Max),
            out("a", ReasoningMode::Max),
            out("a", ReasoningMode::Direct),
        ];
        let items = join_outputs(&qs, &outs).unwrap();
        let order: Vec<_> = items.iter().map(|i| (i.mode, i.id.as_str())).collect();
        assert_eq!(
            order,
            [
                (ReasoningMode::Direct, "a"),
                (ReasoningMode::Max, "a"),
                (ReasoningMode::Max, "b")
            ]
        );
        assert!(matches!(
            join_outputs(&qs, &[out("zz", ReasoningMode::Max)]),
            Err(EvalError::UnknownItem(_))
        ));
        assert!(matches!(
            join_outputs(&qs, &[out("a", ReasoningMode::Max), out("a", ReasoningMode::Max)]),
            Err(EvalError::DuplicateOutput { .. })
        ));
    }

    #[test]
    fn output_rows_parse_both_shapes() {
        let plain: OutputRow =
            serde_json::from_str(r#"{"id":"q1","mode":"direct","output":"\\boxed{A}"}"#).unwrap();
        assert_eq!(plain.id(), "q1");
        let sample: OutputRow = serde_json::from_str(
            r#"{"record_id":"q2","mode":"short","reasoning":"r","answer":"\\boxed{B}","meta":{}}"#,
        )
        .unwrap();
        assert_eq!(sample.mode(), ReasoningMode::Short);
        assert_eq!(sample.raw_output(), "<think>r</think> \\boxed{B}");
    }

    fn arb_items() -> impl Strategy<Value = Vec<EvalItem>> {
        let mode = prop::sample::select(ReasoningMode::ALL.to_vec());
        let row = (mode, 0usize..12, prop::sample::select(vec!['A', 'B', 'C', 'D']), any::<bool>());
        prop::collection::vec(row, 1..40).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (mode, n, letter, boxed))| {
                    let reasoning = vec!["w"; n].join(" ");
                    let ans = if boxed { format!("\\boxed{{{letter}}}") } else { "none".into() };
                    let out = if mode.requires_reasoning() {
                        format!("<think>{reasoning}</think> {ans}")
                    } else {
                        ans
                    };
                    item(&i.to_string(), mode, &out, "B")
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn series_are_prefix_sums(items in arb_items()) {
            let r = score(&items).unwrap();
            for (mode, series) in &r.cumulative {
                let counts: Vec<usize> = r.items.iter().filter(|i| i.mode == *mode).map(|i| i.reasoning_tokens).collect();
                let folded: Vec<usize> = counts.iter().scan(0, |acc, x| { *acc += x; Some(*acc) }).collect();
                prop_assert_eq!(series, &folded);
                prop_assert_eq!(series.len(), r.modes[mode].items);
                prop_assert!(series.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn accuracy_is_permutation_invariant(items in arb_items(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = items.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = score(&items).unwrap();
            let b = score(&shuffled).unwrap();
            for (mode, s) in &a.modes {
                prop_assert_eq!(s.accuracy, b.modes[mode].accuracy);
                prop_assert!((0.0..=1.0).contains(&s.accuracy));
            }
        }

        #[test]
        fn extract_never_panics(s in ".*") {
            let _ = extract_answer(&s);
        }
    }
}
