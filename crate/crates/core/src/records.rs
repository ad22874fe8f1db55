//! Data model shared by every pipeline stage, persisted as JSON Lines.
//!
//! One object per line, UTF-8, optional fields omitted rather than written as
//! `null`. Malformed rows never abort a read: they are collected as
//! [`RejectedRow`]s and can be written to a sibling `.rejects` file.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::marker::ReasoningMode;

#[derive(Debug, thiserror::Error)]
pub enum RecordsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RecordsError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Ko,
}

/// One sourced instruction, optionally with the raw context it came from and
/// a gold response to verify synthetic answers against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRecord {
    pub id: String,
    pub lang: Lang,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_response: Option<String>,
    pub source: String,
}

/// Meta key under which a sample carries the instruction it answers.
pub const META_INSTRUCTION: &str = "instruction";

/// A training triplet: instruction (by reference), optional reasoning, answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReasoningSample {
    pub record_id: String,
    pub mode: ReasoningMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    pub answer: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl ReasoningSample {
    pub fn instruction(&self) -> Option<&str> {
        self.meta.get(META_INSTRUCTION).map(String::as_str)
    }
}

/// Row types that can live in a [`Corpus`].
pub trait Row: Serialize + DeserializeOwned + Clone {
    /// Checks per-row invariants after parsing.
    fn check(&self) -> Result<(), String>;

    /// Key that must be unique within a corpus, if the schema has one.
    fn unique_key(&self) -> Option<&str> {
        None
    }
}

impl Row for InstructionRecord {
    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.instruction.trim().is_empty() {
            return Err("empty instruction".into());
        }
        Ok(())
    }

    fn unique_key(&self) -> Option<&str> {
        Some(&self.id)
    }
}

impl Row for ReasoningSample {
    fn check(&self) -> Result<(), String> {
        if self.record_id.is_empty() {
            return Err("empty record_id".into());
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        match (self.mode, &self.reasoning) {
            (ReasoningMode::Direct, Some(_)) => Err("direct sample carries reasoning".into()),
            (m, None) if m != ReasoningMode::Direct => {
                Err(format!("{} sample has no reasoning", m.as_str()))
            }
            _ => Ok(()),
        }
    }
}

/// Where a corpus came from. Stored in a `<file>.provenance.json` sidecar so
/// the data file stays one row per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub stage: String,
    pub created_unix: u64,
}

impl Provenance {
    pub fn now(stage: &str) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.to_string(),
            created_unix,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<T> {
    pub provenance: Option<Provenance>,
    pub rows: Vec<T>,
}

impl<T> Corpus<T> {
    pub fn new(rows: Vec<T>) -> Self {
        Self {
            provenance: None,
            rows,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.rows.iter()
    }
}

impl<T> Default for Corpus<T> {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl<T> FromIterator<T> for Corpus<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// A row that failed to parse or violated a row invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based line number in the source file (0 when not file-backed).
    pub line: usize,
    pub error: String,
    pub raw: String,
}

#[derive(Debug)]
pub struct ReadOutcome<T> {
    pub corpus: Corpus<T>,
    pub rejects: Vec<RejectedRow>,
}

pub fn provenance_path(path: &Path) -> PathBuf {
    sibling(path, "provenance.json")
}

pub fn rejects_path(path: &Path) -> PathBuf {
    sibling(path, "rejects")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Parses one JSONL row and checks its invariants.
pub fn parse_row<T: Row>(line: &str) -> Result<T, String> {
    let row: T = serde_json::from_str(line).map_err(|e| e.to_string())?;
    row.check()?;
    Ok(row)
}

/// Reads every well-formed row of `path` in file order. Blank lines are
/// skipped; anything else that fails to parse is reported as a reject.
pub fn read_corpus<T: Row>(path: &Path) -> Result<ReadOutcome<T>, RecordsError> {
    let file = File::open(path).map_err(|e| RecordsError::io(path, e))?;
    let mut rows = Vec::new();
    let mut rejects = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RecordsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_row::<T>(&line).and_then(|row| match row.unique_key() {
            Some(key) if !seen.insert(key.to_string()) => Err(format!("duplicate id {key:?}")),
            _ => Ok(row),
        });
        match parsed {
            Ok(row) => rows.push(row),
            Err(error) => rejects.push(RejectedRow {
                line: idx + 1,
                error,
                raw: line,
            }),
        }
    }
    let provenance = match std::fs::read_to_string(provenance_path(path)) {
        Ok(text) => serde_json::from_str(&text).ok(),
        Err(_) => None,
    };
    Ok(ReadOutcome {
        corpus: Corpus { provenance, rows },
        rejects,
    })
}

/// Writes `corpus` as JSONL (plus the provenance sidecar when present) and
/// returns the number of rows written.
pub fn write_corpus<T: Row>(corpus: &Corpus<T>, path: &Path) -> Result<usize, RecordsError> {
    write_jsonl(path, &corpus.rows)?;
    if let Some(prov) = &corpus.provenance {
        let side = provenance_path(path);
        let text = serde_json::to_string_pretty(prov)?;
        std::fs::write(&side, text + "\n").map_err(|e| RecordsError::io(&side, e))?;
    }
    Ok(corpus.rows.len())
}

/// Writes rejects next to `path` as `<path>.rejects`. Nothing is written when
/// there are no rejects.
pub fn write_rejects(path: &Path, rejects: &[RejectedRow]) -> Result<(), RecordsError> {
    if rejects.is_empty() {
        return Ok(());
    }
    write_jsonl(&rejects_path(path), rejects)?;
    Ok(())
}

/// Writes any serializable rows as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<usize, RecordsError> {
    let file = File::create(path).map_err(|e| RecordsError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(|e| RecordsError::io(path, e))?;
    }
    out.flush().map_err(|e| RecordsError::io(path, e))?;
    Ok(rows.len())
}

/// Reads arbitrary JSONL rows, failing on the first malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordsError> {
    let file = File::open(path).map_err(|e| RecordsError::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| RecordsError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(id: &str) -> InstructionRecord {
        InstructionRecord {
            id: id.into(),
            lang: Lang::En,
            context: None,
            instruction: format!("question {id}"),
            gold_response: Some("gold".into()),
            source: "test".into(),
        }
    }

    #[test]
    fn three_valid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let c: Corpus<_> = ["a", "b", "c"].iter().map(|id| record(id)).collect();
        assert_eq!(write_corpus(&c, &path).unwrap(), 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back = read_corpus::<InstructionRecord>(&path).unwrap();
        assert_eq!(back.corpus.rows, c.rows);
        assert!(back.rejects.is_empty());
    }

    #[test]
    fn truncated_line_is_rejected_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let a = serde_json::to_string(&record("a")).unwrap();
        let b = serde_json::to_string(&record("b")).unwrap();
        let trunc = &b[..b.len() / 2];
        std::fs::write(&path, format!("{a}\n{trunc}\n{b}\n")).unwrap();
        let out = read_corpus::<InstructionRecord>(&path).unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line, 2);
    }

    #[test]
    fn empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        let out = read_corpus::<ReasoningSample>(&path).unwrap();
        assert!(out.corpus.is_empty());
        assert!(out.rejects.is_empty());
    }

    #[test]
    fn missing_file_is_fatal() {
        let err = read_corpus::<InstructionRecord>(Path::new("/nonexistent/x.jsonl"));
        assert!(matches!(err, Err(RecordsError::Io { .. })));
    }

    #[test]
    fn unwritable_destination_is_fatal() {
        let c = Corpus::new(vec![record("a")]);
        assert!(write_corpus(&c, Path::new("/nonexistent/dir/x.jsonl")).is_err());
    }

    #[test]
    fn duplicate_ids_and_invariant_violations_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let a = serde_json::to_string(&record("a")).unwrap();
        let bad_lang = a.replace("\"en\"", "\"fr\"");
        let empty_instr = r#"{"id":"z","lang":"ko","instruction":"  ","source":"s"}"#;
        std::fs::write(&path, format!("{a}\n{a}\n{bad_lang}\n{empty_instr}\n")).unwrap();
        let out = read_corpus::<InstructionRecord>(&path).unwrap();
        assert_eq!(out.corpus.len(), 1);
        assert_eq!(out.rejects.len(), 3);
    }

    #[test]
    fn sample_mode_reasoning_invariant() {
        let direct_with_reasoning =
            r#"{"record_id":"a","mode":"direct","reasoning":"r","answer":"x","meta":{}}"#;
        assert!(parse_row::<ReasoningSample>(direct_with_reasoning).is_err());
        let max_without = r#"{"record_id":"a","mode":"max","answer":"x","meta":{}}"#;
        assert!(parse_row::<ReasoningSample>(max_without).is_err());
        let ok = r#"{"record_id":"a","mode":"short","reasoning":"r","answer":"x","meta":{}}"#;
        assert!(parse_row::<ReasoningSample>(ok).is_ok());
    }

    #[test]
    fn optional_fields_are_omitted() {
        let line = serde_json::to_string(&InstructionRecord {
            gold_response: None,
            ..record("a")
        })
        .unwrap();
        assert_eq!(
            line,
            r#"{"id":"a","lang":"en","instruction":"question a","source":"test"}"#
        );
    }

    #[test]
    fn multiline_and_korean_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.jsonl");
        let rec = InstructionRecord {
            context: Some("line one\nline two\r\n\ttabbed".into()),
            instruction: "매맞는아이증후군에 관한 설명으로 옳은 것은?".into(),
            lang: Lang::Ko,
            ..record("k1")
        };
        let c = Corpus::new(vec![rec.clone()]).with_provenance(Provenance::now("test"));
        write_corpus(&c, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        let back = read_corpus::<InstructionRecord>(&path).unwrap().corpus;
        assert_eq!(back, c);
        assert_eq!(back.rows[0].instruction.as_bytes(), rec.instruction.as_bytes());
    }

    #[test]
    fn rejects_go_to_sibling_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o.jsonl");
        write_rejects(&out, &[]).unwrap();
        assert!(!rejects_path(&out).exists());
        let rj = RejectedRow {
            line: 3,
            error: "bad".into(),
            raw: "{".into(),
        };
        write_rejects(&out, std::slice::from_ref(&rj)).unwrap();
        let back: Vec<RejectedRow> = read_jsonl(&rejects_path(&out)).unwrap();
        assert_eq!(back, vec![rj]);
        assert_eq!(rejects_path(&out), dir.path().join("o.jsonl.rejects"));
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 가-힣é\n\t\"\\\\{}😀]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    fn arb_sample() -> impl Strategy<Value = ReasoningSample> {
        (
            "[a-z0-9]{1,8}",
            prop_oneof![
                Just(ReasoningMode::Direct),
                Just(ReasoningMode::Max),
                Just(ReasoningMode::Long),
                Just(ReasoningMode::Medium),
                Just(ReasoningMode::Short)
            ],
            arb_text(),
            arb_text(),
            proptest::collection::btree_map("[a-z_]{1,6}", arb_text(), 0..3),
        )
            .prop_map(|(id, mode, r, answer, meta)| ReasoningSample {
                record_id: id,
                mode,
                reasoning: (mode != ReasoningMode::Direct).then_some(r),
                answer,
                meta,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_stable_bytes(rows in proptest::collection::vec(arb_sample(), 0..8)) {
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.jsonl");
            let p2 = dir.path().join("b.jsonl");
            let c = Corpus::new(rows);
            write_corpus(&c, &p1).unwrap();
            write_corpus(&c, &p2).unwrap();
            prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
            let back = read_corpus::<ReasoningSample>(&p1).unwrap();
            prop_assert!(back.rejects.is_empty());
            prop_assert_eq!(back.corpus.rows, c.rows);
        }
    }
}
