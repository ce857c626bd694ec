//! Bug reports, comments and the JSON-lines corpus store.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textprep;

/// Subject-system grouping used for per-language evaluation aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum LanguageTag {
    Python,
    Java,
    JavaScript,
    #[serde(rename = "C++")]
    Cpp,
    #[default]
    #[serde(rename = "other")]
    Other,
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LanguageTag::Python => "Python",
            LanguageTag::Java => "Java",
            LanguageTag::JavaScript => "JavaScript",
            LanguageTag::Cpp => "C++",
            LanguageTag::Other => "other",
        })
    }
}

/// Candidate-answer slot within a corpus entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Ca1,
    Ca2,
    Ca3,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Ca1, Slot::Ca2, Slot::Ca3];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ca{}", self.index() + 1)
    }
}

impl std::str::FromStr for Slot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ca1" | "1" => Ok(Slot::Ca1),
            "ca2" | "2" => Ok(Slot::Ca2),
            "ca3" | "3" => Ok(Slot::Ca3),
            other => Err(format!("unknown answer slot {other:?}")),
        }
    }
}

/// One issue with its follow-up question and candidate answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugReport {
    pub id: String,
    pub repo: String,
    pub title: String,
    pub description: String,
    #[serde(rename = "question")]
    pub followup_question: Option<String>,
    pub ca1: Option<String>,
    pub ca2: Option<String>,
    pub ca3: Option<String>,
    #[serde(default)]
    pub labels: BTreeSet<String>,
    pub author: String,
    pub created_at: DateTime<Utc>,
    pub closed_at: Option<DateTime<Utc>>,
    #[serde(rename = "lang", default)]
    pub language_tag: LanguageTag,
}

impl BugReport {
    pub fn answer(&self, slot: Slot) -> Option<&str> {
        match slot {
            Slot::Ca1 => self.ca1.as_deref(),
            Slot::Ca2 => self.ca2.as_deref(),
            Slot::Ca3 => self.ca3.as_deref(),
        }
    }

    pub fn answer_mut(&mut self, slot: Slot) -> &mut Option<String> {
        match slot {
            Slot::Ca1 => &mut self.ca1,
            Slot::Ca2 => &mut self.ca2,
            Slot::Ca3 => &mut self.ca3,
        }
    }

    pub fn question(&self) -> &str {
        self.followup_question.as_deref().unwrap_or("")
    }
}

/// A comment on an issue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub comment_id: String,
    pub issue_id: String,
    pub author: String,
    pub body: String,
    pub time: DateTime<Utc>,
}

/// A held-out report paired with its accepted (gold) answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutItem {
    #[serde(flatten)]
    pub report: BugReport,
    #[serde(default)]
    pub gold: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptyTitle,
    TimeOrder,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::EmptyId => "empty id",
            Violation::EmptyTitle => "empty title",
            Violation::TimeOrder => "time order",
        })
    }
}

/// Outcome of [`validate_report`]: empty means the report is well formed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the per-report invariants without touching the report.
pub fn validate_report(report: &BugReport) -> ValidationResult {
    let mut violations = Vec::new();
    if report.id.trim().is_empty() {
        violations.push(Violation::EmptyId);
    }
    if textprep::clean(&report.title).is_empty() {
        violations.push(Violation::EmptyTitle);
    }
    if let Some(closed) = report.closed_at {
        if closed < report.created_at {
            violations.push(Violation::TimeOrder);
        }
    }
    ValidationResult { violations }
}

/// Why an otherwise parseable record is not a corpus entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exclusion {
    Invalid(Vec<Violation>),
    MissingQuestion,
    MissingAnswer(Slot),
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exclusion::Invalid(v) => {
                let parts: Vec<String> = v.iter().map(ToString::to_string).collect();
                write!(f, "invalid: {}", parts.join(", "))
            }
            Exclusion::MissingQuestion => f.write_str("missing follow-up question"),
            Exclusion::MissingAnswer(s) => write!(f, "missing candidate answer {s}"),
        }
    }
}

/// Returns why `report` cannot be a corpus entry, or `None` if it can.
pub fn corpus_exclusion(report: &BugReport) -> Option<Exclusion> {
    let v = validate_report(report);
    if !v.is_ok() {
        return Some(Exclusion::Invalid(v.violations));
    }
    if report.question().trim().is_empty() {
        return Some(Exclusion::MissingQuestion);
    }
    Slot::ALL
        .into_iter()
        .find(|&s| report.answer(s).is_none_or(|a| a.trim().is_empty()))
        .map(Exclusion::MissingAnswer)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate report id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("report {id:?} is not a valid corpus entry: {reason}")]
    NotAnEntry { id: String, reason: Exclusion },
}

/// Ordered, validated corpus: every entry has a question and three
/// non-empty candidate answers, and ids are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    entries: Vec<BugReport>,
}

impl Corpus {
    pub fn new(entries: Vec<BugReport>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if let Some(reason) = corpus_exclusion(e) {
                return Err(CorpusError::NotAnEntry { id: e.id.clone(), reason });
            }
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId { id: e.id.clone(), line: i + 1 });
            }
        }
        Ok(Corpus { entries })
    }

    pub fn entries(&self) -> &[BugReport] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BugReport> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Copy of the corpus without the entry `id`; used to keep a held-out
    /// report from retrieving its own answers.
    pub fn without(&self, id: &str) -> Corpus {
        Corpus { entries: self.entries.iter().filter(|e| e.id != id).cloned().collect() }
    }
}

/// A record skipped by [`load_corpus_with_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub line: usize,
    pub id: String,
    pub reason: Exclusion,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Reads one JSON value per non-blank line, returning `(line number, value)`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Writes one JSON value per line.
pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads report records without corpus-membership filtering. Duplicate ids
/// are an error.
pub fn read_reports(path: &Path) -> Result<Vec<BugReport>, CorpusError> {
    let rows: Vec<(usize, BugReport)> = read_jsonl(path)?;
    check_unique(rows.iter().map(|(l, r)| (*l, r.id.as_str())))?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Reads held-out items (report fields plus `gold`).
pub fn read_heldout(path: &Path) -> Result<Vec<HeldoutItem>, CorpusError> {
    let rows: Vec<(usize, HeldoutItem)> = read_jsonl(path)?;
    check_unique(rows.iter().map(|(l, r)| (*l, r.report.id.as_str())))?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn check_unique<'a>(ids: impl Iterator<Item = (usize, &'a str)>) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for (line, id) in ids {
        if !seen.insert(id) {
            return Err(CorpusError::DuplicateId { id: id.to_string(), line });
        }
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    write_jsonl(path, corpus.entries())
}

/// Loads a corpus, dropping (and reporting) records that are not valid
/// entries. Malformed JSON and duplicate ids are hard errors.
pub fn load_corpus_with_report(path: &Path) -> Result<(Corpus, Vec<Dropped>), CorpusError> {
    let rows: Vec<(usize, BugReport)> = read_jsonl(path)?;
    check_unique(rows.iter().map(|(l, r)| (*l, r.id.as_str())))?;
    let mut entries = Vec::with_capacity(rows.len());
    let mut dropped = Vec::new();
    for (line, report) in rows {
        match corpus_exclusion(&report) {
            None => entries.push(report),
            Some(reason) => dropped.push(Dropped { line, id: report.id, reason }),
        }
    }
    Ok((Corpus { entries }, dropped))
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let (corpus, dropped) = load_corpus_with_report(path)?;
    for d in &dropped {
        tracing::warn!(line = d.line, id = %d.id, reason = %d.reason, "dropped corpus record");
    }
    Ok(corpus)
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;

    fn sample() -> BugReport {
        entry("acme/widget#1", "App crashes", "It crashes on start", "Which version?", ["1.2", "v1.2.0", "latest"])
    }

    #[test]
    fn validate_examples() {
        assert!(validate_report(&sample()).is_ok());

        let mut r = sample();
        r.id = String::new();
        assert_eq!(validate_report(&r).violations, vec![Violation::EmptyId]);
        assert_eq!(Violation::EmptyId.to_string(), "empty id");

        let mut r = sample();
        r.closed_at = Some(ts(-5));
        assert_eq!(validate_report(&r).violations, vec![Violation::TimeOrder]);
        assert_eq!(Violation::TimeOrder.to_string(), "time order");

        let mut r = sample();
        r.title = "![x](http://a/b.png)".into();
        assert_eq!(validate_report(&r).violations, vec![Violation::EmptyTitle]);
    }

    #[test]
    fn json_shape() {
        let mut r = sample();
        r.ca3 = None;
        r.closed_at = None;
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let want: BTreeSet<&str> = [
            "id", "repo", "title", "description", "question", "ca1", "ca2", "ca3", "labels", "author",
            "created_at", "closed_at", "lang",
        ]
        .into_iter()
        .collect();
        assert_eq!(keys, want);
        assert!(v["ca3"].is_null());
        assert!(v["closed_at"].is_null());
        assert_eq!(v["lang"], "Python");
        assert_eq!(v["created_at"], "2020-09-13T12:26:40Z");
    }

    #[test]
    fn empty_corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        save_corpus(&Corpus::default(), &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
        assert!(load_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn three_entry_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = Corpus::new(vec![
            entry("a", "t1", "d1", "q1?", ["x", "y", "z"]),
            entry("b", "t2", "d2", "q2?", ["x", "y", "z"]),
            entry("c", "t3", "d3", "q3?", ["x", "y", "z"]),
        ])
        .unwrap();
        save_corpus(&c, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 3);
        assert_eq!(load_corpus(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let entries: Vec<BugReport> =
            (0..5).map(|i| entry(&format!("r{i}"), "t", "d", "q?", ["a", "b", "c"])).collect();
        let mut lines: Vec<String> =
            entries.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
        let half = lines[3].len() / 2;
        lines[3].truncate(half);
        std::fs::write(&p, lines.join("\n")).unwrap();
        match load_corpus(&p) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let e = entry("dup", "t", "d", "q?", ["a", "b", "c"]);
        write_jsonl(&p, [&e, &e]).unwrap();
        assert!(matches!(load_corpus(&p), Err(CorpusError::DuplicateId { line: 2, .. })));
        assert!(Corpus::new(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn incomplete_records_are_dropped_and_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let good = entry("g", "t", "d", "q?", ["a", "b", "c"]);
        let mut no_ca2 = entry("n", "t", "d", "q?", ["a", "b", "c"]);
        no_ca2.ca2 = None;
        let mut no_q = entry("q", "t", "d", "q?", ["a", "b", "c"]);
        no_q.followup_question = None;
        write_jsonl(&p, [&good, &no_ca2, &no_q]).unwrap();
        let (c, dropped) = load_corpus_with_report(&p).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(dropped.len(), 2);
        assert_eq!(dropped[0].reason, Exclusion::MissingAnswer(Slot::Ca2));
        assert_eq!(dropped[1].reason, Exclusion::MissingQuestion);
        assert_eq!(dropped[1].line, 3);
    }

    #[test]
    fn heldout_gold_field() {
        let line = serde_json::to_string(&HeldoutItem { report: sample(), gold: Some("1.2".into()) }).unwrap();
        assert!(line.contains("\"gold\":\"1.2\""));
        let back: HeldoutItem = serde_json::from_str(&line).unwrap();
        assert_eq!(back.report, sample());
    }

    fn arb_entry() -> impl Strategy<Value = BugReport> {
        (
            "[a-z]{1,8}",
            "[A-Za-z ]{0,20}[A-Za-z]",
            "\\PC{0,40}",
            "[a-z ?]{1,20}[a-z]",
            proptest::array::uniform3("[a-z]{1,10}"),
            0i64..1000,
            proptest::option::of(0i64..1000),
        )
            .prop_map(|(id, title, desc, q, ans, c, d)| {
                let mut e = entry(&id, &title, &desc, &q, [&ans[0], &ans[1], &ans[2]]);
                e.created_at = ts(c);
                e.closed_at = d.map(|d| ts(c + d));
                e
            })
    }

    proptest! {
        #[test]
        fn save_load_roundtrip(entries in proptest::collection::vec(arb_entry(), 0..8)) {
            let mut seen = HashSet::new();
            let entries: Vec<BugReport> =
                entries.into_iter().filter(|e| seen.insert(e.id.clone())).collect();
            let c = Corpus::new(entries).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.jsonl");
            save_corpus(&c, &p).unwrap();
            prop_assert_eq!(load_corpus(&p).unwrap(), c);
        }

        #[test]
        fn validate_is_pure(e in arb_entry()) {
            let before = e.clone();
            let a = validate_report(&e);
            let b = validate_report(&e);
            prop_assert_eq!(a, b);
            prop_assert_eq!(e, before);
        }
    }
}
