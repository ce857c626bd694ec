//! Mining corpus entries from issue threads: follow-up question detection,
//! candidate-answer selection, quality filters and vote aggregation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BugReport, Comment, HeldoutItem, Slot};
use crate::exec::Exec;
use crate::retrieval::Scorer;
use crate::textprep::{contains_media, contains_stack_trace, fenced_block_line_counts, tokenize, Analyzer};

pub const INTERROGATIVES: [&str; 15] = [
    "what", "why", "how", "when", "where", "which", "who", "can", "could", "would", "do", "does", "did", "is", "are",
];
pub const REQUEST_PHRASES: [&str; 4] = ["please", "can you", "could you", "would you"];
pub const MAX_CODE_LINES: usize = 10;

#[derive(Debug, Error)]
pub enum MineError {
    #[error("expected exactly 3 votes, got {0}")]
    VoteCount(usize),
    #[error("votes file {path}: {message}")]
    Votes { path: String, message: String },
}

/// Question-detection heuristics. The default is the fixed word lists above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub interrogatives: Vec<String>,
    pub request_phrases: Vec<String>,
    /// Also accept any comment ending in '?', whatever its first word.
    #[serde(default)]
    pub accept_bare_question_mark: bool,
    pub max_code_lines: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            interrogatives: INTERROGATIVES.iter().map(|s| s.to_string()).collect(),
            request_phrases: REQUEST_PHRASES.iter().map(|s| s.to_string()).collect(),
            accept_bare_question_mark: false,
            max_code_lines: MAX_CODE_LINES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PickReason {
    InterrogativeStart,
    QuestionMark,
    RequestPhrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionPick {
    pub comment_id: String,
    pub asker: String,
    pub text: String,
    pub reason: PickReason,
}

/// First word of a comment, ignoring leading `@mentions`, lowercased and cut
/// at the first non-letter ("What's" gives "what").
fn first_word(text: &str) -> Option<String> {
    let w = text.split_whitespace().find(|w| !w.starts_with('@'))?;
    let w: String = w.chars().take_while(|c| c.is_alphabetic()).collect();
    (!w.is_empty()).then(|| w.to_lowercase())
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Why `text` qualifies as a follow-up question, if it does.
pub fn question_reason(text: &str, cfg: &MinerConfig) -> Option<PickReason> {
    let ends_q = text.trim_end().ends_with('?');
    if ends_q {
        if let Some(w) = first_word(text) {
            if cfg.interrogatives.contains(&w) {
                return Some(PickReason::InterrogativeStart);
            }
        }
    }
    let tokens = tokenize(text).into_tokens();
    if cfg.request_phrases.iter().any(|p| contains_phrase(&tokens, &tokenize(p).into_tokens())) {
        return Some(PickReason::RequestPhrase);
    }
    if ends_q && cfg.accept_bare_question_mark {
        return Some(PickReason::QuestionMark);
    }
    None
}

/// Earliest comment not written by `reporter` that qualifies as a follow-up
/// question. `comments` must be time-sorted.
pub fn detect_followup_question(comments: &[Comment], reporter: &str, cfg: &MinerConfig) -> Option<QuestionPick> {
    comments.iter().filter(|c| c.author != reporter).find_map(|c| {
        question_reason(&c.body, cfg).map(|reason| QuestionPick {
            comment_id: c.comment_id.clone(),
            asker: c.author.clone(),
            text: c.body.clone(),
            reason,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub comment_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateTriple {
    pub ca1: Option<CandidateAnswer>,
    pub ca2: Option<CandidateAnswer>,
    pub ca3: Option<CandidateAnswer>,
}

impl CandidateTriple {
    pub fn get(&self, slot: Slot) -> Option<&CandidateAnswer> {
        match slot {
            Slot::Ca1 => self.ca1.as_ref(),
            Slot::Ca2 => self.ca2.as_ref(),
            Slot::Ca3 => self.ca3.as_ref(),
        }
    }
}

fn as_candidate(c: &Comment) -> CandidateAnswer {
    CandidateAnswer { comment_id: c.comment_id.clone(), text: c.body.clone() }
}

/// BM25 score of `query` against each document, with document statistics
/// taken over `docs` alone. Query terms are counted once.
pub fn bm25_scores(query: &[String], docs: &[Vec<String>], scorer: Scorer) -> Vec<f64> {
    let n = docs.len() as f64;
    if docs.is_empty() {
        return Vec::new();
    }
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let tfs: Vec<HashMap<&str, usize>> = docs
        .iter()
        .map(|d| {
            let mut m = HashMap::new();
            for t in d {
                *m.entry(t.as_str()).or_insert(0) += 1;
            }
            m
        })
        .collect();
    let mut terms: Vec<&str> = Vec::new();
    for q in query {
        if !terms.contains(&q.as_str()) {
            terms.push(q);
        }
    }
    let df: Vec<f64> = terms.iter().map(|t| tfs.iter().filter(|m| m.contains_key(t)).count() as f64).collect();
    tfs.iter()
        .zip(docs)
        .map(|(m, d)| {
            terms
                .iter()
                .zip(&df)
                .filter_map(|(t, &df)| m.get(t).map(|&tf| scorer.term_score(tf as f64, df, n, d.len() as f64, avg)))
                .sum()
        })
        .collect()
}

/// Picks the three candidate answers for `question`:
/// ca1 is the first later comment not by the asker, ca2 the first later
/// comment by the reporter, and ca3 the comment (other than the question)
/// most BM25-similar to the question. "Later" means a strictly greater
/// timestamp.
pub fn select_candidate_answers(comments: &[Comment], question: &QuestionPick, reporter: &str) -> CandidateTriple {
    let analyzer = Analyzer::default();
    let Some(q) = comments.iter().find(|c| c.comment_id == question.comment_id) else {
        return CandidateTriple::default();
    };
    let after = || comments.iter().filter(|c| c.time > q.time && c.comment_id != q.comment_id);
    let ca1 = after().find(|c| c.author != question.asker).map(as_candidate);
    let ca2 = after().find(|c| c.author == reporter).map(as_candidate);

    let pool: Vec<&Comment> = comments.iter().filter(|c| c.comment_id != q.comment_id).collect();
    let docs: Vec<Vec<String>> = pool.iter().map(|c| analyzer.analyze(&c.body)).collect();
    let scores = bm25_scores(&analyzer.analyze(&question.text), &docs, Scorer::default());
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 && !matches!(best, Some((_, b)) if b >= s) {
            best = Some((i, s));
        }
    }
    let ca3 = best.map(|(i, _)| as_candidate(pool[i]));
    CandidateTriple { ca1, ca2, ca3 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    StackTrace,
    CodeTooLong,
    ImageOrVideo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReason {
    pub kind: FilterKind,
    /// "question", "ca1", "ca2" or "ca3".
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub reasons: Vec<FilterReason>,
}

impl FilterVerdict {
    pub fn keep(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Flags stack traces, fenced code blocks longer than `max_code_lines`, and
/// image or video markup in the question and answers. Runs on raw text,
/// since cleaning strips exactly these constructs.
pub fn apply_quality_filters(entry: &BugReport, max_code_lines: usize) -> FilterVerdict {
    let mut fields: Vec<(String, &str)> = Vec::new();
    if let Some(q) = entry.followup_question.as_deref() {
        fields.push(("question".into(), q));
    }
    for s in Slot::ALL {
        if let Some(a) = entry.answer(s) {
            fields.push((s.to_string(), a));
        }
    }
    let mut reasons = Vec::new();
    for (field, text) in fields {
        if contains_stack_trace(text) {
            reasons.push(FilterReason { kind: FilterKind::StackTrace, field: field.clone() });
        }
        if fenced_block_line_counts(text).into_iter().any(|n| n > max_code_lines) {
            reasons.push(FilterReason { kind: FilterKind::CodeTooLong, field: field.clone() });
        }
        if contains_media(text) {
            reasons.push(FilterReason { kind: FilterKind::ImageOrVideo, field });
        }
    }
    FilterVerdict { reasons }
}

/// Why an issue produced no corpus entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "skip", rename_all = "kebab-case")]
pub enum Skip {
    NoQuestion,
    MissingAnswer { slot: Slot },
    Filtered { reasons: Vec<FilterReason> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mined {
    pub entry: BugReport,
    pub question: QuestionPick,
    pub candidates: CandidateTriple,
}

/// Runs the full rule chain on one issue and its time-sorted comments.
pub fn mine_issue(issue: &BugReport, comments: &[Comment], cfg: &MinerConfig) -> Result<Mined, Skip> {
    let question = detect_followup_question(comments, &issue.author, cfg).ok_or(Skip::NoQuestion)?;
    let candidates = select_candidate_answers(comments, &question, &issue.author);
    let mut entry = issue.clone();
    entry.followup_question = Some(question.text.clone());
    for slot in Slot::ALL {
        let c = candidates.get(slot).ok_or(Skip::MissingAnswer { slot })?;
        *entry.answer_mut(slot) = Some(c.text.clone());
    }
    let verdict = apply_quality_filters(&entry, cfg.max_code_lines);
    if !verdict.keep() {
        return Err(Skip::Filtered { reasons: verdict.reasons });
    }
    Ok(Mined { entry, question, candidates })
}

/// Mines every issue independently under `exec`; output is in input order.
pub fn mine_all(
    issues: &[(BugReport, Vec<Comment>)],
    cfg: &MinerConfig,
    exec: Exec,
) -> Vec<(String, Result<Mined, Skip>)> {
    exec.map(issues, |(issue, comments)| (issue.id.clone(), mine_issue(issue, comments, cfg)))
}

/// Exactly three annotator choices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteSet([Slot; 3]);

impl VoteSet {
    pub fn new(votes: &[Slot]) -> Result<Self, MineError> {
        match *votes {
            [a, b, c] => Ok(VoteSet([a, b, c])),
            _ => Err(MineError::VoteCount(votes.len())),
        }
    }

    pub fn votes(&self) -> [Slot; 3] {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteOutcome {
    Accepted(Slot),
    NeedsDiscussion,
}

/// Majority of three; all-distinct votes need discussion.
pub fn aggregate_votes(votes: &VoteSet) -> VoteOutcome {
    let [a, b, c] = votes.0;
    if a == b || a == c {
        VoteOutcome::Accepted(a)
    } else if b == c {
        VoteOutcome::Accepted(b)
    } else {
        VoteOutcome::NeedsDiscussion
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct VoteRecord {
    pub issue_id: String,
    pub annotator: String,
    pub choice: Slot,
}

/// Reads `issue_id,annotator,choice` rows (with header), grouped by issue in
/// file order.
pub fn read_votes(path: &Path) -> Result<BTreeMap<String, Vec<VoteRecord>>, MineError> {
    let err = |message: String| MineError::Votes { path: path.display().to_string(), message };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out: BTreeMap<String, Vec<VoteRecord>> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<VoteRecord>().enumerate() {
        let rec = rec.map_err(|e| err(format!("row {}: {e}", i + 2)))?;
        out.entry(rec.issue_id.clone()).or_default().push(rec);
    }
    Ok(out)
}

/// Outcome of resolving votes for mined entries.
#[derive(Debug, Default)]
pub struct GoldResolution {
    pub heldout: Vec<HeldoutItem>,
    pub needs_discussion: Vec<String>,
    pub unvoted: Vec<String>,
}

/// Attaches the majority-accepted answer of each voted entry as its gold.
pub fn resolve_gold(
    entries: &[BugReport],
    votes: &BTreeMap<String, Vec<VoteRecord>>,
) -> Result<GoldResolution, MineError> {
    let mut res = GoldResolution::default();
    for e in entries {
        let Some(records) = votes.get(&e.id) else {
            res.unvoted.push(e.id.clone());
            continue;
        };
        let set = VoteSet::new(&records.iter().map(|r| r.choice).collect::<Vec<_>>())?;
        match aggregate_votes(&set) {
            VoteOutcome::Accepted(slot) => res.heldout.push(HeldoutItem {
                report: e.clone(),
                gold: e.answer(slot).map(str::to_string),
            }),
            VoteOutcome::NeedsDiscussion => res.needs_discussion.push(e.id.clone()),
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::testutil::{entry, ts};
    use proptest::prelude::*;

    fn c(id: &str, author: &str, t: i64, body: &str) -> Comment {
        Comment { comment_id: id.into(), issue_id: "acme/widget#1".into(), author: author.into(), body: body.into(), time: ts(t) }
    }

    fn cfg() -> MinerConfig {
        MinerConfig::default()
    }

    #[test]
    fn question_examples() {
        let cs = [c("1", "dev", 1, "Thanks!"), c("2", "dev", 2, "What OS are you using?")];
        let p = detect_followup_question(&cs, "rep", &cfg()).unwrap();
        assert_eq!((p.comment_id.as_str(), p.reason), ("2", PickReason::InterrogativeStart));

        let cs = [c("1", "dev", 1, "Can you share the version, please")];
        assert_eq!(detect_followup_question(&cs, "rep", &cfg()).unwrap().reason, PickReason::RequestPhrase);

        let cs = [c("1", "rep", 1, "Why does this happen?")];
        assert!(detect_followup_question(&cs, "rep", &cfg()).is_none());
    }

    #[test]
    fn question_edge_cases() {
        assert_eq!(question_reason("@rep which version?", &cfg()), Some(PickReason::InterrogativeStart));
        assert_eq!(question_reason("What's the version?", &cfg()), Some(PickReason::InterrogativeStart));
        assert_eq!(question_reason("Version?", &cfg()), None);
        assert_eq!(question_reason("what version", &cfg()), None);
        assert_eq!(question_reason("displeased", &cfg()), None);
        let loose = MinerConfig { accept_bare_question_mark: true, ..cfg() };
        assert_eq!(question_reason("Version?", &loose), Some(PickReason::QuestionMark));
    }

    fn pick(cs: &[Comment], id: &str) -> QuestionPick {
        let q = cs.iter().find(|x| x.comment_id == id).unwrap();
        QuestionPick { comment_id: id.into(), asker: q.author.clone(), text: q.body.clone(), reason: PickReason::InterrogativeStart }
    }

    #[test]
    fn answer_rules() {
        let cs = [c("q", "dev", 1, "What OS?"), c("a", "rep", 2, "Linux"), c("b", "dev", 3, "ok")];
        let t = select_candidate_answers(&cs, &pick(&cs, "q"), "rep");
        assert_eq!(t.ca1.unwrap().comment_id, "a");
        assert_eq!(t.ca2.unwrap().comment_id, "a");

        let cs = [c("q", "dev", 1, "What OS?"), c("a", "dev", 2, "anyone?")];
        let t = select_candidate_answers(&cs, &pick(&cs, "q"), "rep");
        assert!(t.ca1.is_none() && t.ca2.is_none());
    }

    #[test]
    fn ca3_prefers_rare_shared_terms() {
        let cs = [
            c("0", "rep", 0, "the app fails on the server"),
            c("q", "dev", 1, "Which kubernetes version runs the server?"),
            c("a", "other", 2, "the server is fine"),
            c("b", "rep", 3, "kubernetes 1.21 on the server"),
            c("d", "dev", 4, "thanks"),
        ];
        let t = select_candidate_answers(&cs, &pick(&cs, "q"), "rep");
        assert_eq!(t.ca3.unwrap().comment_id, "b");
    }

    #[test]
    fn ca3_absent_without_overlap() {
        let cs = [c("q", "dev", 1, "Which kubernetes version?"), c("a", "rep", 2, "thanks")];
        assert!(select_candidate_answers(&cs, &pick(&cs, "q"), "rep").ca3.is_none());
    }

    #[test]
    fn filters() {
        let mut e = entry("1", "t", "d", "What version?", ["plain answer. It works. Thanks.", "b", "c"]);
        assert!(apply_quality_filters(&e, MAX_CODE_LINES).keep());

        let code = format!("```\n{}```", "x = 1\n".repeat(12));
        e.ca2 = Some(code);
        let v = apply_quality_filters(&e, MAX_CODE_LINES);
        assert_eq!(v.reasons, vec![FilterReason { kind: FilterKind::CodeTooLong, field: "ca2".into() }]);

        e.ca2 = Some("b".into());
        e.ca3 = Some("see ![screenshot](shot.png)".into());
        assert_eq!(apply_quality_filters(&e, MAX_CODE_LINES).reasons[0].kind, FilterKind::ImageOrVideo);

        e.ca3 = Some("c".into());
        e.followup_question = Some("What now?\nTraceback (most recent call last):\n  File \"a.py\", line 1".into());
        assert_eq!(apply_quality_filters(&e, MAX_CODE_LINES).reasons[0].kind, FilterKind::StackTrace);
    }

    #[test]
    fn votes() {
        let v = |s: &[Slot]| aggregate_votes(&VoteSet::new(s).unwrap());
        assert_eq!(v(&[Slot::Ca1, Slot::Ca1, Slot::Ca1]), VoteOutcome::Accepted(Slot::Ca1));
        assert_eq!(v(&[Slot::Ca2, Slot::Ca2, Slot::Ca3]), VoteOutcome::Accepted(Slot::Ca2));
        assert_eq!(v(&[Slot::Ca1, Slot::Ca2, Slot::Ca3]), VoteOutcome::NeedsDiscussion);
        assert!(matches!(VoteSet::new(&[Slot::Ca1]), Err(MineError::VoteCount(1))));
    }

    #[test]
    fn votes_csv_and_gold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("votes.csv");
        std::fs::write(&p, "issue_id,annotator,choice\n1,a,ca2\n1,b,ca2\n1,c,ca1\n2,a,ca1\n2,b,ca2\n2,c,ca3\n").unwrap();
        let votes = read_votes(&p).unwrap();
        let es = [entry("1", "t", "d", "q?", ["x", "y", "z"]), entry("2", "t", "d", "q?", ["x", "y", "z"]), entry("3", "t", "d", "q?", ["x", "y", "z"])];
        let r = resolve_gold(&es, &votes).unwrap();
        assert_eq!(r.heldout.len(), 1);
        assert_eq!(r.heldout[0].gold.as_deref(), Some("y"));
        assert_eq!(r.needs_discussion, ["2"]);
        assert_eq!(r.unvoted, ["3"]);

        std::fs::write(&p, "issue_id,annotator,choice\n1,a,ca9\n").unwrap();
        assert!(read_votes(&p).is_err());
    }

    #[test]
    fn mine_issue_chain() {
        let issue = entry("acme/widget#1", "crash on start", "it crashes", "", ["", "", ""]);
        let mut issue = issue;
        issue.followup_question = None;
        issue.ca1 = None;
        issue.ca2 = None;
        issue.ca3 = None;
        issue.author = "rep".into();
        let cs = [c("q", "dev", 1, "Which version crashes?"), c("a", "rep", 2, "version 2 crashes")];
        let m = mine_issue(&issue, &cs, &cfg()).unwrap();
        assert_eq!(m.entry.followup_question.as_deref(), Some("Which version crashes?"));
        assert_eq!(m.entry.ca1.as_deref(), Some("version 2 crashes"));
        assert_eq!(m.entry.ca3.as_deref(), Some("version 2 crashes"));
        assert_eq!(mine_issue(&issue, &cs[1..], &cfg()).unwrap_err(), Skip::NoQuestion);
    }

    fn slot() -> impl Strategy<Value = Slot> {
        prop_oneof![Just(Slot::Ca1), Just(Slot::Ca2), Just(Slot::Ca3)]
    }

    fn stream() -> impl Strategy<Value = Vec<Comment>> {
        let body = prop_oneof![
            Just("What version?"),
            Just("thanks"),
            Just("please send logs"),
            Just("version 3 on linux"),
            Just("Is it fixed?"),
            Just("works now"),
        ];
        proptest::collection::vec((0usize..3, 0i64..4, body), 0..10).prop_map(|v| {
            let mut t = 0;
            v.into_iter()
                .enumerate()
                .map(|(i, (who, dt, b))| {
                    t += dt;
                    c(&i.to_string(), ["rep", "dev", "other"][who], t, b)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn votes_symmetric(a in slot(), b in slot(), x in slot()) {
            let base = aggregate_votes(&VoteSet::new(&[a, b, x]).unwrap());
            for p in [[a, x, b], [b, a, x], [b, x, a], [x, a, b], [x, b, a]] {
                prop_assert_eq!(aggregate_votes(&VoteSet::new(&p).unwrap()), base);
            }
        }

        #[test]
        fn question_is_earliest_qualifying(cs in stream()) {
            let got = detect_followup_question(&cs, "rep", &cfg());
            let scan = cs.iter().position(|x| x.author != "rep" && question_reason(&x.body, &cfg()).is_some());
            prop_assert_eq!(got.map(|p| p.comment_id), scan.map(|i| cs[i].comment_id.clone()));
        }

        #[test]
        fn question_never_an_answer(cs in stream()) {
            if let Some(q) = detect_followup_question(&cs, "rep", &cfg()) {
                let t = select_candidate_answers(&cs, &q, "rep");
                for s in Slot::ALL {
                    if let Some(a) = t.get(s) {
                        prop_assert_ne!(&a.comment_id, &q.comment_id);
                    }
                }
            }
        }
    }
}
