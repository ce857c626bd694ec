//! Fielded inverted index and component-wise relevance scoring.
//!
//! Each corpus entry is indexed as eight fields: title, description,
//! follow-up question, title+description, title+description+question and the
//! three candidate answers. An incoming report is split into the same five
//! report components ([`QueryBundle`]), and every candidate answer is scored
//! by summing field scores over all (query component, entry component)
//! pairs plus the answer's own field score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BugReport, Corpus, Slot};
use crate::exec::Exec;
use crate::textprep::Analyzer;

pub const FIELD_COUNT: usize = 8;
pub const COMPONENT_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Title,
    Description,
    Question,
    TitleDesc,
    TitleDescQuestion,
    Ca1,
    Ca2,
    Ca3,
}

impl Field {
    pub const ALL: [Field; FIELD_COUNT] = [
        Field::Title,
        Field::Description,
        Field::Question,
        Field::TitleDesc,
        Field::TitleDescQuestion,
        Field::Ca1,
        Field::Ca2,
        Field::Ca3,
    ];

    /// The five report components, in the order the aggregation visits them.
    pub const COMPONENTS: [Field; COMPONENT_COUNT] = [
        Field::Title,
        Field::Description,
        Field::Question,
        Field::TitleDesc,
        Field::TitleDescQuestion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn answer(slot: Slot) -> Field {
        match slot {
            Slot::Ca1 => Field::Ca1,
            Slot::Ca2 => Field::Ca2,
            Slot::Ca3 => Field::Ca3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::Title => "t",
            Field::Description => "d",
            Field::Question => "q",
            Field::TitleDesc => "t+d",
            Field::TitleDescQuestion => "t+d+q",
            Field::Ca1 => "ca1",
            Field::Ca2 => "ca2",
            Field::Ca3 => "ca3",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = RetrievalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| RetrievalError::UnknownField(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("duplicate entry id {0:?}")]
    DuplicateId(String),
    #[error("entry index {index} out of range for index of {len} entries")]
    EntryOutOfRange { index: usize, len: usize },
    #[error("N must be at least 1")]
    InvalidN,
    #[error("index does not match corpus: {0}")]
    Mismatch(String),
    #[error("index snapshot {path}: {message}")]
    Snapshot { path: String, message: String },
}

/// Term-weighting function used for every field score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scorer {
    /// Okapi BM25 with a Lucene-style IDF, `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    Bm25 { k1: f64, b: f64 },
    /// Lucene classic similarity: `sqrt(tf) * idf^2 / sqrt(len)` with
    /// `idf = 1 + ln((N + 1) / (df + 1))`.
    TfIdf,
}

impl Default for Scorer {
    fn default() -> Self {
        Scorer::Bm25 { k1: 1.2, b: 0.75 }
    }
}

impl Scorer {
    /// Contribution of one query term occurring `tf` times in a field of
    /// length `len`, given `df` of `n` documents contain it.
    pub fn term_score(&self, tf: f64, df: f64, n: f64, len: f64, avg_len: f64) -> f64 {
        match *self {
            Scorer::Bm25 { k1, b } => {
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let norm = if avg_len > 0.0 { len / avg_len } else { 0.0 };
                idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm))
            }
            Scorer::TfIdf => {
                let idf = 1.0 + ((n + 1.0) / (df + 1.0)).ln();
                tf.sqrt() * idf * idf / len.sqrt()
            }
        }
    }
}

/// How field scores are combined into a per-answer relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// The literal double loop: for every query component `i` and entry
    /// component `j`, add `score(B[i], C[j]) + score(B[i], ca)`. The answer
    /// term therefore counts five times per query component.
    #[default]
    DoubleLoop,
    /// Shared 5x5 part plus the answer term once per query component.
    Normalized,
    /// Alternative sum over 2-combinations of the components
    /// (t, d, t+d, t+d+q) plus the answer term for each. Unvalidated.
    PairCombinations,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct FieldDoc {
    tf: HashMap<u32, u32>,
    len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub entry: u32,
    pub field: u8,
    pub tf: u32,
}

/// Token streams for the five components of a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryBundle {
    components: [Vec<String>; COMPONENT_COUNT],
}

impl QueryBundle {
    pub fn from_parts(title: Vec<String>, description: Vec<String>, question: Vec<String>) -> Self {
        let td: Vec<String> = title.iter().chain(&description).cloned().collect();
        let tdq: Vec<String> = td.iter().chain(&question).cloned().collect();
        QueryBundle { components: [title, description, question, td, tdq] }
    }

    pub fn from_report(report: &BugReport, analyzer: &Analyzer) -> Self {
        QueryBundle::from_parts(
            analyzer.analyze(&report.title),
            analyzer.analyze(&report.description),
            analyzer.analyze(report.question()),
        )
    }

    pub fn components(&self) -> &[Vec<String>; COMPONENT_COUNT] {
        &self.components
    }

    pub fn component(&self, f: Field) -> Option<&[String]> {
        Field::COMPONENTS.iter().position(|&c| c == f).map(|i| self.components[i].as_slice())
    }
}

/// Relevance scores for the three answers of one entry.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RelevanceResult {
    pub scores: [f64; 3],
}

impl RelevanceResult {
    pub fn get(&self, slot: Slot) -> f64 {
        self.scores[slot.index()]
    }
}

/// A candidate answer as it moves through ranking and re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub text: String,
    pub entry_id: String,
    pub slot: Slot,
    pub relevance_score: f64,
    /// 1-based position in the relevance ranking.
    pub relevance_rank: usize,
    pub embed_sim: Option<f64>,
    pub doi: Option<f64>,
}

/// Query terms resolved against the vocabulary, deduplicated in first-seen
/// order.
#[derive(Debug, Clone, Default)]
struct PreparedQuery {
    terms: Vec<u32>,
}

/// Inverted index over the eight fields of every corpus entry.
#[derive(Debug, Clone)]
pub struct FieldedIndex {
    analyzer: Analyzer,
    scorer: Scorer,
    ids: Vec<String>,
    vocab: HashMap<String, u32>,
    terms: Vec<String>,
    docs: Vec<[FieldDoc; FIELD_COUNT]>,
    postings: Vec<Vec<Posting>>,
    df: Vec<[u32; FIELD_COUNT]>,
    total_len: [u64; FIELD_COUNT],
}

fn entry_fields(report: &BugReport, analyzer: &Analyzer) -> [Vec<String>; FIELD_COUNT] {
    let q = QueryBundle::from_report(report, analyzer);
    let [t, d, q, td, tdq] = q.components;
    let ans = |s: Slot| report.answer(s).map(|a| analyzer.analyze(a)).unwrap_or_default();
    [t, d, q, td, tdq, ans(Slot::Ca1), ans(Slot::Ca2), ans(Slot::Ca3)]
}

impl FieldedIndex {
    fn empty(analyzer: Analyzer, scorer: Scorer) -> Self {
        FieldedIndex {
            analyzer,
            scorer,
            ids: Vec::new(),
            vocab: HashMap::new(),
            terms: Vec::new(),
            docs: Vec::new(),
            postings: Vec::new(),
            df: Vec::new(),
            total_len: [0; FIELD_COUNT],
        }
    }

    fn term_id(&mut self, term: &str) -> u32 {
        if let Some(&id) = self.vocab.get(term) {
            return id;
        }
        let id = self.terms.len() as u32;
        self.vocab.insert(term.to_string(), id);
        self.terms.push(term.to_string());
        self.postings.push(Vec::new());
        self.df.push([0; FIELD_COUNT]);
        id
    }

    fn push_entry(&mut self, id: &str, fields: [Vec<String>; FIELD_COUNT]) {
        let entry = self.ids.len() as u32;
        self.ids.push(id.to_string());
        let mut docs: [FieldDoc; FIELD_COUNT] = Default::default();
        for (fi, tokens) in fields.iter().enumerate() {
            let doc = &mut docs[fi];
            doc.len = tokens.len() as u32;
            self.total_len[fi] += tokens.len() as u64;
            let mut order = Vec::new();
            for tok in tokens {
                let tid = self.term_id(tok);
                let tf = doc.tf.entry(tid).or_insert(0);
                if *tf == 0 {
                    order.push(tid);
                }
                *tf += 1;
            }
            for tid in order {
                self.df[tid as usize][fi] += 1;
                self.postings[tid as usize].push(Posting { entry, field: fi as u8, tf: doc.tf[&tid] });
            }
        }
        self.docs.push(docs);
    }

    /// Indexes `entries` in order. Duplicate ids are rejected.
    pub fn build(entries: &[BugReport], analyzer: Analyzer, scorer: Scorer) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for e in entries {
            if !seen.insert(e.id.as_str()) {
                return Err(RetrievalError::DuplicateId(e.id.clone()));
            }
        }
        let mut idx = FieldedIndex::empty(analyzer, scorer);
        for e in entries {
            let fields = entry_fields(e, &analyzer);
            idx.push_entry(&e.id, fields);
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn analyzer(&self) -> &Analyzer {
        &self.analyzer
    }

    pub fn scorer(&self) -> Scorer {
        self.scorer
    }

    pub fn with_scorer(mut self, scorer: Scorer) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn posting_count(&self) -> usize {
        self.postings.iter().map(Vec::len).sum()
    }

    /// Postings for `term`, or an empty slice if it is not indexed.
    pub fn postings(&self, term: &str) -> &[Posting] {
        self.vocab.get(term).map(|&id| self.postings[id as usize].as_slice()).unwrap_or(&[])
    }

    pub fn field_len(&self, entry: usize, field: Field) -> Option<u32> {
        self.docs.get(entry).map(|d| d[field.index()].len)
    }

    pub fn avg_field_len(&self, field: Field) -> f64 {
        if self.ids.is_empty() {
            0.0
        } else {
            self.total_len[field.index()] as f64 / self.ids.len() as f64
        }
    }

    pub fn doc_freq(&self, term: &str, field: Field) -> u32 {
        self.vocab.get(term).map(|&id| self.df[id as usize][field.index()]).unwrap_or(0)
    }

    fn prepare(&self, query: &[String]) -> PreparedQuery {
        let mut seen = HashSet::new();
        let terms = query
            .iter()
            .filter(|t| seen.insert(t.as_str()))
            .filter_map(|t| self.vocab.get(t.as_str()).copied())
            .collect();
        PreparedQuery { terms }
    }

    fn score_prepared(&self, q: &PreparedQuery, entry: usize, field: Field) -> f64 {
        let fi = field.index();
        let doc = &self.docs[entry][fi];
        let n = self.ids.len() as f64;
        let avg = self.avg_field_len(field);
        let mut score = 0.0;
        for tid in &q.terms {
            let Some(&tf) = doc.tf.get(tid) else { continue };
            let df = self.df[*tid as usize][fi] as f64;
            score += self.scorer.term_score(tf as f64, df, n, doc.len as f64, avg);
        }
        score
    }

    /// Field score of `query` (analyzed tokens) against one field of one
    /// entry. Each distinct query term contributes once; terms absent from
    /// the field contribute nothing.
    pub fn lucene_score(&self, query: &[String], entry: usize, field: Field) -> Result<f64, RetrievalError> {
        if entry >= self.len() {
            return Err(RetrievalError::EntryOutOfRange { index: entry, len: self.len() });
        }
        Ok(self.score_prepared(&self.prepare(query), entry, field))
    }

    /// Like [`FieldedIndex::lucene_score`] with the field given by name.
    pub fn lucene_score_named(&self, query: &[String], entry: usize, field: &str) -> Result<f64, RetrievalError> {
        self.lucene_score(query, entry, field.parse()?)
    }

    fn relevance_prepared(&self, qs: &[PreparedQuery; COMPONENT_COUNT], entry: usize, agg: Aggregation) -> RelevanceResult {
        let s = |i: usize, f: Field| self.score_prepared(&qs[i], entry, f);
        let answers = [Field::Ca1, Field::Ca2, Field::Ca3];
        let mut out = [0.0f64; 3];
        match agg {
            Aggregation::DoubleLoop => {
                for i in 0..COMPONENT_COUNT {
                    let per_answer = answers.map(|a| s(i, a));
                    for j in 0..COMPONENT_COUNT {
                        let common = s(i, Field::COMPONENTS[j]);
                        for k in 0..3 {
                            out[k] = out[k] + common + per_answer[k];
                        }
                    }
                }
            }
            Aggregation::Normalized => {
                let mut common = 0.0;
                for i in 0..COMPONENT_COUNT {
                    for j in 0..COMPONENT_COUNT {
                        common += s(i, Field::COMPONENTS[j]);
                    }
                }
                for k in 0..3 {
                    out[k] = common + (0..COMPONENT_COUNT).map(|i| s(i, answers[k])).sum::<f64>();
                }
            }
            Aggregation::PairCombinations => {
                // component positions of t, d, t+d, t+d+q
                let set = [0usize, 1, 3, 4];
                let mut common = 0.0;
                for a in 0..set.len() {
                    for b in a + 1..set.len() {
                        common += s(set[a], Field::COMPONENTS[set[b]]);
                        common += s(set[b], Field::COMPONENTS[set[a]]);
                    }
                }
                for k in 0..3 {
                    out[k] = common + set.iter().map(|&i| s(i, answers[k])).sum::<f64>();
                }
            }
        }
        RelevanceResult { scores: out }
    }

    fn prepare_bundle(&self, bundle: &QueryBundle) -> [PreparedQuery; COMPONENT_COUNT] {
        bundle.components.each_ref().map(|c| self.prepare(c))
    }

    /// Relevance of the three answers of `entry` to `bundle`.
    pub fn relevance_scores(
        &self,
        bundle: &QueryBundle,
        entry: usize,
        agg: Aggregation,
    ) -> Result<RelevanceResult, RetrievalError> {
        if entry >= self.len() {
            return Err(RetrievalError::EntryOutOfRange { index: entry, len: self.len() });
        }
        Ok(self.relevance_prepared(&self.prepare_bundle(bundle), entry, agg))
    }

    /// Relevance results for every entry, in index order.
    pub fn relevance_all(&self, bundle: &QueryBundle, agg: Aggregation, exec: Exec) -> Vec<RelevanceResult> {
        let qs = self.prepare_bundle(bundle);
        let entries: Vec<usize> = (0..self.len()).collect();
        exec.map(&entries, |&e| self.relevance_prepared(&qs, e, agg))
    }

    /// Ranks all candidate answers in `corpus` by relevance and keeps the
    /// top `n`. Ties are broken by entry id, then slot.
    pub fn rank_candidates(
        &self,
        bundle: &QueryBundle,
        corpus: &Corpus,
        n: usize,
        agg: Aggregation,
        exec: Exec,
    ) -> Result<Vec<RankedAnswer>, RetrievalError> {
        if n < 1 {
            return Err(RetrievalError::InvalidN);
        }
        self.check_matches(corpus)?;
        let results = self.relevance_all(bundle, agg, exec);
        let mut cands: Vec<(f64, &BugReport, Slot)> = corpus
            .entries()
            .iter()
            .zip(&results)
            .flat_map(|(e, r)| Slot::ALL.map(|s| (r.get(s), e, s)))
            .collect();
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)).then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(n);
        Ok(cands
            .into_iter()
            .enumerate()
            .map(|(i, (score, e, slot))| RankedAnswer {
                text: e.answer(slot).unwrap_or_default().to_string(),
                entry_id: e.id.clone(),
                slot,
                relevance_score: score,
                relevance_rank: i + 1,
                embed_sim: None,
                doi: None,
            })
            .collect())
    }

    fn check_matches(&self, corpus: &Corpus) -> Result<(), RetrievalError> {
        if corpus.len() != self.len() {
            return Err(RetrievalError::Mismatch(format!(
                "index has {} entries, corpus has {}",
                self.len(),
                corpus.len()
            )));
        }
        for (i, (a, b)) in self.ids.iter().zip(corpus.entries()).enumerate() {
            if *a != b.id {
                return Err(RetrievalError::Mismatch(format!("entry {i}: index id {a:?}, corpus id {:?}", b.id)));
            }
        }
        Ok(())
    }
}

/// Indexes a validated corpus with the default analyzer and BM25.
pub fn build_index(corpus: &Corpus) -> Result<FieldedIndex, RetrievalError> {
    FieldedIndex::build(corpus.entries(), Analyzer::default(), Scorer::default())
}

const SNAPSHOT_FORMAT: &str = "clarifyd-index";
const SNAPSHOT_VERSION: u32 = 1;

/// On-disk postings dump. Field lengths are stored per entry in
/// [`Field::ALL`] order; postings map each term to `[entry, field, tf]`
/// triples. Serialization is deterministic (terms sorted).
#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    lemmatize: bool,
    scorer: Scorer,
    entries: Vec<SnapshotEntry>,
    postings: BTreeMap<String, Vec<(u32, u8, u32)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotEntry {
    id: String,
    lengths: [u32; FIELD_COUNT],
}

impl FieldedIndex {
    fn to_snapshot(&self) -> Snapshot {
        let entries = self
            .ids
            .iter()
            .zip(&self.docs)
            .map(|(id, d)| SnapshotEntry { id: id.clone(), lengths: d.each_ref().map(|f| f.len) })
            .collect();
        let postings = self
            .terms
            .iter()
            .zip(&self.postings)
            .map(|(t, ps)| {
                let mut v: Vec<(u32, u8, u32)> = ps.iter().map(|p| (p.entry, p.field, p.tf)).collect();
                v.sort_unstable();
                (t.clone(), v)
            })
            .collect();
        Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            lemmatize: self.analyzer.lemmatize,
            scorer: self.scorer,
            entries,
            postings,
        }
    }

    fn from_snapshot(s: Snapshot) -> Result<Self, String> {
        if s.format != SNAPSHOT_FORMAT || s.version != SNAPSHOT_VERSION {
            return Err(format!("unsupported snapshot {} v{}", s.format, s.version));
        }
        let mut idx = FieldedIndex::empty(Analyzer { lemmatize: s.lemmatize }, s.scorer);
        let mut seen = HashSet::new();
        for e in &s.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(format!("duplicate entry id {:?}", e.id));
            }
            idx.ids.push(e.id.clone());
            let mut docs: [FieldDoc; FIELD_COUNT] = Default::default();
            for (fi, len) in e.lengths.iter().enumerate() {
                docs[fi].len = *len;
                idx.total_len[fi] += *len as u64;
            }
            idx.docs.push(docs);
        }
        for (term, ps) in s.postings {
            let tid = idx.term_id(&term);
            for (entry, field, tf) in ps {
                let doc = idx
                    .docs
                    .get_mut(entry as usize)
                    .and_then(|d| d.get_mut(field as usize))
                    .ok_or_else(|| format!("posting for {term:?} points outside the index"))?;
                doc.tf.insert(tid, tf);
                idx.df[tid as usize][field as usize] += 1;
                idx.postings[tid as usize].push(Posting { entry, field, tf });
            }
        }
        Ok(idx)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), RetrievalError> {
        let err = |message: String| RetrievalError::Snapshot { path: path.display().to_string(), message };
        let bytes = serde_json::to_vec(&self.to_snapshot()).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| err(e.to_string()))
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, RetrievalError> {
        let err = |message: String| RetrievalError::Snapshot { path: path.display().to_string(), message };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        let snap: Snapshot = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        FieldedIndex::from_snapshot(snap).map_err(err)
    }
}
