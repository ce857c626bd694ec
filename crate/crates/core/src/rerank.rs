//! Word-embedding re-ranking of the relevance-ranked candidate list.
//!
//! Answers are re-ordered by cosine similarity between the mean word vector
//! of the answer and that of the follow-up question. Answers whose
//! similarities fall within a tolerance of each other form a tie group, and
//! within a group the prior relevance position decides: lower degree of
//! interest `DOI = I / N` comes first.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

pub use crate::retrieval::RankedAnswer;

pub const DEFAULT_SIM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embeddings row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("duplicate token {token:?} at row {row}")]
    DuplicateToken { token: String, row: usize },
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("DOI position {i} outside 1..={n}")]
    DoiOutOfRange { i: usize, n: usize },
}

/// Word vectors of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore { dim, index: HashMap::new(), data: Vec::new() }
    }

    /// Adds a vector; the caller guarantees the dimension.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<(), RerankError> {
        if vector.len() != self.dim {
            return Err(RerankError::DimensionMismatch(vector.len(), self.dim));
        }
        if self.index.contains_key(token) {
            return Err(RerankError::DuplicateToken { token: token.to_string(), row: self.len() + 1 });
        }
        self.index.insert(token.to_string(), self.len());
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

/// Reads the word2vec text format: a `V d` header line, then `V` rows of a
/// token followed by `d` numbers. Row numbers in errors are 1-based file
/// lines.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore, RerankError> {
    let io = |source| RerankError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, l)) => l.map_err(io)?,
        None => return Err(RerankError::Parse { row: 1, message: "missing header".into() }),
    };
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (vocab, dim) = match parts.as_slice() {
        [v, d] => match (v.parse::<usize>(), d.parse::<usize>()) {
            (Ok(v), Ok(d)) if d > 0 => (v, d),
            _ => return Err(RerankError::Parse { row: 1, message: format!("bad header {header:?}") }),
        },
        _ => return Err(RerankError::Parse { row: 1, message: format!("bad header {header:?}") }),
    };

    let mut store = EmbeddingStore::new(dim);
    let mut buf = Vec::with_capacity(dim);
    for (i, line) in lines {
        let line = line.map_err(io)?;
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap_or_default();
        buf.clear();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| RerankError::Parse { row, message: format!("not a number: {f:?}") })?;
            buf.push(v);
        }
        if buf.len() != dim {
            return Err(RerankError::Parse { row, message: format!("expected {dim} values, found {}", buf.len()) });
        }
        if store.contains(token) {
            return Err(RerankError::DuplicateToken { token: token.to_string(), row });
        }
        store.insert(token, &buf)?;
    }
    if store.len() != vocab {
        return Err(RerankError::Parse {
            row: 1,
            message: format!("header declares {vocab} vectors, file has {}", store.len()),
        });
    }
    Ok(store)
}

/// Mean of the vectors of in-vocabulary tokens; the zero vector when none
/// are known.
pub fn embed_text<S: AsRef<str>>(tokens: &[S], store: &EmbeddingStore) -> Vec<f64> {
    let mut sum = vec![0.0; store.dim()];
    let mut n = 0usize;
    for t in tokens {
        if let Some(v) = store.get(t.as_ref()) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    if n > 0 {
        let n = n as f64;
        sum.iter_mut().for_each(|s| *s /= n);
    }
    sum
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, RerankError> {
    if u.len() != v.len() {
        return Err(RerankError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>();
    let nv = v.iter().map(|a| a * a).sum::<f64>();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    // one square root of the product keeps cosine(x, x) at exactly 1
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Degree of interest of the answer at relevance position `i` out of `n`.
pub fn doi(i: usize, n: usize) -> Result<f64, RerankError> {
    if i < 1 || i > n {
        return Err(RerankError::DoiOutOfRange { i, n });
    }
    Ok(i as f64 / n as f64)
}

/// Orders already-scored answers: similarity descending, with answers
/// within `tolerance` of their group's leading similarity ordered by
/// ascending DOI.
pub fn order_by_similarity(mut list: Vec<RankedAnswer>, tolerance: f64) -> Vec<RankedAnswer> {
    let sim = |a: &RankedAnswer| a.embed_sim.unwrap_or(0.0);
    list.sort_by(|a, b| sim(b).total_cmp(&sim(a)).then(a.relevance_rank.cmp(&b.relevance_rank)));

    let mut out = Vec::with_capacity(list.len());
    let mut start = 0;
    while start < list.len() {
        let lead = sim(&list[start]);
        let mut end = start + 1;
        while end < list.len() && lead - sim(&list[end]) <= tolerance {
            end += 1;
        }
        let mut group = list[start..end].to_vec();
        group.sort_by(|a, b| {
            a.doi.unwrap_or(f64::INFINITY).total_cmp(&b.doi.unwrap_or(f64::INFINITY))
        });
        out.extend(group);
        start = end;
    }
    out
}

/// Scores each answer against the question, fills in `embed_sim` and `doi`
/// (with `N = list.len()`), and returns the re-ranked list.
pub fn rerank<S: AsRef<str>>(
    list: Vec<RankedAnswer>,
    question_tokens: &[S],
    store: &EmbeddingStore,
    answer_tokens: impl Fn(&str) -> Vec<String>,
    sim_tolerance: f64,
) -> Result<Vec<RankedAnswer>, RerankError> {
    if list.is_empty() {
        return Ok(list);
    }
    let n = list.len();
    let qv = embed_text(question_tokens, store);
    let mut scored = Vec::with_capacity(n);
    for mut a in list {
        let av = embed_text(&answer_tokens(&a.text), store);
        a.embed_sim = Some(cosine(&av, &qv)?);
        a.doi = Some(doi(a.relevance_rank, n)?);
        scored.push(a);
    }
    Ok(order_by_similarity(scored, sim_tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Slot;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn store() -> EmbeddingStore {
        let f = write_tmp("3 4\ncrash 1 0 0 0\nversion 0 1 0 0\nlinux 0 1 1 0\n");
        load_embeddings(f.path()).unwrap()
    }

    fn ans(rank: usize, sim: f64, doi: f64) -> RankedAnswer {
        RankedAnswer {
            text: format!("a{rank}"),
            entry_id: format!("e{rank}"),
            slot: Slot::Ca1,
            relevance_score: 0.0,
            relevance_rank: rank,
            embed_sim: Some(sim),
            doi: Some(doi),
        }
    }

    #[test]
    fn load_fixture() {
        let s = store();
        assert_eq!(s.len(), 3);
        assert_eq!(s.dim(), 4);
        assert_eq!(s.get("linux"), Some(&[0.0, 1.0, 1.0, 0.0][..]));
    }

    #[test]
    fn short_row_named() {
        let f = write_tmp("2 3\na 1 2 3\nb 1 2\n");
        match load_embeddings(f.path()) {
            Err(RerankError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_row_rejected() {
        let f = write_tmp("2 2\na 1 2\na 3 4\n");
        assert!(matches!(load_embeddings(f.path()), Err(RerankError::DuplicateToken { row: 3, .. })));
    }

    #[test]
    fn header_mismatch_rejected() {
        let f = write_tmp("3 2\na 1 2\n");
        assert!(load_embeddings(f.path()).is_err());
        let f = write_tmp("bogus\n");
        assert!(matches!(load_embeddings(f.path()), Err(RerankError::Parse { row: 1, .. })));
    }

    #[test]
    fn embed_examples() {
        let s = store();
        assert_eq!(embed_text(&["crash"], &s), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(embed_text(&["crash", "version"], &s), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(embed_text(&["zzz", "qqq"], &s), vec![0.0; 4]);
        assert_eq!(embed_text(&["crash", "unknown"], &s), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn doi_examples() {
        assert_eq!(doi(1, 10).unwrap(), 0.1);
        assert_eq!(doi(10, 10).unwrap(), 1.0);
        for n in [10, 20, 25, 30, 50] {
            assert_eq!(doi(n, n).unwrap(), 1.0);
            assert!((doi(1, n).unwrap() - 1.0 / n as f64).abs() == 0.0);
        }
        assert!(doi(0, 10).is_err());
        assert!(doi(11, 10).is_err());
    }

    #[test]
    fn distinct_similarities_pure_cosine_order() {
        let list = vec![ans(1, 0.2, 0.1), ans(2, 0.9, 0.2), ans(3, 0.5, 0.3)];
        let out = order_by_similarity(list, DEFAULT_SIM_TOLERANCE);
        assert_eq!(out.iter().map(|a| a.relevance_rank).collect::<Vec<_>>(), vec![2, 3, 1]);
    }

    #[test]
    fn equal_similarity_lower_doi_first() {
        let list = vec![ans(7, 0.5, 0.7), ans(2, 0.5, 0.2)];
        let out = order_by_similarity(list, DEFAULT_SIM_TOLERANCE);
        assert_eq!(out[0].doi, Some(0.2));
        assert_eq!(out[1].doi, Some(0.7));
    }

    #[test]
    fn rerank_fills_fields() {
        let s = store();
        let list = vec![
            RankedAnswer { embed_sim: None, doi: None, text: "use linux".into(), ..ans(1, 0.0, 0.0) },
            RankedAnswer { embed_sim: None, doi: None, text: "crash".into(), ..ans(2, 0.0, 0.0) },
            RankedAnswer { embed_sim: None, doi: None, text: "nothing known".into(), ..ans(3, 0.0, 0.0) },
        ];
        let tok = |t: &str| t.split_whitespace().map(String::from).collect::<Vec<_>>();
        let out = rerank(list, &["crash"], &s, tok, DEFAULT_SIM_TOLERANCE).unwrap();
        assert_eq!(out[0].text, "crash");
        assert_eq!(out[0].embed_sim, Some(1.0));
        assert_eq!(out[0].doi, Some(2.0 / 3.0));
        // "use linux" and the all-OOV answer both have similarity 0; DOI decides
        assert_eq!(out[1].relevance_rank, 1);
        assert_eq!(out[2].relevance_rank, 3);
        assert!(rerank(Vec::new(), &["crash"], &s, tok, 1e-6).unwrap().is_empty());
    }
}
