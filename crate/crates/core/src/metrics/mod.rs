//! Answer-quality metrics and the Top-K evaluation protocol.
//!
//! BLEU and METEOR measure lexical overlap, WMD and semantic similarity
//! measure meaning. All four compare a generated answer to the accepted
//! (gold) answer; Top-K rows keep the best value among the first K
//! generated answers.

mod bleu;
mod meteor;
mod wmd;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu, bleu_with, modified_precision_counts, Smoothing};
pub use meteor::{align, meteor, meteor_with, Alignment, MeteorParams};
pub use wmd::{relaxed_wmd, transport, wmd};

use crate::corpus::LanguageTag;
use crate::rerank::{cosine, embed_text, EmbeddingStore};
use crate::textprep::{tokenize, Analyzer};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("distance undefined: a side has no in-vocabulary tokens")]
    UndefinedDistance,
    #[error("K must be at least 1")]
    InvalidK,
    #[error("need at least {k} generated answers, got {got}")]
    NotEnoughAnswers { k: usize, got: usize },
    #[error("embedding provider {provider}: {message}")]
    Provider { provider: String, message: String },
    #[error("writing report {path}: {message}")]
    Report { path: String, message: String },
}

/// Tokens used by every metric: split and lowercased, no lemmatization.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_tokens()
}

/// Produces fixed-length sentence vectors.
pub trait SentenceEmbedder: Send + Sync {
    fn name(&self) -> String;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError>;
}

/// Mean-pooled word vectors.
pub struct WordVectorEmbedder {
    store: Arc<EmbeddingStore>,
}

impl WordVectorEmbedder {
    pub fn new(store: Arc<EmbeddingStore>) -> Self {
        WordVectorEmbedder { store }
    }
}

impl SentenceEmbedder for WordVectorEmbedder {
    fn name(&self) -> String {
        format!("word-vectors(d={})", self.store.dim())
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError> {
        let a = Analyzer::surface();
        Ok(texts.iter().map(|t| embed_text(&a.analyze(t), &self.store)).collect())
    }
}

/// `100 * cosine(embed(candidate), embed(reference))`.
pub fn semsim(candidate: &str, reference: &str, provider: &dyn SentenceEmbedder) -> Result<f64, MetricError> {
    let v = provider.embed(&[candidate, reference])?;
    let [a, b] = v.as_slice() else {
        return Err(MetricError::Provider {
            provider: provider.name(),
            message: format!("expected 2 vectors, got {}", v.len()),
        });
    };
    let c = cosine(a, b).map_err(|e| MetricError::Provider { provider: provider.name(), message: e.to_string() })?;
    Ok(100.0 * c)
}

/// Metric values of one generated answer against the gold answer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnswerScores {
    pub bleu: f64,
    pub meteor: f64,
    pub semsim: f64,
    /// `None` when either side has no in-vocabulary word.
    pub wmd: Option<f64>,
}

/// Per-query evaluation record. WMD is lower-is-better; the others are
/// higher-is-better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub query_id: String,
    pub k: usize,
    pub bleu: f64,
    pub meteor: f64,
    pub semsim: f64,
    pub wmd: Option<f64>,
}

/// What the metric computations need besides the texts.
pub struct MetricContext<'a> {
    pub store: &'a EmbeddingStore,
    pub embedder: &'a dyn SentenceEmbedder,
    pub smoothing: Smoothing,
    pub relaxed_wmd: bool,
}

impl MetricContext<'_> {
    pub fn score(&self, generated: &str, gold: &str) -> Result<AnswerScores, MetricError> {
        let g = metric_tokens(generated);
        let r = metric_tokens(gold);
        let wmd_value = if self.relaxed_wmd { relaxed_wmd(&g, &r, self.store) } else { wmd(&g, &r, self.store) };
        let wmd_value = match wmd_value {
            Ok(v) => Some(v),
            Err(MetricError::UndefinedDistance) => None,
            Err(e) => return Err(e),
        };
        Ok(AnswerScores {
            bleu: bleu_with(&g, &r, 4, self.smoothing),
            meteor: meteor(&g, &r),
            semsim: semsim(generated, gold, self.embedder)?,
            wmd: wmd_value,
        })
    }
}

/// Best value per metric among the first `k` scored answers: max for BLEU,
/// METEOR and semantic similarity, min for WMD.
pub fn best_of_k(query_id: &str, scores: &[AnswerScores], k: usize) -> Result<MetricRow, MetricError> {
    if k < 1 {
        return Err(MetricError::InvalidK);
    }
    if scores.len() < k {
        return Err(MetricError::NotEnoughAnswers { k, got: scores.len() });
    }
    let top = &scores[..k];
    let max = |f: fn(&AnswerScores) -> f64| top.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    Ok(MetricRow {
        query_id: query_id.to_string(),
        k,
        bleu: max(|s| s.bleu),
        meteor: max(|s| s.meteor),
        semsim: max(|s| s.semsim),
        wmd: top.iter().filter_map(|s| s.wmd).reduce(f64::min),
    })
}

/// Scores the first `k` generated answers against `gold` and keeps the best
/// of each metric.
pub fn evaluate_topk(
    query_id: &str,
    generated: &[String],
    gold: &str,
    k: usize,
    ctx: &MetricContext<'_>,
) -> Result<MetricRow, MetricError> {
    if k < 1 {
        return Err(MetricError::InvalidK);
    }
    if generated.len() < k {
        return Err(MetricError::NotEnoughAnswers { k, got: generated.len() });
    }
    let scores = generated[..k].iter().map(|g| ctx.score(g, gold)).collect::<Result<Vec<_>, _>>()?;
    best_of_k(query_id, &scores, k)
}

/// Mean metric values for one (language, K) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub lang: String,
    pub k: usize,
    pub queries: usize,
    pub bleu: f64,
    pub meteor: f64,
    pub semsim: f64,
    pub wmd: Option<f64>,
}

/// Groups rows by language tag and K and averages each metric. A final
/// `"all"` group covers every row.
pub fn aggregate(rows: &[(LanguageTag, MetricRow)]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricRow>> = BTreeMap::new();
    for (lang, row) in rows {
        groups.entry((lang.to_string(), row.k)).or_default().push(row);
    }
    let mut all: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
    for (_, row) in rows {
        all.entry(row.k).or_default().push(row);
    }
    let mean = |rs: &[&MetricRow], f: fn(&MetricRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
    let cell = |lang: String, k: usize, rs: &[&MetricRow]| {
        let wmds: Vec<f64> = rs.iter().filter_map(|r| r.wmd).collect();
        AggregateRow {
            lang,
            k,
            queries: rs.len(),
            bleu: mean(rs, |r| r.bleu),
            meteor: mean(rs, |r| r.meteor),
            semsim: mean(rs, |r| r.semsim),
            wmd: (!wmds.is_empty()).then(|| wmds.iter().sum::<f64>() / wmds.len() as f64),
        }
    };
    let mut out: Vec<AggregateRow> = groups.iter().map(|((l, k), rs)| cell(l.clone(), *k, rs)).collect();
    out.extend(all.iter().map(|(k, rs)| cell("all".to_string(), *k, rs)));
    out
}

/// Evaluation report written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub semsim_provider: String,
    pub generator: String,
    /// METEOR runs exact and stem matching only; no synonym stage.
    pub meteor_stages: Vec<String>,
    pub wmd_lower_is_better: bool,
    pub skipped_without_gold: usize,
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl EvaluationReport {
    pub fn write_json(&self, path: &Path) -> Result<(), MetricError> {
        let err = |e: String| MetricError::Report { path: path.display().to_string(), message: e };
        let s = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| err(e.to_string()))
    }

    /// One line per (query, K): `query_id,k,bleu,meteor,semsim,wmd`.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricError> {
        let err = |e: String| MetricError::Report { path: path.display().to_string(), message: e };
        let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| err(e.to_string()))?;
        }
        w.flush().map_err(|e| err(e.to_string()))
    }

    /// Per-language means, mirroring a Top-1/3/5 results table.
    pub fn write_aggregate_csv(&self, path: &Path) -> Result<(), MetricError> {
        let err = |e: String| MetricError::Report { path: path.display().to_string(), message: e };
        let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
        for r in &self.aggregates {
            w.serialize(r).map_err(|e| err(e.to_string()))?;
        }
        w.flush().map_err(|e| err(e.to_string()))
    }
}
