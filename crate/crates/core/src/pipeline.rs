//! End-to-end wiring: rank, re-rank, build contexts, generate, evaluate.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::corpus::{BugReport, Corpus, HeldoutItem, LanguageTag, Slot};
use crate::exec::Exec;
use crate::genctx::{
    build_context, generate_answers, ContextMode, GenError, GeneratedAnswer, GenerationBackend, GenerationOptions,
    DEFAULT_MAX_CHARS,
};
use crate::metrics::{aggregate, best_of_k, AnswerScores, EvaluationReport, MetricContext, MetricError, MetricRow};
use crate::rerank::{rerank, EmbeddingStore, RankedAnswer, RerankError, DEFAULT_SIM_TOLERANCE};
use crate::retrieval::{Aggregation, FieldedIndex, QueryBundle, RetrievalError};
use crate::textprep::Analyzer;

pub const ALLOWED_N: [usize; 5] = [10, 20, 25, 30, 50];
pub const EVAL_KS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("report {0} has no follow-up question")]
    NoQuestion(String),
}

/// Whether embedding similarity re-orders the relevance ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingMode {
    #[default]
    Hybrid,
    RelevanceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n: usize,
    pub k: usize,
    pub aggregation: Aggregation,
    pub ranking: RankingMode,
    pub context_mode: ContextMode,
    pub max_chars: usize,
    pub sim_tolerance: f64,
    /// Accept any N >= 1, not only the standard list sizes.
    pub allow_any_n: bool,
    /// Drop answers mined from the query report itself.
    pub exclude_self: bool,
    #[serde(skip)]
    pub exec: Exec,
    #[serde(skip)]
    pub generation: GenerationOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            n: 10,
            k: 5,
            aggregation: Aggregation::default(),
            ranking: RankingMode::default(),
            context_mode: ContextMode::default(),
            max_chars: DEFAULT_MAX_CHARS,
            sim_tolerance: DEFAULT_SIM_TOLERANCE,
            allow_any_n: false,
            exclude_self: true,
            exec: Exec::default(),
            generation: GenerationOptions::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.n == 0 || (!self.allow_any_n && !ALLOWED_N.contains(&self.n)) {
            return Err(PipelineError::Config(format!("N must be one of {ALLOWED_N:?}, got {}", self.n)));
        }
        if self.k == 0 || self.k > self.n {
            return Err(PipelineError::Config(format!("K must be in 1..=N ({}), got {}", self.n, self.k)));
        }
        if self.sim_tolerance.is_nan() || self.sim_tolerance < 0.0 {
            return Err(PipelineError::Config("sim_tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// One recommended answer with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub generated: GeneratedAnswer,
    pub retrieved: String,
    pub source_id: String,
    pub slot: Slot,
    pub relevance_score: f64,
    pub relevance_rank: usize,
    pub embed_sim: Option<f64>,
    pub doi: Option<f64>,
    pub context_mode: ContextMode,
    pub includes_deficient: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub rank_ms: f64,
    pub rerank_ms: f64,
    pub generate_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResult {
    pub query_id: String,
    pub question: String,
    pub ranked: Vec<RankedAnswer>,
    pub answers: Vec<Recommendation>,
    pub timings: StageTimings,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

pub struct Engine {
    corpus: Corpus,
    index: FieldedIndex,
    store: Arc<EmbeddingStore>,
    config: EngineConfig,
}

impl Engine {
    pub fn new(corpus: Corpus, index: FieldedIndex, store: Arc<EmbeddingStore>, config: EngineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        if index.ids().iter().map(String::as_str).ne(corpus.entries().iter().map(|e| e.id.as_str())) {
            return Err(RetrievalError::Mismatch("index was built from a different corpus".into()).into());
        }
        Ok(Engine { corpus, index, store, config })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn store(&self) -> &Arc<EmbeddingStore> {
        &self.store
    }

    /// Top-N answers by relevance, re-ranked by embedding similarity in
    /// hybrid mode.
    pub fn rank(&self, deficient: &BugReport) -> Result<(Vec<RankedAnswer>, StageTimings), PipelineError> {
        let cfg = &self.config;
        let mut timings = StageTimings::default();
        let t = Instant::now();
        let bundle = QueryBundle::from_report(deficient, self.index.analyzer());
        // one entry contributes at most three answers
        let want = if cfg.exclude_self { cfg.n + Slot::ALL.len() } else { cfg.n };
        let mut list = self.index.rank_candidates(&bundle, &self.corpus, want, cfg.aggregation, cfg.exec)?;
        if cfg.exclude_self {
            list.retain(|a| a.entry_id != deficient.id);
        }
        list.truncate(cfg.n);
        for (i, a) in list.iter_mut().enumerate() {
            a.relevance_rank = i + 1;
        }
        timings.rank_ms = ms(t.elapsed());

        if cfg.ranking == RankingMode::Hybrid {
            let t = Instant::now();
            let surface = Analyzer::surface();
            let q = surface.analyze(deficient.question());
            list = rerank(list, &q, &self.store, |s| surface.analyze(s), cfg.sim_tolerance)?;
            timings.rerank_ms = ms(t.elapsed());
        }
        Ok((list, timings))
    }

    /// Recommends `k` answers (default: the configured K) for `deficient`.
    pub fn ask(&self, deficient: &BugReport, backend: &dyn GenerationBackend, k: Option<usize>) -> Result<AskResult, PipelineError> {
        let question = deficient
            .followup_question
            .as_deref()
            .filter(|q| !q.trim().is_empty())
            .ok_or_else(|| PipelineError::NoQuestion(deficient.id.clone()))?;
        let k = k.unwrap_or(self.config.k);
        if k == 0 || k > self.config.n {
            return Err(PipelineError::Config(format!("K must be in 1..=N ({}), got {k}", self.config.n)));
        }
        let (ranked, mut timings) = self.rank(deficient)?;
        let top = &ranked[..k.min(ranked.len())];
        let contexts: Vec<_> = top
            .iter()
            .map(|a| {
                let source = self.corpus.get(&a.entry_id).expect("ranked answers come from the corpus");
                build_context(self.config.context_mode, question, deficient, a, source, self.config.max_chars)
            })
            .collect();
        let t = Instant::now();
        let generated = generate_answers(question, &contexts, backend, k, self.config.generation)?;
        timings.generate_ms = ms(t.elapsed());
        debug!(query = %deficient.id, rank_ms = timings.rank_ms, rerank_ms = timings.rerank_ms, generate_ms = timings.generate_ms, "ask");

        let answers = top
            .iter()
            .zip(generated)
            .enumerate()
            .map(|(i, (a, g))| Recommendation {
                rank: i + 1,
                generated: g,
                retrieved: a.text.clone(),
                source_id: a.entry_id.clone(),
                slot: a.slot,
                relevance_score: a.relevance_score,
                relevance_rank: a.relevance_rank,
                embed_sim: a.embed_sim,
                doi: a.doi,
                context_mode: self.config.context_mode,
                includes_deficient: self.config.context_mode == ContextMode::Two,
            })
            .collect();
        Ok(AskResult { query_id: deficient.id.clone(), question: question.to_string(), ranked, answers, timings })
    }

    /// Runs every held-out item through [`Engine::ask`] with the largest K
    /// in `ks` and records best-of-K metrics for each K. Items without gold
    /// are skipped and counted.
    pub fn evaluate(
        &self,
        heldout: &[HeldoutItem],
        ks: &[usize],
        backend: &dyn GenerationBackend,
        metrics: &MetricContext<'_>,
    ) -> Result<EvaluationReport, PipelineError> {
        let kmax = ks.iter().copied().max().ok_or(MetricError::InvalidK)?;
        let with_gold: Vec<(&HeldoutItem, &str)> =
            heldout.iter().filter_map(|h| h.gold.as_deref().map(|g| (h, g))).collect();
        let skipped = heldout.len() - with_gold.len();
        if skipped > 0 {
            warn!(skipped, "held-out items without gold answers skipped");
        }
        let t = Instant::now();
        let per_query = self.config.exec.map(&with_gold, |(h, gold)| -> Result<(LanguageTag, Vec<MetricRow>), PipelineError> {
            let res = self.ask(&h.report, backend, Some(kmax))?;
            let scores: Vec<AnswerScores> =
                res.answers.iter().map(|a| metrics.score(&a.generated.text, gold)).collect::<Result<_, _>>()?;
            let rows = ks
                .iter()
                .filter(|&&k| k <= scores.len())
                .map(|&k| best_of_k(&h.report.id, &scores, k))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((h.report.language_tag, rows))
        });
        let mut tagged = Vec::new();
        for r in per_query {
            let (lang, rows) = r?;
            tagged.extend(rows.into_iter().map(|row| (lang, row)));
        }
        info!(queries = with_gold.len(), elapsed_ms = ms(t.elapsed()), "evaluation finished");
        Ok(EvaluationReport {
            semsim_provider: metrics.embedder.name(),
            generator: backend.tag(),
            meteor_stages: vec!["exact".into(), "stem".into()],
            wmd_lower_is_better: true,
            skipped_without_gold: skipped,
            aggregates: aggregate(&tagged),
            rows: tagged.into_iter().map(|(_, r)| r).collect(),
        })
    }
}
