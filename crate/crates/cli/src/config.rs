use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use clarifyd_core::genctx::{ContextMode, DEFAULT_MAX_CHARS};
use clarifyd_core::ingest::{default_labels, IssueState, DEFAULT_API_BASE};
use clarifyd_core::corpus::LanguageTag;
use clarifyd_core::metrics::Smoothing;
use clarifyd_core::pipeline::{RankingMode, ALLOWED_N};
use clarifyd_core::rerank::DEFAULT_SIM_TOLERANCE;
use clarifyd_core::retrieval::{Aggregation, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Fallback,
    Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SemsimProvider {
    #[default]
    WordVectors,
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoConfig {
    pub name: String,
    #[serde(default)]
    pub language: LanguageTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub repos: Vec<RepoConfig>,
    pub labels: BTreeSet<String>,
    pub state: IssueState,
    pub max_issues: usize,
    pub api_base: String,
    /// Serve tracker requests from recorded JSON under this directory.
    pub fixtures: Option<PathBuf>,

    pub data_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: Option<usize>,

    pub scorer: Scorer,
    pub aggregation: Aggregation,
    pub ranking: RankingMode,
    pub n: usize,
    pub k: usize,
    pub allow_any_n: bool,
    pub context_mode: ContextMode,
    pub max_chars: usize,
    pub sim_tolerance: f64,
    /// Ignore answers mined from the query report itself.
    pub exclude_self: bool,

    pub backend: BackendKind,
    pub service_url: String,
    pub timeout_secs: u64,
    pub parallelism: usize,
    pub fallback: bool,

    pub semsim: SemsimProvider,
    pub smoothing: Smoothing,
    pub relaxed_wmd: bool,
    pub sequential: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            repos: Vec::new(),
            labels: default_labels(),
            state: IssueState::Closed,
            max_issues: 500,
            api_base: DEFAULT_API_BASE.into(),
            fixtures: None,
            data_dir: PathBuf::from("data"),
            corpus: None,
            index: None,
            embeddings: None,
            embedding_dim: None,
            scorer: Scorer::default(),
            aggregation: Aggregation::default(),
            ranking: RankingMode::default(),
            n: 10,
            k: 5,
            allow_any_n: false,
            context_mode: ContextMode::One,
            max_chars: DEFAULT_MAX_CHARS,
            sim_tolerance: DEFAULT_SIM_TOLERANCE,
            exclude_self: true,
            backend: BackendKind::Fallback,
            service_url: "http://127.0.0.1:8080".into(),
            timeout_secs: 30,
            parallelism: 4,
            fallback: true,
            semsim: SemsimProvider::WordVectors,
            smoothing: Smoothing::AddOne,
            relaxed_wmd: false,
            sequential: false,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths in the file are relative to the file
        if let Some(base) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            rebase(&mut cfg.data_dir);
            for p in [&mut cfg.corpus, &mut cfg.index, &mut cfg.embeddings, &mut cfg.fixtures].into_iter().flatten() {
                rebase(p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.allow_any_n && !ALLOWED_N.contains(&self.n) {
            bail!("n = {} is not one of {ALLOWED_N:?} (set allow_any_n = true to override)", self.n);
        }
        if self.n == 0 {
            bail!("n must be at least 1");
        }
        if self.k == 0 || self.k > self.n {
            bail!("k = {} must be between 1 and n = {}", self.k, self.n);
        }
        if self.max_issues == 0 {
            bail!("max_issues must be at least 1");
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.data_dir.join("corpus.jsonl"))
    }

    pub fn index_path(&self) -> PathBuf {
        self.index.clone().unwrap_or_else(|| self.data_dir.join("index.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            r#"
repos = [{ name = "acme/widget", language = "Python" }]
labels = ["bug"]
corpus = "corpus.jsonl"
n = 20
k = 3
context_mode = 2
backend = "service"
scorer = { kind = "bm25", k1 = 1.5, b = 0.5 }
aggregation = "normalized"
ranking = "relevance-only"
"#,
        )
        .unwrap();
        let c = Config::load(Some(&p)).unwrap();
        assert_eq!(c.corpus_path(), dir.path().join("corpus.jsonl"));
        assert_eq!(c.context_mode, ContextMode::Two);
        assert_eq!(c.scorer, Scorer::Bm25 { k1: 1.5, b: 0.5 });
        assert_eq!(c.repos[0].language, LanguageTag::Python);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<Config>("context_mode = 3").is_err());
        assert!(toml::from_str::<Config>("nonsense = 1").is_err());
        let c = Config { n: 15, ..Config::default() };
        assert!(c.validate().is_err());
        let c = Config { n: 10, k: 11, ..Config::default() };
        assert!(c.validate().is_err());
    }
}
