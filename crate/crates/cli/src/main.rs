mod config;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use clarifyd_core::corpus::{load_corpus, read_heldout, read_jsonl, write_jsonl, BugReport, Comment, Corpus};
use clarifyd_core::exec::Exec;
use clarifyd_core::genctx::{ContextMode, ExtractiveFallback, GenerationBackend, GenerationOptions, ServiceBackend, ServiceEmbedder};
use clarifyd_core::http::{FixtureTransport, HttpTransport, ReqwestTransport};
use clarifyd_core::ingest::{parse_issue_id, FetchSpec, IssueClient, RepoName};
use clarifyd_core::metrics::{EvaluationReport, MetricContext, SentenceEmbedder, WordVectorEmbedder};
use clarifyd_core::mine::{mine_all, read_votes, resolve_gold, MinerConfig, Skip};
use clarifyd_core::pipeline::{AskResult, Engine, EngineConfig, RankingMode, EVAL_KS};
use clarifyd_core::rerank::{load_embeddings, EmbeddingStore};
use clarifyd_core::retrieval::FieldedIndex;
use clarifyd_core::textprep::Analyzer;

use config::{BackendKind, Config, SemsimProvider};

#[derive(Parser)]
#[command(name = "clarifyd", version, about = "Recommend answers to follow-up questions on deficient bug reports")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus JSONL (overrides the config).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Word vectors in word2vec text format.
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    /// Number of candidate answers kept after relevance ranking.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Number of answers generated.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// 1: retrieved answer and its report; 2: also the deficient report.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    context_mode: Option<u8>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    service_url: Option<String>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch labeled issues and their comments from the tracker.
    Ingest {
        /// Output threads JSONL (default: <data_dir>/threads.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "CLARIFYD_TOKEN", hide_env_values = true, hide = true)]
        token: Option<String>,
    },
    /// Turn issue threads into corpus entries.
    Mine {
        /// Threads JSONL written by `ingest`.
        #[arg(long)]
        threads: Option<PathBuf>,
        /// Annotator votes CSV (`issue_id,annotator,choice`).
        #[arg(long)]
        votes: Option<PathBuf>,
        /// Held-out JSONL with gold answers (written when votes are given).
        #[arg(long)]
        heldout_out: Option<PathBuf>,
    },
    /// Build the retrieval index from the corpus.
    Index,
    /// Recommend answers for one deficient report (JSON file).
    Ask { report: PathBuf },
    /// Evaluate generated answers on a held-out JSONL set.
    Evaluate {
        heldout: PathBuf,
        /// Directory for metrics.csv, metrics.json and aggregates.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// One issue with its time-sorted comments.
#[derive(Serialize, Deserialize)]
struct Thread {
    issue: BugReport,
    comments: Vec<Comment>,
}

/// Exclusive lock on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(artifact: &Path) -> Result<Self> {
        let dir = artifact.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".clarifyd.lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!("{} is locked by another clarifyd command (delete the file if it is stale)", path.display())
        })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(DirLock(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(p) = cli.corpus {
        cfg.corpus = Some(p);
    }
    if let Some(p) = cli.embeddings {
        cfg.embeddings = Some(p);
    }
    if let Some(n) = cli.n {
        cfg.n = n;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(m) = cli.context_mode {
        cfg.context_mode = ContextMode::try_from(m).map_err(anyhow::Error::msg)?;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    if let Some(u) = cli.service_url {
        cfg.service_url = u;
    }
    cfg.validate()?;
    match cli.command {
        Command::Ingest { out, token } => cmd_ingest(&cfg, out, token, cli.json),
        Command::Mine { threads, votes, heldout_out } => cmd_mine(&cfg, threads, votes, heldout_out, cli.json),
        Command::Index => cmd_index(&cfg, cli.json),
        Command::Ask { report } => cmd_ask(&cfg, &report, cli.json),
        Command::Evaluate { heldout, out_dir } => cmd_evaluate(&cfg, &heldout, out_dir, cli.json),
    }
}

fn exec(cfg: &Config) -> Exec {
    if cfg.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found at {} ({hint})", path.display());
    }
    Ok(())
}

fn http(cfg: &Config) -> Result<Arc<dyn HttpTransport>> {
    Ok(Arc::new(ReqwestTransport::new(Duration::from_secs(cfg.timeout_secs))?))
}

fn cmd_ingest(cfg: &Config, out: Option<PathBuf>, token: Option<String>, json: bool) -> Result<()> {
    if cfg.repos.is_empty() {
        bail!("no repositories configured (add `repos = [{{ name = \"owner/name\" }}]` to the config)");
    }
    let out = out.unwrap_or_else(|| cfg.data_dir.join("threads.jsonl"));
    let _lock = DirLock::acquire(&out)?;
    let transport: Arc<dyn HttpTransport> = match &cfg.fixtures {
        Some(dir) => {
            require(dir, "fixture directory", "check `fixtures` in the config")?;
            Arc::new(FixtureTransport::new(dir))
        }
        None => http(cfg)?,
    };
    let client = IssueClient::new(transport, cfg.api_base.clone()).with_token(token);
    let mut threads = Vec::new();
    for repo in &cfg.repos {
        let t = Instant::now();
        let mut spec = FetchSpec::new(&repo.name, cfg.max_issues)?;
        spec.labels = cfg.labels.clone();
        spec.state = cfg.state;
        spec.language = repo.language;
        let issues = client.fetch_issues(&spec)?;
        let repo_name: RepoName = repo.name.parse()?;
        let numbers: Vec<u64> = issues
            .iter()
            .map(|i| parse_issue_id(&i.id).map(|(_, n)| n).expect("ids are built by the client"))
            .collect();
        let comments = client.fetch_comments_many(&repo_name, &numbers, exec(cfg));
        for (issue, cs) in issues.into_iter().zip(comments) {
            threads.push(Thread { issue, comments: cs? });
        }
        info!(repo = %repo.name, issues = numbers.len(), elapsed_ms = t.elapsed().as_millis() as u64, "ingested");
    }
    write_jsonl(&out, threads.iter())?;
    if json {
        print_json(&serde_json::json!({ "threads": threads.len(), "out": out }))?;
    } else {
        println!("wrote {} threads to {}", threads.len(), out.display());
    }
    Ok(())
}

#[derive(Serialize, Default)]
struct MineSummary {
    threads: usize,
    mined: usize,
    no_question: usize,
    missing_answer: usize,
    filtered: usize,
    heldout: Option<usize>,
    needs_discussion: Option<usize>,
}

fn cmd_mine(cfg: &Config, threads: Option<PathBuf>, votes: Option<PathBuf>, heldout_out: Option<PathBuf>, json: bool) -> Result<()> {
    let threads_path = threads.unwrap_or_else(|| cfg.data_dir.join("threads.jsonl"));
    require(&threads_path, "threads file", "run `clarifyd ingest` first")?;
    let corpus_path = cfg.corpus_path();
    let _lock = DirLock::acquire(&corpus_path)?;
    let t = Instant::now();
    let threads: Vec<(BugReport, Vec<Comment>)> = read_jsonl::<Thread>(&threads_path)?
        .into_iter()
        .map(|(_, th)| {
            let mut cs = th.comments;
            cs.sort_by_key(|c| c.time);
            (th.issue, cs)
        })
        .collect();
    let mut summary = MineSummary { threads: threads.len(), ..Default::default() };
    let mut entries = Vec::new();
    for (id, outcome) in mine_all(&threads, &MinerConfig::default(), exec(cfg)) {
        match outcome {
            Ok(m) => entries.push(m.entry),
            Err(skip) => {
                match skip {
                    Skip::NoQuestion => summary.no_question += 1,
                    Skip::MissingAnswer { .. } => summary.missing_answer += 1,
                    Skip::Filtered { .. } => summary.filtered += 1,
                }
                tracing::debug!(%id, ?skip, "issue skipped");
            }
        }
    }
    summary.mined = entries.len();
    let corpus = Corpus::new(entries).context("mined entries do not form a valid corpus")?;
    clarifyd_core::corpus::save_corpus(&corpus, &corpus_path)?;
    info!(mined = summary.mined, elapsed_ms = t.elapsed().as_millis() as u64, "mined");

    if let Some(votes) = votes {
        require(&votes, "votes file", "pass an existing CSV to --votes")?;
        let res = resolve_gold(corpus.entries(), &read_votes(&votes)?)?;
        let out = heldout_out.unwrap_or_else(|| cfg.data_dir.join("heldout.jsonl"));
        write_jsonl(&out, res.heldout.iter())?;
        if !res.needs_discussion.is_empty() {
            warn!(count = res.needs_discussion.len(), ids = ?res.needs_discussion, "entries without a majority vote");
        }
        summary.heldout = Some(res.heldout.len());
        summary.needs_discussion = Some(res.needs_discussion.len());
    }
    if json {
        print_json(&summary)?;
    } else {
        println!(
            "mined {} of {} threads into {} (no question: {}, missing answer: {}, filtered: {})",
            summary.mined,
            summary.threads,
            corpus_path.display(),
            summary.no_question,
            summary.missing_answer,
            summary.filtered
        );
        if let (Some(h), Some(d)) = (summary.heldout, summary.needs_discussion) {
            println!("held-out items with gold: {h}, needing discussion: {d}");
        }
    }
    Ok(())
}

fn cmd_index(cfg: &Config, json: bool) -> Result<()> {
    let corpus_path = cfg.corpus_path();
    require(&corpus_path, "corpus", "run `clarifyd mine` or pass --corpus")?;
    let index_path = cfg.index_path();
    let _lock = DirLock::acquire(&index_path)?;
    let t = Instant::now();
    let corpus = load_corpus(&corpus_path)?;
    let index = FieldedIndex::build(corpus.entries(), Analyzer::default(), cfg.scorer)?;
    index.save_snapshot(&index_path)?;
    info!(entries = index.len(), postings = index.posting_count(), elapsed_ms = t.elapsed().as_millis() as u64, "indexed");
    if json {
        print_json(&serde_json::json!({ "entries": index.len(), "postings": index.posting_count(), "out": index_path }))?;
    } else {
        println!("indexed {} entries into {}", index.len(), index_path.display());
    }
    Ok(())
}

fn load_store(cfg: &Config, required: bool) -> Result<Arc<EmbeddingStore>> {
    let Some(path) = &cfg.embeddings else {
        if required {
            bail!("word embeddings are required (set `embeddings` in the config or pass --embeddings)");
        }
        return Ok(Arc::new(EmbeddingStore::new(cfg.embedding_dim.unwrap_or(1))));
    };
    require(path, "embeddings", "check --embeddings")?;
    let t = Instant::now();
    let store = load_embeddings(path)?;
    if let Some(d) = cfg.embedding_dim {
        if d != store.dim() {
            bail!("embeddings in {} have dimension {}, config says {d}", path.display(), store.dim());
        }
    }
    info!(words = store.len(), dim = store.dim(), elapsed_ms = t.elapsed().as_millis() as u64, "loaded embeddings");
    Ok(Arc::new(store))
}

fn build_engine(cfg: &Config, store: Arc<EmbeddingStore>, n: usize) -> Result<Engine> {
    let corpus_path = cfg.corpus_path();
    require(&corpus_path, "corpus", "run `clarifyd mine` or pass --corpus")?;
    let corpus = load_corpus(&corpus_path)?;
    let index_path = cfg.index_path();
    let index = if index_path.exists() {
        FieldedIndex::load_snapshot(&index_path)?
    } else {
        warn!(path = %index_path.display(), "no index on disk; building in memory (run `clarifyd index` to persist it)");
        FieldedIndex::build(corpus.entries(), Analyzer::default(), cfg.scorer)?
    };
    if index.ids().iter().map(String::as_str).ne(corpus.entries().iter().map(|e| e.id.as_str())) {
        bail!("index at {} does not match the corpus; run `clarifyd index` again", index_path.display());
    }
    let engine_cfg = EngineConfig {
        n,
        k: cfg.k.min(n),
        aggregation: cfg.aggregation,
        ranking: cfg.ranking,
        context_mode: cfg.context_mode,
        max_chars: cfg.max_chars,
        sim_tolerance: cfg.sim_tolerance,
        allow_any_n: cfg.allow_any_n,
        exclude_self: cfg.exclude_self,
        exec: exec(cfg),
        generation: GenerationOptions { fallback: cfg.fallback, parallelism: cfg.parallelism },
    };
    Ok(Engine::new(corpus, index, store, engine_cfg)?)
}

fn backend(cfg: &Config) -> Result<Box<dyn GenerationBackend>> {
    Ok(match cfg.backend {
        BackendKind::Fallback => Box::new(ExtractiveFallback),
        BackendKind::Service => Box::new(
            ServiceBackend::new(http(cfg)?, cfg.service_url.clone()).with_timeout(Duration::from_secs(cfg.timeout_secs)),
        ),
    })
}

fn print_ask(res: &AskResult) {
    println!("{}: {}", res.query_id, res.question);
    for a in &res.answers {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "#{} from {} {} | relevance {:.4} (rank {}) | sim {} | doi {} | context {}{}",
            a.rank,
            a.source_id,
            a.slot,
            a.relevance_score,
            a.relevance_rank,
            opt(a.embed_sim),
            opt(a.doi),
            a.context_mode,
            if a.includes_deficient { " (with deficient report)" } else { "" },
        );
        println!("    {}", a.generated.text.replace('\n', "\n    "));
        if let Some(r) = &a.generated.fallback_reason {
            println!("    (backend failed, retrieved answer shown: {r})");
        }
    }
}

fn cmd_ask(cfg: &Config, report: &Path, json: bool) -> Result<()> {
    require(report, "report", "pass a JSON bug report file")?;
    let text = std::fs::read_to_string(report)?;
    let deficient: BugReport =
        serde_json::from_str(&text).with_context(|| format!("parsing bug report {}", report.display()))?;
    let store = load_store(cfg, cfg.ranking == RankingMode::Hybrid)?;
    let engine = build_engine(cfg, store, cfg.n)?;
    let backend = backend(cfg)?;
    let res = engine.ask(&deficient, backend.as_ref(), Some(cfg.k))?;
    info!(
        rank_ms = res.timings.rank_ms,
        rerank_ms = res.timings.rerank_ms,
        generate_ms = res.timings.generate_ms,
        "ask finished"
    );
    if json {
        print_json(&res)
    } else {
        print_ask(&res);
        Ok(())
    }
}

fn cmd_evaluate(cfg: &Config, heldout: &Path, out_dir: Option<PathBuf>, json: bool) -> Result<()> {
    require(heldout, "held-out set", "run `clarifyd mine --votes ...` first")?;
    let items = read_heldout(heldout)?;
    let out_dir = out_dir.unwrap_or_else(|| cfg.data_dir.join("eval"));
    let _lock = DirLock::acquire(&out_dir.join("metrics.json"))?;
    let store = load_store(cfg, true)?;
    let backend = backend(cfg)?;
    let word_vectors = WordVectorEmbedder::new(store.clone());
    let service_embedder;
    let embedder: &dyn SentenceEmbedder = match cfg.semsim {
        SemsimProvider::WordVectors => &word_vectors,
        SemsimProvider::Service => {
            service_embedder = ServiceEmbedder::new(http(cfg)?, cfg.service_url.clone());
            &service_embedder
        }
    };
    let metrics = MetricContext { store: &store, embedder, smoothing: cfg.smoothing, relaxed_wmd: cfg.relaxed_wmd };
    let ks: Vec<usize> = EVAL_KS.iter().copied().filter(|&k| k <= cfg.n).collect();

    let report = if items.is_empty() {
        warn!(path = %heldout.display(), "held-out set is empty; writing an empty report");
        EvaluationReport {
            semsim_provider: embedder.name(),
            generator: backend.tag(),
            meteor_stages: vec!["exact".into(), "stem".into()],
            wmd_lower_is_better: true,
            skipped_without_gold: 0,
            rows: Vec::new(),
            aggregates: Vec::new(),
        }
    } else {
        let engine = build_engine(cfg, store.clone(), cfg.n)?;
        engine.evaluate(&items, &ks, backend.as_ref(), &metrics)?
    };
    std::fs::create_dir_all(&out_dir)?;
    report.write_json(&out_dir.join("metrics.json"))?;
    report.write_csv(&out_dir.join("metrics.csv"))?;
    report.write_aggregate_csv(&out_dir.join("aggregates.csv"))?;
    if report.skipped_without_gold > 0 {
        warn!(skipped = report.skipped_without_gold, "rows skipped for missing gold answers");
    }
    if json {
        return print_json(&report);
    }
    println!("{:<12} {:>3} {:>7} {:>8} {:>8} {:>8} {:>8}", "lang", "k", "queries", "bleu", "meteor", "semsim", "wmd");
    for a in &report.aggregates {
        let wmd = a.wmd.map_or("-".to_string(), |w| format!("{w:.4}"));
        println!("{:<12} {:>3} {:>7} {:>8.2} {:>8.4} {:>8.2} {:>8}", a.lang, a.k, a.queries, a.bleu, a.meteor, a.semsim, wmd);
    }
    println!("reports written to {}", out_dir.display());
    Ok(())
}
