//! Sequential vs rayon-parallel execution for candidate ranking and batch
//! evaluation. Without the `parallel` feature both variants run sequentially.

use std::sync::Arc;

use chrono::{TimeZone, Utc};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clarifyd_core::corpus::{BugReport, Corpus, HeldoutItem, LanguageTag};
use clarifyd_core::exec::Exec;
use clarifyd_core::genctx::ExtractiveFallback;
use clarifyd_core::metrics::{MetricContext, Smoothing, WordVectorEmbedder};
use clarifyd_core::pipeline::{Engine, EngineConfig};
use clarifyd_core::rerank::EmbeddingStore;
use clarifyd_core::retrieval::{build_index, Aggregation, QueryBundle};
use clarifyd_core::textprep::Analyzer;

const VOCAB: usize = 400;

fn text(rng: &mut ChaCha8Rng, vocab: &[String], n: usize) -> String {
    (0..n).map(|_| vocab.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
}

fn report(rng: &mut ChaCha8Rng, vocab: &[String], id: String) -> BugReport {
    BugReport {
        id,
        repo: "acme/widget".into(),
        title: text(rng, vocab, 6),
        description: text(rng, vocab, 40),
        followup_question: Some(text(rng, vocab, 8)),
        ca1: Some(text(rng, vocab, 12)),
        ca2: Some(text(rng, vocab, 12)),
        ca3: Some(text(rng, vocab, 12)),
        labels: Default::default(),
        author: "reporter".into(),
        created_at: Utc.timestamp_opt(1_600_000_000, 0).unwrap(),
        closed_at: None,
        language_tag: LanguageTag::Python,
    }
}

struct Setup {
    corpus: Corpus,
    queries: Vec<BugReport>,
    store: Arc<EmbeddingStore>,
}

fn setup(entries: usize, queries: usize) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vocab: Vec<String> = (0..VOCAB).map(|i| format!("w{i}")).collect();
    let corpus = Corpus::new((0..entries).map(|i| report(&mut rng, &vocab, format!("e{i}"))).collect()).unwrap();
    let queries = (0..queries).map(|i| report(&mut rng, &vocab, format!("q{i}"))).collect();
    let mut store = EmbeddingStore::new(32);
    for w in &vocab {
        let v: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.insert(w, &v).unwrap();
    }
    Setup { corpus, queries, store: Arc::new(store) }
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn rank_candidates(c: &mut Criterion) {
    let s = setup(2000, 1);
    let index = build_index(&s.corpus).unwrap();
    let bundle = QueryBundle::from_report(&s.queries[0], &Analyzer::default());
    let mut group = c.benchmark_group("rank_candidates_2000");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| index.rank_candidates(&bundle, &s.corpus, 10, Aggregation::DoubleLoop, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let s = setup(500, 32);
    let heldout: Vec<HeldoutItem> =
        s.queries.iter().map(|q| HeldoutItem { report: q.clone(), gold: q.ca1.clone() }).collect();
    let embedder = WordVectorEmbedder::new(s.store.clone());
    let mc = MetricContext { store: &s.store, embedder: &embedder, smoothing: Smoothing::AddOne, relaxed_wmd: false };
    let mut group = c.benchmark_group("evaluate_32_queries");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = EngineConfig { exec, ..EngineConfig::default() };
        let engine = Engine::new(s.corpus.clone(), build_index(&s.corpus).unwrap(), s.store.clone(), cfg).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| engine.evaluate(&heldout, &[1, 3, 5], &ExtractiveFallback, &mc).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, rank_candidates, evaluation);
criterion_main!(benches);
