//! Generator contexts and generation backends.
//!
//! A context holds one retrieved answer with its source report, optionally
//! followed by the deficient report. Backends turn (question, context) into
//! an answer; [`ServiceBackend`] talks to the generation service over HTTP
//! and [`ExtractiveFallback`] returns the retrieved answer verbatim.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::{BugReport, Slot};
use crate::http::{HttpRequest, HttpTransport};
use crate::metrics::{MetricError, SentenceEmbedder};
use crate::retrieval::RankedAnswer;

pub const DEFAULT_MAX_CHARS: usize = 4000;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 128;
const SEPARATOR: &str = "\n";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("generation request failed: {0}")]
    Transport(String),
    #[error("generation service returned HTTP {status}: {message}")]
    Service { status: u16, message: String },
    #[error("malformed service response: {0}")]
    Decode(String),
    #[error("generation failed for {} context(s): {}", causes.len(), causes.join("; "))]
    Failed { causes: Vec<String> },
}

/// Context 1 carries the retrieved answer and its source report; Context 2
/// appends the deficient report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ContextMode {
    #[default]
    One,
    Two,
}

impl TryFrom<u8> for ContextMode {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(ContextMode::One),
            2 => Ok(ContextMode::Two),
            _ => Err(format!("context mode must be 1 or 2, got {v}")),
        }
    }
}

impl From<ContextMode> for u8 {
    fn from(m: ContextMode) -> u8 {
        match m {
            ContextMode::One => 1,
            ContextMode::Two => 2,
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    RetrievedAnswer,
    SourceTitle,
    SourceDescription,
    DeficientTitle,
    DeficientDescription,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: SegmentLabel,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub mode: ContextMode,
    pub question: String,
    pub segments: Vec<Segment>,
    pub max_chars: usize,
    /// The retrieved answer before any truncation.
    pub retrieved_answer: String,
    pub source_id: String,
    pub slot: Slot,
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn rendered_len(segments: &[Segment]) -> usize {
    let lens: Vec<usize> = segments.iter().map(|s| char_len(&s.text)).filter(|&n| n > 0).collect();
    lens.iter().sum::<usize>() + lens.len().saturating_sub(1) * SEPARATOR.len()
}

fn cut_tail(s: &mut String, keep_chars: usize) {
    if let Some((i, _)) = s.char_indices().nth(keep_chars) {
        s.truncate(i);
    }
}

impl Context {
    /// Non-empty segment texts joined by newlines.
    pub fn render(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(SEPARATOR)
    }

    pub fn segment(&self, label: SegmentLabel) -> Option<&Segment> {
        self.segments.iter().find(|s| s.label == label)
    }

    pub fn includes_deficient(&self) -> bool {
        self.mode == ContextMode::Two
    }
}

/// Shrinks `segments` until the rendering fits in `max_chars` characters.
/// The longest segment other than the retrieved answer loses characters
/// from its tail first; the answer is cut only when nothing else is left.
fn truncate(segments: &mut [Segment], max_chars: usize) {
    while rendered_len(segments) > max_chars {
        let excess = rendered_len(segments) - max_chars;
        let victim = segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label != SegmentLabel::RetrievedAnswer && !s.text.is_empty())
            .max_by_key(|(i, s)| (char_len(&s.text), std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
            .or_else(|| segments.iter().position(|s| !s.text.is_empty()));
        let Some(i) = victim else { break };
        let len = char_len(&segments[i].text);
        cut_tail(&mut segments[i].text, len.saturating_sub(excess));
    }
}

/// Builds the context for one ranked answer. Segments are the retrieved
/// answer, the source title and description, then (mode 2) the deficient
/// title and description.
pub fn build_context(
    mode: ContextMode,
    question: &str,
    deficient: &BugReport,
    top: &RankedAnswer,
    source: &BugReport,
    max_chars: usize,
) -> Context {
    let seg = |label, text: &str| Segment { label, text: text.trim().to_string() };
    let mut segments = vec![
        seg(SegmentLabel::RetrievedAnswer, &top.text),
        seg(SegmentLabel::SourceTitle, &source.title),
        seg(SegmentLabel::SourceDescription, &source.description),
    ];
    if mode == ContextMode::Two {
        segments.push(seg(SegmentLabel::DeficientTitle, &deficient.title));
        segments.push(seg(SegmentLabel::DeficientDescription, &deficient.description));
    }
    truncate(&mut segments, max_chars);
    Context {
        mode,
        question: question.to_string(),
        segments,
        max_chars,
        retrieved_answer: top.text.clone(),
        source_id: top.entry_id.clone(),
        slot: top.slot,
    }
}

pub trait GenerationBackend: Send + Sync {
    /// Identifies the backend and, for services, the model weights.
    fn tag(&self) -> String;
    fn generate(&self, question: &str, context: &Context) -> Result<String, GenError>;
}

/// Returns the retrieved answer unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtractiveFallback;

impl GenerationBackend for ExtractiveFallback {
    fn tag(&self) -> String {
        "extractive-fallback".into()
    }

    fn generate(&self, _question: &str, context: &Context) -> Result<String, GenError> {
        Ok(context.retrieved_answer.clone())
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    question: &'a str,
    context: &'a str,
    max_new_tokens: u32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    answer: String,
    model_tag: String,
    #[allow(dead_code)]
    latency_ms: u64,
}

fn service_error(status: u16, body: &[u8]) -> GenError {
    let body = String::from_utf8_lossy(body);
    let message = serde_json::from_str::<serde_json::Value>(&body)
        .ok()
        .and_then(|v| v.get("detail").or_else(|| v.get("error")).map(|d| d.to_string()))
        .unwrap_or_else(|| body.chars().take(200).collect());
    GenError::Service { status, message }
}

/// Client for the generation service's `POST /generate`.
pub struct ServiceBackend {
    transport: Arc<dyn HttpTransport>,
    base_url: String,
    timeout: Duration,
    max_new_tokens: u32,
    model_tag: Mutex<Option<String>>,
}

impl ServiceBackend {
    pub fn new(transport: Arc<dyn HttpTransport>, base_url: impl Into<String>) -> Self {
        ServiceBackend {
            transport,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout: DEFAULT_TIMEOUT,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            model_tag: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_new_tokens(mut self, n: u32) -> Self {
        self.max_new_tokens = n;
        self
    }
}

impl GenerationBackend for ServiceBackend {
    fn tag(&self) -> String {
        let model = self.model_tag.lock().expect("model tag lock").clone();
        format!("service:{}", model.unwrap_or_else(|| self.base_url.clone()))
    }

    fn generate(&self, question: &str, context: &Context) -> Result<String, GenError> {
        let rendered = context.render();
        let body = serde_json::to_value(GenerateRequest { question, context: &rendered, max_new_tokens: self.max_new_tokens })
            .map_err(|e| GenError::Decode(e.to_string()))?;
        let req = HttpRequest::post_json(format!("{}/generate", self.base_url), &body).timeout(self.timeout);
        let resp = self.transport.send(&req).map_err(|e| GenError::Transport(e.to_string()))?;
        if !resp.is_success() {
            return Err(service_error(resp.status, &resp.body));
        }
        let parsed: GenerateResponse = serde_json::from_slice(&resp.body).map_err(|e| GenError::Decode(e.to_string()))?;
        *self.model_tag.lock().expect("model tag lock") = Some(parsed.model_tag);
        Ok(parsed.answer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAnswer {
    pub text: String,
    pub backend: String,
    /// Set when the backend failed and the retrieved answer was used.
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationOptions {
    /// Substitute the retrieved answer for failed backend calls.
    pub fallback: bool,
    /// Maximum concurrent backend calls.
    pub parallelism: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions { fallback: true, parallelism: 4 }
    }
}

/// Generates one answer per context for the first `k` contexts, in order.
pub fn generate_answers(
    question: &str,
    contexts: &[Context],
    backend: &dyn GenerationBackend,
    k: usize,
    opts: GenerationOptions,
) -> Result<Vec<GeneratedAnswer>, GenError> {
    let contexts = &contexts[..k.min(contexts.len())];
    let results = run_bounded(contexts, opts.parallelism, |c| backend.generate(question, c));
    let tag = backend.tag();
    let mut out = Vec::with_capacity(results.len());
    let mut causes = Vec::new();
    for (i, (c, r)) in contexts.iter().zip(results).enumerate() {
        match r {
            Ok(text) => out.push(GeneratedAnswer { text, backend: tag.clone(), fallback_reason: None }),
            Err(e) if opts.fallback => {
                warn!(context = i, error = %e, "backend failed; using retrieved answer");
                out.push(GeneratedAnswer {
                    text: c.retrieved_answer.clone(),
                    backend: ExtractiveFallback.tag(),
                    fallback_reason: Some(e.to_string()),
                });
            }
            Err(e) => causes.push(format!("context {}: {e}", i + 1)),
        }
    }
    if !causes.is_empty() {
        return Err(GenError::Failed { causes });
    }
    Ok(out)
}

/// Maps `f` over `items` on at most `parallelism` threads, keeping order.
fn run_bounded<T: Sync, R: Send>(items: &[T], parallelism: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = parallelism.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().expect("slot lock") = Some(f(&items[i]));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

/// Sentence embeddings from the service's `POST /embed`.
pub struct ServiceEmbedder {
    transport: Arc<dyn HttpTransport>,
    base_url: String,
    timeout: Duration,
}

impl ServiceEmbedder {
    pub fn new(transport: Arc<dyn HttpTransport>, base_url: impl Into<String>) -> Self {
        ServiceEmbedder { transport, base_url: base_url.into().trim_end_matches('/').to_string(), timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl SentenceEmbedder for ServiceEmbedder {
    fn name(&self) -> String {
        format!("service:{}/embed", self.base_url)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MetricError> {
        let err = |message: String| MetricError::Provider { provider: self.name(), message };
        let body = serde_json::to_value(EmbedRequest { texts }).map_err(|e| err(e.to_string()))?;
        let req = HttpRequest::post_json(format!("{}/embed", self.base_url), &body).timeout(self.timeout);
        let resp = self.transport.send(&req).map_err(|e| err(e.to_string()))?;
        if !resp.is_success() {
            return Err(err(service_error(resp.status, &resp.body).to_string()));
        }
        let parsed: EmbedResponse = serde_json::from_slice(&resp.body).map_err(|e| err(e.to_string()))?;
        if parsed.vectors.len() != texts.len() {
            return Err(err(format!("{} vectors for {} texts", parsed.vectors.len(), texts.len())));
        }
        if parsed.vectors.iter().any(|v| v.len() != parsed.dim) {
            return Err(err(format!("vector length differs from dim {}", parsed.dim)));
        }
        Ok(parsed.vectors)
    }
}
