//! GitHub-style issues client: labeled bug reports and their comment
//! streams, over an abstract [`HttpTransport`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::corpus::{BugReport, Comment, LanguageTag};
use crate::exec::Exec;
use crate::http::{HttpRequest, HttpResponse, HttpTransport, TransportError};

pub const DEFAULT_API_BASE: &str = "https://api.github.com";
pub const PER_PAGE: usize = 30;
pub const DEFAULT_LABELS: [&str; 4] = ["bug", "crash", "defect", "needs more info"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid fetch spec: {0}")]
    InvalidSpec(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited; retry after {wait:?}")]
    RetryAfter { wait: Duration },
    #[error("credentials rejected (HTTP {status})")]
    Credential { status: u16 },
    #[error("not found: {url}")]
    NotFound { url: String },
    #[error("unexpected response from {url}: {message}")]
    Decode { url: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IssueState {
    #[default]
    Closed,
    Open,
    All,
}

impl IssueState {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueState::Closed => "closed",
            IssueState::Open => "open",
            IssueState::All => "all",
        }
    }
}

/// `owner/name` repository coordinates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RepoName {
    pub owner: String,
    pub name: String,
}

impl FromStr for RepoName {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ok_part = |p: &str| {
            !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        };
        match s.split_once('/') {
            Some((o, n)) if ok_part(o) && ok_part(n) => Ok(RepoName { owner: o.into(), name: n.into() }),
            _ => Err(IngestError::InvalidSpec(format!("repo {s:?} is not of the form owner/name"))),
        }
    }
}

impl TryFrom<String> for RepoName {
    type Error = IngestError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RepoName> for String {
    fn from(r: RepoName) -> String {
        r.to_string()
    }
}

impl fmt::Display for RepoName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.owner, self.name)
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchSpec {
    pub repo: RepoName,
    #[serde(default = "default_labels")]
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub state: IssueState,
    #[serde(default)]
    pub since: Option<DateTime<Utc>>,
    pub max_issues: usize,
    #[serde(default, skip_serializing)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub language: LanguageTag,
}

// Keep the token out of logs.
impl fmt::Debug for FetchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FetchSpec")
            .field("repo", &self.repo)
            .field("labels", &self.labels)
            .field("state", &self.state)
            .field("since", &self.since)
            .field("max_issues", &self.max_issues)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .field("language", &self.language)
            .finish()
    }
}

pub fn default_labels() -> BTreeSet<String> {
    DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
}

impl FetchSpec {
    pub fn new(repo: &str, max_issues: usize) -> Result<Self, IngestError> {
        let spec = FetchSpec {
            repo: repo.parse()?,
            labels: default_labels(),
            state: IssueState::Closed,
            since: None,
            max_issues,
            auth_token: None,
            language: LanguageTag::Other,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.max_issues == 0 {
            return Err(IngestError::InvalidSpec("max_issues must be at least 1".into()));
        }
        if self.labels.is_empty() {
            return Err(IngestError::InvalidSpec("label set is empty".into()));
        }
        Ok(())
    }

    fn wants(&self, labels: &BTreeSet<String>) -> bool {
        labels.iter().any(|l| self.labels.iter().any(|w| w.eq_ignore_ascii_case(l)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(500) }
    }
}

#[derive(Deserialize)]
struct GhUser {
    login: String,
}

#[derive(Deserialize)]
struct GhLabel {
    name: String,
}

#[derive(Deserialize)]
struct GhIssue {
    number: u64,
    title: String,
    #[serde(default)]
    body: Option<String>,
    user: GhUser,
    #[serde(default)]
    labels: Vec<GhLabel>,
    created_at: DateTime<Utc>,
    #[serde(default)]
    closed_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pull_request: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct GhComment {
    id: u64,
    user: GhUser,
    #[serde(default)]
    body: Option<String>,
    created_at: DateTime<Utc>,
}

/// Corpus id for issue `n` of `repo`.
pub fn issue_id(repo: &RepoName, number: u64) -> String {
    format!("{repo}#{number}")
}

/// Inverse of [`issue_id`].
pub fn parse_issue_id(id: &str) -> Option<(RepoName, u64)> {
    let (repo, n) = id.rsplit_once('#')?;
    Some((repo.parse().ok()?, n.parse().ok()?))
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Issues client. Cheap to share across threads; the rate-limit throttle is
/// a single atomic deadline (unix seconds) seen by every caller.
pub struct IssueClient {
    transport: Arc<dyn HttpTransport>,
    base_url: String,
    token: Option<String>,
    retry: RetryPolicy,
    throttle_until: AtomicU64,
}

impl IssueClient {
    pub fn new(transport: Arc<dyn HttpTransport>, base_url: impl Into<String>) -> Self {
        IssueClient {
            transport,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            token: None,
            retry: RetryPolicy::default(),
            throttle_until: AtomicU64::new(0),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token.filter(|t| !t.is_empty());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn check_throttle(&self) -> Result<(), IngestError> {
        let until = self.throttle_until.load(Ordering::Acquire);
        let now = now_secs();
        if until > now {
            return Err(IngestError::RetryAfter { wait: Duration::from_secs(until - now) });
        }
        Ok(())
    }

    fn rate_limit_wait(resp: &HttpResponse) -> Option<Duration> {
        let limited = resp.status == 429
            || (resp.status == 403 && (resp.header("x-ratelimit-remaining") == Some("0") || resp.header("retry-after").is_some()));
        if !limited {
            return None;
        }
        if let Some(secs) = resp.header("retry-after").and_then(|v| v.trim().parse::<u64>().ok()) {
            return Some(Duration::from_secs(secs));
        }
        let reset = resp.header("x-ratelimit-reset").and_then(|v| v.trim().parse::<u64>().ok());
        Some(Duration::from_secs(reset.map_or(60, |r| r.saturating_sub(now_secs()))))
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, url: &str, token: Option<&str>) -> Result<T, IngestError> {
        self.check_throttle()?;
        let mut req = HttpRequest::get(url).header("accept", "application/vnd.github+json");
        if let Some(t) = token.or(self.token.as_deref()) {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let failure = match self.transport.send(&req) {
                Ok(resp) if resp.is_success() => {
                    return serde_json::from_slice(&resp.body)
                        .map_err(|e| IngestError::Decode { url: url.to_string(), message: e.to_string() });
                }
                Ok(resp) => {
                    if let Some(wait) = Self::rate_limit_wait(&resp) {
                        self.throttle_until.fetch_max(now_secs() + wait.as_secs(), Ordering::AcqRel);
                        warn!(url, ?wait, "rate limited");
                        return Err(IngestError::RetryAfter { wait });
                    }
                    match resp.status {
                        401 | 403 => return Err(IngestError::Credential { status: resp.status }),
                        404 | 410 => return Err(IngestError::NotFound { url: url.to_string() }),
                        s if s >= 500 => format!("HTTP {s}"),
                        s => {
                            return Err(IngestError::Transport {
                                attempts: attempt,
                                message: format!("HTTP {s}: {}", String::from_utf8_lossy(&resp.body)),
                            })
                        }
                    }
                }
                Err(e @ TransportError::Timeout { .. }) | Err(e @ TransportError::Failed { .. }) => e.to_string(),
            };
            if attempt > self.retry.max_retries {
                return Err(IngestError::Transport { attempts: attempt, message: failure });
            }
            let delay = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
            debug!(url, attempt, ?delay, %failure, "retrying");
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
        }
    }

    fn issues_url(&self, spec: &FetchSpec, page: usize) -> String {
        let mut url = format!(
            "{}/repos/{}/issues?state={}&per_page={PER_PAGE}&page={page}",
            self.base_url,
            spec.repo,
            spec.state.as_str()
        );
        // The API treats a labels list as a conjunction; a single label can
        // be filtered server-side, several are filtered here.
        if spec.labels.len() == 1 {
            let l = spec.labels.iter().next().expect("one label");
            url.push_str("&labels=");
            url.push_str(&encode(l));
        }
        if let Some(since) = spec.since {
            url.push_str("&since=");
            url.push_str(&encode(&since.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)));
        }
        url
    }

    /// Fetches issues carrying at least one of `spec.labels`, following
    /// pagination until `max_issues` are collected or pages run out. Pull
    /// requests are skipped.
    pub fn fetch_issues(&self, spec: &FetchSpec) -> Result<Vec<BugReport>, IngestError> {
        spec.validate()?;
        let mut out = Vec::new();
        let mut page = 1;
        loop {
            let url = self.issues_url(spec, page);
            let items: Vec<GhIssue> = self.get_json(&url, spec.auth_token.as_deref())?;
            let n_items = items.len();
            for it in items {
                if it.pull_request.is_some() {
                    continue;
                }
                let labels: BTreeSet<String> = it.labels.into_iter().map(|l| l.name).collect();
                if !spec.wants(&labels) {
                    continue;
                }
                out.push(BugReport {
                    id: issue_id(&spec.repo, it.number),
                    repo: spec.repo.to_string(),
                    title: it.title,
                    description: it.body.unwrap_or_default(),
                    followup_question: None,
                    ca1: None,
                    ca2: None,
                    ca3: None,
                    labels,
                    author: it.user.login,
                    created_at: it.created_at,
                    closed_at: it.closed_at,
                    language_tag: spec.language,
                });
                if out.len() >= spec.max_issues {
                    return Ok(out);
                }
            }
            if n_items < PER_PAGE {
                return Ok(out);
            }
            page += 1;
        }
    }

    /// Comments of one issue, sorted ascending by time. Equal timestamps
    /// keep API order.
    pub fn fetch_comments(&self, repo: &RepoName, number: u64) -> Result<Vec<Comment>, IngestError> {
        let id = issue_id(repo, number);
        let mut out = Vec::new();
        let mut page = 1;
        loop {
            let url = format!("{}/repos/{repo}/issues/{number}/comments?per_page={PER_PAGE}&page={page}", self.base_url);
            let items: Vec<GhComment> = self.get_json(&url, None)?;
            let n_items = items.len();
            out.extend(items.into_iter().map(|c| Comment {
                comment_id: c.id.to_string(),
                issue_id: id.clone(),
                author: c.user.login,
                body: c.body.unwrap_or_default(),
                time: c.created_at,
            }));
            if n_items < PER_PAGE {
                break;
            }
            page += 1;
        }
        out.sort_by_key(|c| c.time);
        Ok(out)
    }

    /// Comment streams for several issues, fetched concurrently under
    /// `exec`. Results are in input order.
    pub fn fetch_comments_many(
        &self,
        repo: &RepoName,
        numbers: &[u64],
        exec: Exec,
    ) -> Vec<Result<Vec<Comment>, IngestError>> {
        exec.map(numbers, |&n| self.fetch_comments(repo, n))
    }
}

fn encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}
