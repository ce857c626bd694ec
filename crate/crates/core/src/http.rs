//! Minimal HTTP abstraction shared by the tracker client and the generation
//! service client, so both run against recorded fixtures in tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<Vec<u8>>,
    pub timeout: Option<Duration>,
}

impl HttpRequest {
    pub fn get(url: impl Into<String>) -> Self {
        HttpRequest { method: Method::Get, url: url.into(), headers: Vec::new(), body: None, timeout: None }
    }

    pub fn post_json(url: impl Into<String>, body: &serde_json::Value) -> Self {
        HttpRequest {
            method: Method::Post,
            url: url.into(),
            headers: vec![("content-type".into(), "application/json".into())],
            body: Some(body.to_string().into_bytes()),
            timeout: None,
        }
    }

    pub fn header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_ascii_lowercase(), value.into()));
        self
    }

    pub fn timeout(mut self, t: Duration) -> Self {
        self.timeout = Some(t);
        self
    }

    /// Value of query parameter `name`, if present.
    pub fn query_param(&self, name: &str) -> Option<&str> {
        let (_, q) = self.url.split_once('?')?;
        q.split('&').filter_map(|kv| kv.split_once('=')).find(|(k, _)| *k == name).map(|(_, v)| v)
    }

    pub fn path(&self) -> &str {
        let no_query = self.url.split_once('?').map_or(self.url.as_str(), |(p, _)| p);
        match no_query.find("://") {
            Some(i) => {
                let rest = &no_query[i + 3..];
                rest.find('/').map_or("/", |j| &rest[j..])
            }
            None => no_query,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    /// Header names are lowercase.
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn new(status: u16, body: impl Into<Vec<u8>>) -> Self {
        HttpResponse { status, headers: BTreeMap::new(), body: body.into() }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.insert(name.to_ascii_lowercase(), value.to_string());
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(&name.to_ascii_lowercase()).map(String::as_str)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("request to {url} failed: {message}")]
    Failed { url: String, message: String },
}

/// Sends one request and returns the raw response. Non-2xx statuses are
/// responses, not errors.
pub trait HttpTransport: Send + Sync {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

#[cfg(feature = "http")]
pub use live::ReqwestTransport;

#[cfg(feature = "http")]
mod live {
    use super::*;

    /// Blocking reqwest client.
    pub struct ReqwestTransport {
        client: reqwest::blocking::Client,
    }

    impl ReqwestTransport {
        pub fn new(default_timeout: Duration) -> Result<Self, TransportError> {
            let client = reqwest::blocking::Client::builder()
                .timeout(default_timeout)
                .user_agent(concat!("clarifyd/", env!("CARGO_PKG_VERSION")))
                .build()
                .map_err(|e| TransportError::Failed { url: String::new(), message: e.to_string() })?;
            Ok(ReqwestTransport { client })
        }
    }

    impl HttpTransport for ReqwestTransport {
        fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
            let mut rb = match req.method {
                Method::Get => self.client.get(&req.url),
                Method::Post => self.client.post(&req.url),
            };
            for (k, v) in &req.headers {
                rb = rb.header(k.as_str(), v.as_str());
            }
            if let Some(t) = req.timeout {
                rb = rb.timeout(t);
            }
            if let Some(b) = &req.body {
                rb = rb.body(b.clone());
            }
            let resp = rb.send().map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout { url: req.url.clone() }
                } else {
                    TransportError::Failed { url: req.url.clone(), message: e.to_string() }
                }
            })?;
            let status = resp.status().as_u16();
            let headers = resp
                .headers()
                .iter()
                .filter_map(|(k, v)| v.to_str().ok().map(|v| (k.as_str().to_ascii_lowercase(), v.to_string())))
                .collect();
            let body = resp
                .bytes()
                .map_err(|e| TransportError::Failed { url: req.url.clone(), message: e.to_string() })?
                .to_vec();
            Ok(HttpResponse { status, headers, body })
        }
    }
}

/// Serves GET requests from recorded JSON files.
///
/// A request for path `/repos/o/r/issues` maps to `<root>/repos/o/r/issues.json`
/// for page 1 and `<root>/repos/o/r/issues.page-N.json` for page N. A missing
/// first page is a 404; a missing later page is an empty array, which ends
/// pagination. Every request is recorded.
pub struct FixtureTransport {
    root: PathBuf,
    log: Mutex<Vec<HttpRequest>>,
}

impl FixtureTransport {
    pub fn new(root: impl AsRef<Path>) -> Self {
        FixtureTransport { root: root.as_ref().to_path_buf(), log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<HttpRequest> {
        self.log.lock().expect("fixture log poisoned").clone()
    }
}

impl HttpTransport for FixtureTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.log.lock().expect("fixture log poisoned").push(req.clone());
        if req.method != Method::Get {
            return Ok(HttpResponse::new(405, "fixture transport serves GET only"));
        }
        let page: u32 = req.query_param("page").and_then(|p| p.parse().ok()).unwrap_or(1);
        let rel = req.path().trim_start_matches('/');
        let file = if page <= 1 {
            self.root.join(format!("{rel}.json"))
        } else {
            self.root.join(format!("{rel}.page-{page}.json"))
        };
        match std::fs::read(&file) {
            Ok(body) => Ok(HttpResponse::new(200, body)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if page > 1 {
                    Ok(HttpResponse::new(200, "[]"))
                } else {
                    Ok(HttpResponse::new(404, r#"{"message":"Not Found"}"#))
                }
            }
            Err(e) => Err(TransportError::Failed { url: req.url.clone(), message: e.to_string() }),
        }
    }
}
