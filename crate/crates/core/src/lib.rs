//! Recommends and generates answers to follow-up questions on deficient bug
//! reports.
//!
//! Candidate answers mined from historical issue threads are scored against
//! an incoming report with component-wise BM25 relevance, re-ranked by
//! word-embedding similarity to the question, and handed as context to a
//! pluggable generation backend. The [`metrics`] module evaluates generated
//! answers against accepted ones.

pub mod corpus;
pub mod exec;
pub mod genctx;
pub mod http;
pub mod ingest;
pub mod metrics;
pub mod mine;
pub mod pipeline;
pub mod rerank;
pub mod retrieval;
pub mod textprep;
