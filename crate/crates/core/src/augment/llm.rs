//! Augmentation through an external chat-completion endpoint.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AugmentError, AugmentedDataset, Augmenter, QaPair, Result};
use crate::retriever::Document;

pub const TOKEN_ENV: &str = "AUGMENTER_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmenterEndpoint {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for AugmenterEndpoint {
    fn default() -> Self {
        AugmenterEndpoint {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "augmenter".into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl AugmenterEndpoint {
    pub fn token(&self) -> Option<String> {
        std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Unreachable(String),
    #[error("http status {0}")]
    Status(u16),
    #[error("undecodable response: {0}")]
    Decode(String),
}

/// Sends one chat request and returns the first choice's text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, endpoint: &AugmenterEndpoint, request: &ChatRequest) -> Result<String, TransportError>;
}

#[cfg(feature = "http")]
pub use http::HttpTransport;

#[cfg(feature = "http")]
mod http {
    use super::*;

    #[derive(Debug, Default, Clone, Copy)]
    pub struct HttpTransport;

    impl ChatTransport for HttpTransport {
        fn complete(&self, endpoint: &AugmenterEndpoint, request: &ChatRequest) -> Result<String, TransportError> {
            let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(endpoint.timeout_secs))).build().into();
            let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
            let mut req = agent.post(&url);
            if let Some(tok) = endpoint.token() {
                req = req.header("Authorization", &format!("Bearer {tok}"));
            }
            let resp = req.send_json(request).map_err(|e| match e {
                ureq::Error::StatusCode(code) => TransportError::Status(code),
                other => TransportError::Unreachable(other.to_string()),
            })?;
            let body: serde_json::Value = resp.into_body().read_json().map_err(|e| TransportError::Decode(e.to_string()))?;
            body["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_owned)
                .ok_or_else(|| TransportError::Decode("missing choices[0].message.content".into()))
        }
    }
}

pub fn rewrite_prompt(doc: &Document, n: usize) -> ChatRequest {
    let text = format!(
        "Rewrite the following passage {n} time(s). Every rewrite must keep all facts, names and relations of the original while changing wording and sentence order. Write each rewrite on its own single line starting with \"Rewrite <number>:\".\n\nPassage: {}",
        doc.text
    );
    chat(text)
}

pub fn qa_prompt(doc: &Document, m: usize) -> ChatRequest {
    let text = format!(
        "Based on the following passage, write {m} question-answer pairs. Each answer must be a short span stated in the passage. Reply with only a JSON array of objects with string fields \"question\" and \"answer\".\n\nPassage: {}",
        doc.text
    );
    chat(text)
}

fn chat(content: String) -> ChatRequest {
    ChatRequest { model: String::new(), messages: vec![ChatMessage { role: "user".into(), content }], temperature: 0.0 }
}

/// Lines of the form `Rewrite <i>: text`; needs at least `n`.
pub fn parse_rewrites(reply: &str, n: usize) -> Result<Vec<String>> {
    let found: Vec<String> = reply
        .lines()
        .filter_map(|line| {
            let rest = line.trim().strip_prefix("Rewrite")?;
            let (num, text) = rest.split_once(':')?;
            num.trim().parse::<usize>().ok()?;
            let text = text.trim();
            (!text.is_empty()).then(|| text.to_owned())
        })
        .collect();
    if found.len() < n {
        return Err(AugmentError::MalformedResponse(format!("expected {n} rewrites, parsed {}", found.len())));
    }
    Ok(found.into_iter().take(n).collect())
}

/// A JSON array of `{question, answer}` anywhere in the reply; needs at least `m`.
pub fn parse_qa(reply: &str, m: usize) -> Result<Vec<QaPair>> {
    let (start, end) = match (reply.find('['), reply.rfind(']')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(AugmentError::MalformedResponse("no JSON array in reply".into())),
    };
    let pairs: Vec<QaPair> = serde_json::from_str(&reply[start..=end]).map_err(|e| AugmentError::MalformedResponse(e.to_string()))?;
    let pairs: Vec<QaPair> = pairs.into_iter().filter(|p| !p.question.trim().is_empty() && !p.answer.trim().is_empty()).collect();
    if pairs.len() < m {
        return Err(AugmentError::MalformedResponse(format!("expected {m} QA pairs, parsed {}", pairs.len())));
    }
    Ok(pairs.into_iter().take(m).collect())
}

fn with_retries<T>(endpoint: &AugmenterEndpoint, transport: &dyn ChatTransport, request: &ChatRequest, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    let mut request = request.clone();
    request.model = endpoint.model.clone();
    let mut last = AugmentError::EndpointUnreachable("no attempt made".into());
    for attempt in 0..=endpoint.max_retries {
        if attempt > 0 {
            let delay = endpoint.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            thread::sleep(Duration::from_millis(delay));
        }
        last = match transport.complete(endpoint, &request) {
            Ok(reply) => match parse(&reply) {
                Ok(v) => return Ok(v),
                Err(e) => e,
            },
            Err(e) => AugmentError::EndpointUnreachable(e.to_string()),
        };
    }
    Err(last)
}

pub fn augment_llm(doc: &Document, n: usize, m: usize, endpoint: &AugmenterEndpoint, transport: &dyn ChatTransport) -> Result<AugmentedDataset> {
    super::build_dataset(doc, n, m, &LlmAugmenter { endpoint, transport })
}

/// Runs [`augment_llm`] over many documents with at most
/// `endpoint.max_in_flight` requests outstanding. Results keep input order.
pub fn augment_llm_many(docs: &[Document], n: usize, m: usize, endpoint: &AugmenterEndpoint, transport: &dyn ChatTransport) -> Vec<Result<AugmentedDataset>> {
    let width = endpoint.max_in_flight.max(1);
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(width) {
        let results: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|d| s.spawn(move || augment_llm(d, n, m, endpoint, transport))).collect();
            handles.into_iter().map(|h| h.join().expect("augmentation worker panicked")).collect()
        });
        out.extend(results);
    }
    out
}

pub struct LlmAugmenter<'a> {
    pub endpoint: &'a AugmenterEndpoint,
    pub transport: &'a dyn ChatTransport,
}

impl Augmenter for LlmAugmenter<'_> {
    fn rewrites(&self, doc: &Document, n: usize) -> Result<Vec<String>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        with_retries(self.endpoint, self.transport, &rewrite_prompt(doc, n), |r| parse_rewrites(r, n))
    }

    fn qa_pairs(&self, doc: &Document, m: usize) -> Result<Vec<QaPair>> {
        with_retries(self.endpoint, self.transport, &qa_prompt(doc, m), |r| parse_qa(r, m))
    }
}
