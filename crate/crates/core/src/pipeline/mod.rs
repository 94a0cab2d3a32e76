//! Online retrieve / update / generate.
//!
//! A [`Pipeline`] owns the frozen base, the document corpus with its BM25
//! index and, optionally, the parametric corpus. [`Pipeline::answer`] never
//! mutates any of them: merged deltas live only for the duration of a call.

pub mod prompt;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{apply, merge, AdapterConfig, AdapterError};
use crate::model::{generate_greedy, EffectiveWeights, ModelError, ModelParams};
use crate::retriever::{Corpus, InvertedIndex, RetrievalResult};
use crate::store::{ParametricCorpus, StoreError};
use crate::text::{decode_lossy, TokenId, EOS};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedBook,
    InContext,
    InContextAugmented,
    Parametric,
    Combined,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::ClosedBook, Mode::InContext, Mode::InContextAugmented, Mode::Parametric, Mode::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ClosedBook => "closed_book",
            Mode::InContext => "in_context",
            Mode::InContextAugmented => "in_context_augmented",
            Mode::Parametric => "parametric",
            Mode::Combined => "combined",
        }
    }

    pub fn retrieves(self) -> bool {
        self != Mode::ClosedBook
    }

    /// Modes that put retrieved documents in the prompt.
    pub fn uses_passages(self) -> bool {
        matches!(self, Mode::InContext | Mode::InContextAugmented | Mode::Combined)
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Mode::Parametric | Mode::Combined)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| PipelineError::UnknownMode(s.to_owned()))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown mode {0:?} (expected one of closed_book, in_context, in_context_augmented, parametric, combined)")]
    UnknownMode(String),
    #[error("prompt of {len} tokens plus {budget} generated tokens exceeds max_seq_len {max}")]
    Overlong { len: usize, budget: usize, max: usize },
    #[error("k must be at least 1 for retrieval modes")]
    InvalidK,
    #[error("mode {0} does not take documents in the prompt")]
    UnexpectedDocs(Mode),
    #[error("mode {0} needs a parametric corpus")]
    NoStore(Mode),
    #[error("retrieved doc {0:016x} is not in the corpus")]
    UnknownDoc(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Why a query was answered differently from its mode's nominal recipe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fallback {
    /// Retrieval returned nothing; answered closed-book.
    NoDocuments,
    /// These documents had no stored adapter and were placed in the prompt instead.
    MissingAdapters { doc_ids: Vec<u64> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub retrieve_ms: f64,
    pub update_ms: f64,
    pub generate_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub answer: String,
    pub mode: Mode,
    pub retrieved: RetrievalResult,
    pub merged_doc_ids: Vec<u64>,
    /// Documents rendered as passages, in prompt order.
    pub passage_doc_ids: Vec<u64>,
    pub prompt_token_count: usize,
    pub generated_token_count: usize,
    pub timing: Timing,
    pub fallback: Option<Fallback>,
}

/// Prompt for `mode`. Closed-book and parametric prompts take no passages.
/// Fails when the prompt plus `gen_budget` new tokens would not fit in `max_seq_len`.
pub fn build_prompt(mode: Mode, question: &str, docs: &[&str], max_seq_len: usize, gen_budget: usize) -> Result<Vec<TokenId>> {
    if !mode.uses_passages() && !docs.is_empty() {
        return Err(PipelineError::UnexpectedDocs(mode));
    }
    checked_prompt(question, docs, max_seq_len, gen_budget)
}

fn checked_prompt(question: &str, passages: &[&str], max_seq_len: usize, gen_budget: usize) -> Result<Vec<TokenId>> {
    let ids = prompt::prompt_ids(question, passages.iter().copied());
    if ids.len() + gen_budget > max_seq_len {
        return Err(PipelineError::Overlong { len: ids.len(), budget: gen_budget, max: max_seq_len });
    }
    Ok(ids)
}

/// Generated text up to (excluding) EOS, trimmed.
pub fn decode_answer(generated: &[TokenId]) -> String {
    let end = generated.iter().position(|&t| t == EOS).unwrap_or(generated.len());
    decode_lossy(&generated[..end]).trim().to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub max_new_tokens: usize,
    /// Used for merging; only `normalize_merge` matters here.
    pub adapter: AdapterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { max_new_tokens: DEFAULT_MAX_NEW_TOKENS, adapter: AdapterConfig::default() }
    }
}

/// Anything that can answer a question under a mode; the benchmark runner
/// only needs this.
pub trait Answerer: Sync {
    fn answer(&self, question: &str, mode: Mode, k: usize) -> Result<QueryResult>;
}

#[derive(Debug)]
pub struct Pipeline {
    base: ModelParams,
    corpus: Corpus,
    index: InvertedIndex,
    store: Option<ParametricCorpus>,
    config: PipelineConfig,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Pipeline {
    pub fn new(base: ModelParams, corpus: Corpus, index: InvertedIndex, store: Option<ParametricCorpus>, config: PipelineConfig) -> Self {
        Pipeline { base, corpus, index, store, config }
    }

    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn store(&self) -> Option<&ParametricCorpus> {
        self.store.as_ref()
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn doc_text(&self, id: u64) -> Result<&str> {
        self.corpus.get(id).map(|d| d.text.as_str()).ok_or(PipelineError::UnknownDoc(id))
    }

    /// Passage texts for `ids`: each document, followed in augmented mode by
    /// its stored rewrites and QA pairs.
    fn passages(&self, ids: &[u64], augmented: bool) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            out.push(self.doc_text(id)?.to_owned());
            if !augmented {
                continue;
            }
            if let Some(ds) = self.store.as_ref().map(|s| s.get_dataset(id)).transpose()?.flatten() {
                out.extend(ds.rewrites.iter().skip(1).cloned());
                out.extend(ds.qa_pairs.iter().map(|qa| format!("{} {}", qa.question.trim(), qa.answer.trim())));
            }
        }
        Ok(out)
    }

    fn generate(&self, weights: &EffectiveWeights<'_>, prompt: &[TokenId]) -> Result<(String, usize)> {
        let seq = generate_greedy(weights, prompt, self.config.max_new_tokens)?;
        let generated = &seq[prompt.len()..];
        Ok((decode_answer(generated), generated.len()))
    }

    pub fn answer(&self, question: &str, mode: Mode, k: usize) -> Result<QueryResult> {
        if mode.retrieves() && k == 0 {
            return Err(PipelineError::InvalidK);
        }
        if mode.uses_adapters() && self.store.is_none() {
            return Err(PipelineError::NoStore(mode));
        }
        let max_len = self.base.config().max_seq_len;
        let budget = self.config.max_new_tokens;
        let mut timing = Timing::default();

        let t = Instant::now();
        let retrieved = if mode.retrieves() { self.index.retrieve_top_k(question, k) } else { RetrievalResult::default() };
        timing.retrieve_ms = ms_since(t);

        if mode.retrieves() && retrieved.is_empty() {
            let prompt = checked_prompt(question, &[], max_len, budget)?;
            let t = Instant::now();
            let (answer, generated) = self.generate(&EffectiveWeights::base_only(&self.base), &prompt)?;
            timing.generate_ms = ms_since(t);
            return Ok(QueryResult {
                answer,
                mode,
                retrieved,
                merged_doc_ids: Vec::new(),
                passage_doc_ids: Vec::new(),
                prompt_token_count: prompt.len(),
                generated_token_count: generated,
                timing,
                fallback: Some(Fallback::NoDocuments),
            });
        }

        let ids = retrieved.ids();
        let t = Instant::now();
        let (delta, merged_doc_ids, missing) = if mode.uses_adapters() {
            let store = self.store.as_ref().expect("checked above");
            let fetched = store.get_many(&ids)?;
            let delta = if fetched.adapters.is_empty() { None } else { Some(merge(&fetched.adapters, &self.config.adapter)?) };
            let merged: Vec<u64> = fetched.adapters.iter().map(|a| a.doc_id).collect();
            (delta, merged, fetched.missing)
        } else {
            (None, Vec::new(), Vec::new())
        };
        let weights = match &delta {
            Some(d) => apply(&self.base, d)?,
            None => EffectiveWeights::base_only(&self.base),
        };
        if mode.uses_adapters() {
            timing.update_ms = ms_since(t);
        }

        let passage_doc_ids: Vec<u64> = match mode {
            Mode::InContext | Mode::InContextAugmented | Mode::Combined => ids.clone(),
            Mode::Parametric => missing.clone(),
            Mode::ClosedBook => Vec::new(),
        };
        let passages = self.passages(&passage_doc_ids, mode == Mode::InContextAugmented)?;
        let refs: Vec<&str> = passages.iter().map(String::as_str).collect();
        let prompt = checked_prompt(question, &refs, max_len, budget)?;

        let t = Instant::now();
        let (answer, generated) = self.generate(&weights, &prompt)?;
        timing.generate_ms = ms_since(t);

        let fallback = (!missing.is_empty()).then_some(Fallback::MissingAdapters { doc_ids: missing });
        Ok(QueryResult {
            answer,
            mode,
            retrieved,
            merged_doc_ids,
            passage_doc_ids,
            prompt_token_count: prompt.len(),
            generated_token_count: generated,
            timing,
            fallback,
        })
    }
}

impl Answerer for Pipeline {
    fn answer(&self, question: &str, mode: Mode, k: usize) -> Result<QueryResult> {
        Pipeline::answer(self, question, mode, k)
    }
}
