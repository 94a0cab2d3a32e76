//! Document augmentation: rewrites plus QA pairs, crossed into the training
//! set of one document.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retriever::Document;

pub mod llm;
pub mod mix;
pub mod world;

pub use llm::{augment_llm, AugmenterEndpoint, ChatMessage, ChatRequest, ChatTransport, LlmAugmenter, TransportError};
pub use mix::{pretraining_text, warmup_qa, PretrainMix};
pub use world::{extract_triples, gen_synthetic_corpus, gen_world, FactTriple, Partition, SyntheticCorpus, SyntheticDoc};

use world::{answer_for, doc_rng, relation, render, sentences};

pub const DEFAULT_REWRITES: usize = 1;
pub const DEFAULT_QA_PAIRS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("document encodes no recognizable facts")]
    InsufficientFacts,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("augmenter endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("malformed augmenter response: {0}")]
    MalformedResponse(String),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

impl QaPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        QaPair { question: question.into(), answer: answer.into() }
    }
}

/// One document's training set. `rewrites[0]` is the original text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedDataset {
    pub doc_id: u64,
    pub rewrites: Vec<String>,
    pub qa_pairs: Vec<QaPair>,
}

/// A (document variant, question, answer) training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple<'a> {
    pub rewrite: usize,
    pub qa: usize,
    pub doc: &'a str,
    pub question: &'a str,
    pub answer: &'a str,
}

impl AugmentedDataset {
    pub fn new(doc_id: u64, rewrites: Vec<String>, qa_pairs: Vec<QaPair>) -> Result<Self> {
        if rewrites.is_empty() {
            return Err(AugmentError::InvalidRequest("at least the original text is required".into()));
        }
        if rewrites.iter().any(|r| r.trim().is_empty()) {
            return Err(AugmentError::InvalidRequest("empty rewrite".into()));
        }
        if qa_pairs.iter().any(|p| p.answer.trim().is_empty() || p.question.trim().is_empty()) {
            return Err(AugmentError::InvalidRequest("empty question or answer".into()));
        }
        Ok(AugmentedDataset { doc_id, rewrites, qa_pairs })
    }

    /// Number of rewrites excluding the original.
    pub fn n(&self) -> usize {
        self.rewrites.len() - 1
    }

    pub fn m(&self) -> usize {
        self.qa_pairs.len()
    }

    /// Cross product, rewrite-major.
    pub fn triples(&self) -> Vec<Triple<'_>> {
        let mut out = Vec::with_capacity(self.rewrites.len() * self.qa_pairs.len());
        for (k, d) in self.rewrites.iter().enumerate() {
            for (j, qa) in self.qa_pairs.iter().enumerate() {
                out.push(Triple { rewrite: k, qa: j, doc: d, question: &qa.question, answer: &qa.answer });
            }
        }
        out
    }
}

/// `n` paraphrases preserving every stated fact. Text without recognizable
/// facts falls back to sentence-order permutations.
pub fn rewrite_rule_based(doc: &Document, n: usize, seed: u64) -> Vec<String> {
    let triples = extract_triples(&doc.text);
    (0..n)
        .map(|k| {
            let mut rng = doc_rng(seed, doc.id, "rewrite", k as u64);
            if triples.is_empty() {
                let mut sents = sentences(&doc.text);
                sents.shuffle(&mut rng);
                return sents.join(" ");
            }
            let mut order = triples.clone();
            order.shuffle(&mut rng);
            order
                .iter()
                .map(|t| {
                    let r = relation(&t.relation).expect("extracted relations are known");
                    // any template but the first, which the generator uses for originals
                    render(r.statements[rng.random_range(1..r.statements.len())], t)
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

const VARIANT_PREFIXES: &[&str] = &["", "Quick question: ", "Tell me: ", "Please answer: "];

/// `m` question/answer pairs from training templates. Pairs are dealt
/// round-robin over facts in seeded order, the i-th fact starting at its i-th
/// template; once every (fact, template) combination is used,
/// later rounds add a prefix so each pair stays distinct.
pub fn gen_qa_rule_based(doc: &Document, m: usize, seed: u64) -> Result<Vec<QaPair>> {
    let triples = extract_triples(&doc.text);
    if triples.is_empty() {
        return Err(AugmentError::InsufficientFacts);
    }
    let mut order = triples;
    if order.len() > 1 {
        order.shuffle(&mut doc_rng(seed, doc.id, "qa", 0));
    }
    let mut out = Vec::with_capacity(m);
    let mut round = 0usize;
    while out.len() < m {
        for (off, t) in order.iter().enumerate() {
            if out.len() == m {
                break;
            }
            let r = relation(&t.relation).expect("extracted relations are known");
            let tpl = r.questions[(off + round) % r.questions.len()];
            let variant = round / r.questions.len();
            let prefix = match VARIANT_PREFIXES.get(variant) {
                Some(p) => p.to_string(),
                None => format!("Variant {variant}: "),
            };
            out.push(QaPair { question: format!("{prefix}{}", render(tpl, t)), answer: answer_for(tpl, t).to_owned() });
        }
        round += 1;
    }
    Ok(out)
}

/// Source of rewrites and QA pairs for one document.
pub trait Augmenter {
    fn rewrites(&self, doc: &Document, n: usize) -> Result<Vec<String>>;
    fn qa_pairs(&self, doc: &Document, m: usize) -> Result<Vec<QaPair>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RuleBased {
    pub seed: u64,
}

impl Augmenter for RuleBased {
    fn rewrites(&self, doc: &Document, n: usize) -> Result<Vec<String>> {
        Ok(rewrite_rule_based(doc, n, self.seed))
    }

    fn qa_pairs(&self, doc: &Document, m: usize) -> Result<Vec<QaPair>> {
        gen_qa_rule_based(doc, m, self.seed)
    }
}

/// Original plus `n` rewrites, crossed with `m` QA pairs.
pub fn build_dataset(doc: &Document, n: usize, m: usize, augmenter: &dyn Augmenter) -> Result<AugmentedDataset> {
    if m == 0 {
        return Err(AugmentError::InvalidRequest("m must be >= 1".into()));
    }
    let rewrites = augmenter.rewrites(doc, n)?;
    let qa = augmenter.qa_pairs(doc, m)?;
    if rewrites.len() != n || qa.len() != m {
        return Err(AugmentError::MalformedResponse(format!("expected {n} rewrites and {m} pairs, got {} and {}", rewrites.len(), qa.len())));
    }
    let mut all = Vec::with_capacity(n + 1);
    all.push(doc.text.clone());
    all.extend(rewrites);
    AugmentedDataset::new(doc.id, all, qa)
}

#[cfg(test)]
mod tests;
