//! Browser bindings for three small demos: the per-document cost
//! calculator, BM25 search over a generated corpus, and the answer scorer.
//!
//! Every binding returns a JSON string. The plain functions underneath are
//! what the native tests exercise.

use prag_core::augment::gen_synthetic_corpus;
use prag_core::eval::{exact_match, f1, normalize_answer};
use prag_core::retriever::{build_index, id_hex, Corpus, InvertedIndex, DEFAULT_B, DEFAULT_K1};
use prag_core::store::{compute_cost_estimate, online_saving_estimate, storage_estimate, ComputeCost, OnlineSaving, StorageEstimate};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct CostReport {
    pub storage: StorageEstimate,
    pub megabytes: f64,
    pub compute: ComputeCost,
    pub online: OnlineSaving,
}

#[allow(clippy::too_many_arguments)]
pub fn cost_report(layers: u32, hidden: u32, ffn: u32, rank: u32, bytes_per_param: u32, doc_tokens: u32, q_tokens: u32, t: u32) -> CostReport {
    let storage = storage_estimate(layers.into(), hidden.into(), ffn.into(), rank.into(), bytes_per_param.into());
    CostReport {
        storage,
        megabytes: storage.bytes as f64 / 1e6,
        compute: compute_cost_estimate(doc_tokens.into()),
        online: online_saving_estimate(q_tokens.into(), doc_tokens.into(), t.into()),
    }
}

/// Storage, offline compute and online saving for one document, as JSON.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn cost(layers: u32, hidden: u32, ffn: u32, rank: u32, bytes_per_param: u32, doc_tokens: u32, q_tokens: u32, t: u32) -> String {
    serde_json::to_string(&cost_report(layers, hidden, ffn, rank, bytes_per_param, doc_tokens, q_tokens, t)).expect("serializable")
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Score {
    pub prediction: String,
    pub gold: Vec<String>,
    pub normalized_prediction: String,
    pub normalized_gold: Vec<String>,
    pub f1: f64,
    pub exact_match: bool,
}

/// Gold answers are separated by `|`.
pub fn score_answer(prediction: &str, golds: &str) -> Score {
    let gold: Vec<String> = golds.split('|').map(str::trim).filter(|g| !g.is_empty()).map(str::to_owned).collect();
    Score {
        prediction: prediction.to_owned(),
        normalized_prediction: normalize_answer(prediction),
        normalized_gold: gold.iter().map(|g| normalize_answer(g)).collect(),
        f1: f1(prediction, &gold),
        exact_match: exact_match(prediction, &gold),
        gold,
    }
}

/// Token F1 and exact match of `prediction` against `|`-separated golds, as JSON.
#[wasm_bindgen]
pub fn score(prediction: &str, golds: &str) -> String {
    serde_json::to_string(&score_answer(prediction, golds)).expect("serializable")
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    pub title: String,
    pub text: String,
}

/// A generated corpus with its BM25 index.
#[wasm_bindgen]
pub struct SearchDemo {
    corpus: Corpus,
    index: InvertedIndex,
}

impl SearchDemo {
    pub fn build(docs: usize, seed: u64, k1: f64, b: f64) -> Result<SearchDemo, String> {
        let world = gen_synthetic_corpus(docs, 3, seed).map_err(|e| e.to_string())?;
        let corpus = world.corpus();
        let index = build_index(&corpus, k1, b).map_err(|e| e.to_string())?;
        Ok(SearchDemo { corpus, index })
    }

    pub fn hits(&self, query: &str, k: usize) -> Vec<Hit> {
        self.index
            .retrieve_top_k(query, k)
            .ranked
            .into_iter()
            .map(|(id, score)| {
                let doc = self.corpus.get(id).expect("indexed docs are in the corpus");
                Hit { id: id_hex(id), score, title: doc.title.clone(), text: doc.text.clone() }
            })
            .collect()
    }
}

#[wasm_bindgen]
impl SearchDemo {
    /// `docs` synthetic biographies from `seed`, indexed with the default BM25 parameters.
    #[wasm_bindgen(constructor)]
    pub fn new(docs: usize, seed: u32) -> Result<SearchDemo, JsError> {
        SearchDemo::build(docs, seed.into(), DEFAULT_K1, DEFAULT_B).map_err(|e| JsError::new(&e))
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Title of the document at `i`, for suggesting queries.
    pub fn title(&self, i: usize) -> Option<String> {
        self.corpus.docs().get(i).map(|d| d.title.clone())
    }

    /// Top-`k` hits as a JSON array of `{id, score, title, text}`.
    pub fn search(&self, query: &str, k: usize) -> String {
        serde_json::to_string(&self.hits(query, k)).expect("serializable")
    }
}
