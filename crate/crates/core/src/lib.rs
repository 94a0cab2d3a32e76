//! Parametric retrieval-augmented generation at desk scale.
//!
//! Documents are compiled offline into per-document low-rank FFN adapters
//! for a small frozen decoder-only transformer. At query time the adapters of
//! the retrieved documents are summed and plugged into the feed-forward
//! layers before greedy decoding.
//!
//! Modules, bottom-up: [`text`] tokenizers, [`retriever`] BM25, [`model`]
//! transformer, [`adapters`] low-rank deltas, [`augment`] rewrites and QA
//! pairs, [`trainer`] adapter optimization, [`store`] the on-disk parametric
//! corpus and cost accounting, [`pipeline`] retrieve/update/generate, and
//! [`eval`] token-F1 benchmarking.

pub mod adapters;
pub mod augment;
pub mod eval;
pub mod hash;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod retriever;
pub mod store;
pub mod text;
pub mod trainer;
