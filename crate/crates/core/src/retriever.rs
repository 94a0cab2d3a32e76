//! Okapi BM25 over an in-memory inverted index.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Fnv64;
use crate::text::{tokenize_words, WordToken};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("corpus has no documents")]
    EmptyCorpus,
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("duplicate document id {0:016x}")]
    DuplicateId(u64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RetrieverError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(title: impl Into<String>, text: impl Into<String>) -> Self {
        let (title, text) = (title.into(), text.into());
        Document { id: content_id(&title, &text), title, text }
    }
}

/// Stable id over (title, text).
pub fn content_id(title: &str, text: &str) -> u64 {
    Fnv64::new().write_field(title.as_bytes()).write_field(text.as_bytes()).finish()
}

/// Renders ids the way they appear in file names and manifests.
pub fn id_hex(id: u64) -> String {
    format!("{id:016x}")
}

/// Accepts a hex id as written by [`id_hex`]; any other string is hashed.
pub fn parse_id(s: &str) -> u64 {
    let t = s.trim();
    if !t.is_empty() && t.len() <= 16 && t.bytes().all(|c| c.is_ascii_hexdigit()) {
        if let Ok(v) = u64::from_str_radix(t, 16) {
            return v;
        }
    }
    crate::hash::fnv64(t.as_bytes())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    docs: Vec<Document>,
}

#[derive(Deserialize)]
struct JsonDoc {
    #[serde(default)]
    id: Option<String>,
    title: String,
    text: String,
}

impl Corpus {
    /// Keeps the first of any documents sharing an id, so re-ingestion is idempotent.
    pub fn from_docs(docs: impl IntoIterator<Item = Document>) -> Self {
        let mut seen = HashSet::new();
        Corpus { docs: docs.into_iter().filter(|d| seen.insert(d.id)).collect() }
    }

    /// Strict variant: any repeated id is an error.
    pub fn try_from_docs(docs: impl IntoIterator<Item = Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for d in docs {
            if !seen.insert(d.id) {
                return Err(RetrieverError::DuplicateId(d.id));
            }
            out.push(d);
        }
        Ok(Corpus { docs: out })
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let j: JsonDoc = serde_json::from_str(&line).map_err(|e| RetrieverError::Parse { line: i + 1, message: e.to_string() })?;
            let id = match &j.id {
                Some(s) => parse_id(s),
                None => content_id(&j.title, &j.text),
            };
            docs.push(Document { id, title: j.title, text: j.text });
        }
        Ok(Self::from_docs(docs))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            let line = serde_json::json!({ "id": id_hex(d.id), "title": d.title, "text": d.text });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Document> {
        self.docs.iter().find(|d| d.id == id)
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.docs.iter().position(|d| d.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_ids: Vec<u64>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    k1: f64,
    b: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<(u64, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.ranked.iter().map(|r| r.0).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

pub fn build_index(corpus: &Corpus, k1: f64, b: f64) -> Result<InvertedIndex> {
    if !(k1 > 0.0 && k1.is_finite() && (0.0..=1.0).contains(&b)) {
        return Err(RetrieverError::InvalidParams { k1, b });
    }
    if corpus.is_empty() {
        return Err(RetrieverError::EmptyCorpus);
    }
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(corpus.len());
    for (pos, doc) in corpus.docs().iter().enumerate() {
        let words = tokenize_words(&index_text(doc));
        doc_lengths.push(words.len() as u32);
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for w in &words {
            *tf.entry(w.as_str()).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term.to_owned()).or_default().push(Posting { doc: pos as u32, tf: count });
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
    Ok(InvertedIndex {
        postings,
        doc_ids: corpus.docs().iter().map(|d| d.id).collect(),
        avg_doc_length: total as f64 / doc_lengths.len() as f64,
        doc_lengths,
        k1,
        b,
    })
}

/// What gets indexed for a document: title then body.
pub fn index_text(doc: &Document) -> String {
    if doc.title.is_empty() {
        doc.text.clone()
    } else {
        format!("{} {}", doc.title, doc.text)
    }
}

impl InvertedIndex {
    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn doc_id(&self, pos: usize) -> u64 {
        self.doc_ids[pos]
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, &[Posting])> {
        self.postings.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings(term).len() as f64;
        let n = self.doc_count() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, tf: f64, len: f64) -> f64 {
        let norm = self.k1 * (1.0 - self.b + self.b * len / self.avg_doc_length);
        idf * (tf * (self.k1 + 1.0)) / (tf + norm)
    }

    /// Score of one document. Repeated query terms count once per occurrence.
    pub fn bm25_score(&self, query: &[WordToken], doc: usize) -> f64 {
        let len = f64::from(self.doc_lengths[doc]);
        let mut score = 0.0;
        for t in query {
            let postings = self.postings(t.as_str());
            if let Ok(i) = postings.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_score(self.idf(t.as_str()), f64::from(postings[i].tf), len);
            }
        }
        score
    }

    /// Term-at-a-time accumulation. Sums per document in query-term order, so
    /// results agree bit-for-bit with [`InvertedIndex::bm25_score`].
    pub fn retrieve_top_k(&self, query_text: &str, k: usize) -> RetrievalResult {
        let query = tokenize_words(query_text);
        let mut acc = vec![0.0f64; self.doc_count()];
        let mut hit = vec![false; self.doc_count()];
        for t in &query {
            let postings = self.postings(t.as_str());
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(t.as_str());
            for p in postings {
                let d = p.doc as usize;
                acc[d] += self.term_score(idf, f64::from(p.tf), f64::from(self.doc_lengths[d]));
                hit[d] = true;
            }
        }
        let mut ranked: Vec<(u64, f64)> = (0..self.doc_count()).filter(|&d| hit[d] && acc[d] > 0.0).map(|d| (self.doc_ids[d], acc[d])).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        RetrievalResult { ranked }
    }
}
