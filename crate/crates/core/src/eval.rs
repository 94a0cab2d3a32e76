//! Answer normalization, token F1 and multi-mode benchmark reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Answerer, Mode, Timing};
use crate::retriever::{id_hex, parse_id};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("item needs at least one non-empty gold answer")]
    NoGold,
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower: String = s.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    lower.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1, best over the gold answers; 0 when there are none.
pub fn f1<S: AsRef<str>>(prediction: &str, golds: &[S]) -> f64 {
    golds.iter().map(|g| f1_single(prediction, g.as_ref())).fold(0.0, f64::max)
}

pub fn exact_match<S: AsRef<str>>(prediction: &str, golds: &[S]) -> bool {
    let p = normalize_answer(prediction);
    golds.iter().any(|g| normalize_answer(g.as_ref()) == p)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub gold_answers: Vec<String>,
    pub source_doc_id: Option<u64>,
}

impl QaItem {
    pub fn new(question: impl Into<String>, gold_answers: Vec<String>, source_doc_id: Option<u64>) -> Result<Self, EvalError> {
        if gold_answers.is_empty() || gold_answers.iter().any(|g| normalize_answer(g).is_empty()) {
            return Err(EvalError::NoGold);
        }
        Ok(QaItem { question: question.into(), gold_answers, source_doc_id })
    }
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum JsonId {
    Num(u64),
    Str(String),
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct QaLine {
    question: String,
    answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doc_id: Option<JsonId>,
}

/// Reads `{"question", "answers", "doc_id"?}` lines; blank lines are skipped.
/// A string `doc_id` is read like a corpus id; a number is taken as is.
pub fn read_qa_jsonl(reader: impl BufRead) -> Result<Vec<QaItem>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse { line: i + 1, message };
        let raw: QaLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let doc = raw.doc_id.map(|id| match id {
            JsonId::Num(n) => n,
            JsonId::Str(s) => parse_id(&s),
        });
        out.push(QaItem::new(raw.question, raw.answers, doc).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

/// Inverse of [`read_qa_jsonl`]; doc ids are written as 16-digit hex.
pub fn write_qa_jsonl(items: &[QaItem]) -> String {
    let mut out = String::new();
    for item in items {
        let line = QaLine { question: item.question.clone(), answers: item.gold_answers.clone(), doc_id: item.source_doc_id.map(|id| JsonId::Str(id_hex(id))) };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub item: usize,
    pub mode: Mode,
    pub question: String,
    pub answer: Option<String>,
    pub error: Option<String>,
    pub f1: f64,
    pub exact_match: bool,
    pub prompt_tokens: usize,
    pub retrieved: Vec<u64>,
    /// True when the supporting document was among the retrieved ones.
    pub source_retrieved: Option<bool>,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub items: usize,
    pub failures: usize,
    /// Failed items count as 0.
    pub mean_f1: f64,
    pub exact_match: f64,
    /// Over answered items.
    pub mean_prompt_tokens: f64,
    pub mean_timing: Timing,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub summaries: Vec<ModeSummary>,
    pub rows: Vec<ItemRow>,
}

impl EvalReport {
    pub fn summary(&self, mode: Mode) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }

    /// The report with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> EvalReport {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.timing = Timing::default());
        r.summaries.iter_mut().for_each(|s| s.mean_timing = Timing::default());
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22}{:>7}{:>7}{:>8}{:>8}{:>10}{:>12}{:>11}{:>13}",
            "mode", "items", "fail", "F1", "EM", "prompt", "retrieve_ms", "update_ms", "generate_ms"
        );
        for s in &self.summaries {
            let t = s.mean_timing;
            let _ = writeln!(
                out,
                "{:<22}{:>7}{:>7}{:>8.4}{:>8.4}{:>10.1}{:>12.2}{:>11.2}{:>13.1}",
                s.mode.as_str(),
                s.items,
                s.failures,
                s.mean_f1,
                s.exact_match,
                s.mean_prompt_tokens,
                t.retrieve_ms,
                t.update_ms,
                t.generate_ms
            );
        }
        out
    }
}

fn row_for(answerer: &dyn Answerer, idx: usize, item: &QaItem, mode: Mode, k: usize) -> ItemRow {
    let mut row = ItemRow {
        item: idx,
        mode,
        question: item.question.clone(),
        answer: None,
        error: None,
        f1: 0.0,
        exact_match: false,
        prompt_tokens: 0,
        retrieved: Vec::new(),
        source_retrieved: None,
        timing: Timing::default(),
    };
    match answerer.answer(&item.question, mode, k) {
        Ok(r) => {
            row.f1 = f1(&r.answer, &item.gold_answers);
            row.exact_match = exact_match(&r.answer, &item.gold_answers);
            row.prompt_tokens = r.prompt_token_count;
            row.retrieved = r.retrieved.ids();
            row.source_retrieved = item.source_doc_id.filter(|_| mode.retrieves()).map(|id| row.retrieved.contains(&id));
            row.timing = r.timing;
            row.answer = Some(r.answer);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

fn summarize(mode: Mode, rows: &[&ItemRow]) -> ModeSummary {
    let n = rows.len();
    let ok: Vec<&ItemRow> = rows.iter().copied().filter(|r| r.error.is_none()).collect();
    let timing = |f: fn(&Timing) -> f64| mean(ok.iter().map(|r| f(&r.timing)), ok.len());
    ModeSummary {
        mode,
        items: n,
        failures: n - ok.len(),
        mean_f1: mean(rows.iter().map(|r| r.f1), n),
        exact_match: mean(rows.iter().map(|r| f64::from(u8::from(r.exact_match))), n),
        mean_prompt_tokens: mean(ok.iter().map(|r| r.prompt_tokens as f64), ok.len()),
        mean_timing: Timing { retrieve_ms: timing(|t| t.retrieve_ms), update_ms: timing(|t| t.update_ms), generate_ms: timing(|t| t.generate_ms) },
    }
}

/// Answers every item under every mode with the same `k`. Items are spread
/// over `jobs` threads; rows come back in (mode, item) order regardless.
pub fn run_benchmark(items: &[QaItem], modes: &[Mode], k: usize, answerer: &dyn Answerer, jobs: usize) -> EvalReport {
    let tasks: Vec<(Mode, usize)> = modes.iter().flat_map(|&m| (0..items.len()).map(move |i| (m, i))).collect();
    let jobs = jobs.clamp(1, tasks.len().max(1));
    let mut rows: Vec<Option<ItemRow>> = vec![None; tasks.len()];
    std::thread::scope(|s| {
        let chunk = tasks.len().div_ceil(jobs).max(1);
        for (out, work) in rows.chunks_mut(chunk).zip(tasks.chunks(chunk)) {
            s.spawn(move || {
                for (slot, &(mode, i)) in out.iter_mut().zip(work) {
                    *slot = Some(row_for(answerer, i, &items[i], mode, k));
                }
            });
        }
    });
    let rows: Vec<ItemRow> = rows.into_iter().map(|r| r.expect("every task ran")).collect();
    let summaries = modes
        .iter()
        .map(|&m| {
            let mine: Vec<&ItemRow> = rows.iter().filter(|r| r.mode == m).collect();
            summarize(m, &mine)
        })
        .collect();
    EvalReport { k, summaries, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PipelineError, QueryResult};
    use crate::retriever::RetrievalResult;
    use proptest::prelude::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Alderville."), "alderville");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  A   cat, an   Apple; THE end! "), "cat apple end");
        assert_eq!(normalize_answer("theory"), "theory");
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1("Paris", &["Paris"]), 1.0);
        assert_eq!(f1("london", &["paris"]), 0.0);
        assert!((f1("paris france", &["paris"]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1("", &[""]), 1.0);
        assert_eq!(f1("the", &["a"]), 1.0);
        assert_eq!(f1("", &["x"]), 0.0);
        assert_eq!(f1("x", &["y", "x z", "x"]), 1.0);
        assert_eq!(f1("x b b", &["b b c"]), 2.0 / 3.0);
        assert_eq!(f1("a b b", &["b b c"]), 0.8);
        let none: [&str; 0] = [];
        assert_eq!(f1("x", &none), 0.0);
    }

    #[test]
    fn exact_match_uses_normalization() {
        assert!(exact_match("The Lute.", &["lute"]));
        assert!(!exact_match("lute player", &["lute"]));
    }

    #[test]
    fn qa_items_need_gold() {
        assert!(matches!(QaItem::new("q", vec![], None), Err(EvalError::NoGold)));
        assert!(matches!(QaItem::new("q", vec!["the".into()], None), Err(EvalError::NoGold)));
    }

    #[test]
    fn jsonl_round_trip() {
        let text = "{\"question\":\"Q1?\",\"answers\":[\"a1\",\"b\"],\"doc_id\":\"00000000000000ff\"}\n\n{\"question\":\"Q2?\",\"answers\":[\"x\"]}\n{\"question\":\"Q3\",\"answers\":[\"y\"],\"doc_id\":7}\n";
        let items = read_qa_jsonl(text.as_bytes()).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].source_doc_id, Some(255));
        assert_eq!(items[1].source_doc_id, None);
        assert_eq!(items[2].source_doc_id, Some(7));
        assert_eq!(read_qa_jsonl(write_qa_jsonl(&items).as_bytes()).unwrap(), items);
        let bad = read_qa_jsonl("{\"question\":\"q\",\"answers\":[]}\n".as_bytes()).unwrap_err();
        assert!(matches!(bad, EvalError::Parse { line: 1, .. }));
        assert!(read_qa_jsonl("{\"question\":\"q\",\"answers\":[\"x\"],\"extra\":1}".as_bytes()).is_err());
    }

    /// Echoes the gold answer (looked up by question) for every mode but in_context, which always fails.
    struct Oracle(Vec<QaItem>);

    impl Answerer for Oracle {
        fn answer(&self, question: &str, mode: Mode, _k: usize) -> crate::pipeline::Result<QueryResult> {
            if mode == Mode::InContext {
                return Err(PipelineError::InvalidK);
            }
            let item = self.0.iter().find(|i| i.question == question).unwrap();
            Ok(QueryResult {
                answer: item.gold_answers[0].clone(),
                mode,
                retrieved: RetrievalResult { ranked: vec![(1, 1.0)] },
                merged_doc_ids: vec![],
                passage_doc_ids: vec![],
                prompt_token_count: question.len() + 1,
                generated_token_count: 1,
                timing: Timing { retrieve_ms: 1.0, update_ms: 2.0, generate_ms: 3.0 },
                fallback: None,
            })
        }
    }

    fn items() -> Vec<QaItem> {
        (0..5).map(|i| QaItem::new(format!("question {i}?"), vec![format!("answer{i}")], Some(1)).unwrap()).collect()
    }

    #[test]
    fn empty_benchmark() {
        let r = run_benchmark(&[], &[Mode::ClosedBook], 3, &Oracle(vec![]), 4);
        assert!(r.rows.is_empty());
        assert_eq!(r.summaries[0].items, 0);
        assert_eq!(r.summaries[0].mean_f1, 0.0);
    }

    #[test]
    fn oracle_scores_one_and_failures_are_recorded() {
        let items = items();
        let oracle = Oracle(items.clone());
        let r = run_benchmark(&items, &[Mode::ClosedBook, Mode::InContext, Mode::Parametric], 3, &oracle, 3);
        assert_eq!(r.rows.len(), 15);
        let cb = r.summary(Mode::ClosedBook).unwrap();
        assert_eq!((cb.mean_f1, cb.exact_match, cb.failures), (1.0, 1.0, 0));
        assert_eq!(cb.mean_timing.update_ms, 2.0);
        let ic = r.summary(Mode::InContext).unwrap();
        assert_eq!((ic.mean_f1, ic.failures), (0.0, 5));
        assert!(r.rows.iter().filter(|row| row.mode == Mode::InContext).all(|row| row.error.is_some()));
        assert_eq!(r.rows.iter().find(|row| row.mode == Mode::Parametric).unwrap().source_retrieved, Some(true));
        assert_eq!(r.rows.iter().find(|row| row.mode == Mode::ClosedBook).unwrap().source_retrieved, None);
        assert!(r.text_table().contains("closed_book"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn job_count_does_not_change_reports() {
        let items = items();
        let oracle = Oracle(items.clone());
        let one = run_benchmark(&items, &Mode::ALL, 2, &oracle, 1);
        let many = run_benchmark(&items, &Mode::ALL, 2, &oracle, 7);
        assert_eq!(one.without_timing(), many.without_timing());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn f1_ignores_token_order(words in prop::collection::vec("[a-z]{1,4}", 1..8), gold in prop::collection::vec("[a-z]{1,4}", 1..8), seed in any::<u64>()) {
            let mut shuffled = words.clone();
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            let g = gold.join(" ");
            prop_assert_eq!(f1(&words.join(" "), &[&g]), f1(&shuffled.join(" "), &[&g]));
            let v = f1(&words.join(" "), &[&g]);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn appending_gold_token_never_lowers_recall(pred in prop::collection::vec("[a-c]", 1..6), gold in prop::collection::vec("[a-c]", 1..6), pick in any::<prop::sample::Index>()) {
            let recall = |p: &[String]| {
                let mut counts: HashMap<&str, usize> = HashMap::new();
                for g in &gold { *counts.entry(g).or_default() += 1; }
                let mut common = 0;
                for w in p { if let Some(c) = counts.get_mut(w.as_str()) { if *c > 0 { *c -= 1; common += 1; } } }
                common as f64 / gold.len() as f64
            };
            let mut longer = pred.clone();
            longer.push(gold[pick.index(gold.len())].clone());
            prop_assert!(recall(&longer) >= recall(&pred));
        }
    }
}
