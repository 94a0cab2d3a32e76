use std::collections::HashSet;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use proptest::prelude::*;

use super::llm::{augment_llm_many, parse_qa, parse_rewrites};
use super::*;

fn capital_doc() -> Document {
    Document::new("Alderville", "The capital of Bruneth is Alderville.")
}

#[test]
fn zero_rewrites_is_empty() {
    assert!(rewrite_rule_based(&capital_doc(), 0, 1).is_empty());
}

#[test]
fn capital_example_rewrites_preserve_the_fact() {
    let d = capital_doc();
    let out = rewrite_rule_based(&d, 1, 1);
    assert_eq!(out.len(), 1);
    assert_ne!(out[0], d.text);
    assert_eq!(extract_triples(&out[0]), vec![FactTriple::new("Alderville", "capital_of", "Bruneth")]);
    let options: HashSet<String> = (0..40).flat_map(|s| rewrite_rule_based(&d, 1, s)).collect();
    assert!(options.contains("Alderville serves as the capital of Bruneth."));
}

#[test]
fn capital_example_question() {
    let qa = gen_qa_rule_based(&capital_doc(), 1, 9).unwrap();
    assert_eq!(qa, vec![QaPair::new("What is the capital of Bruneth?", "Alderville")]);
}

#[test]
fn plain_text_falls_back_to_sentence_permutation() {
    let d = Document::new("t", "one fish. two fish. red fish.");
    let out = rewrite_rule_based(&d, 3, 4);
    for r in &out {
        let mut a: Vec<&str> = world::sentences(r);
        let mut b: Vec<&str> = world::sentences(&d.text);
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
    assert_eq!(gen_qa_rule_based(&d, 1, 0).unwrap_err(), AugmentError::InsufficientFacts);
}

#[test]
fn qa_cycles_with_distinct_variants() {
    let d = capital_doc();
    let qa = gen_qa_rule_based(&d, 10, 0).unwrap();
    assert_eq!(qa.len(), 10);
    let distinct: HashSet<&str> = qa.iter().map(|p| p.question.as_str()).collect();
    assert_eq!(distinct.len(), 10);
    assert!(qa.iter().all(|p| p.answer == "Alderville"));
}

#[test]
fn answers_are_contained_in_the_source() {
    let world = gen_synthetic_corpus(40, 3, 5).unwrap();
    for sd in &world.docs {
        for p in gen_qa_rule_based(&sd.doc, 7, 3).unwrap() {
            assert!(sd.doc.text.contains(&p.answer));
            assert!(sd.triples.iter().any(|t| t.object == p.answer || t.subject == p.answer));
        }
    }
}

#[test]
fn synthetic_corpus_is_deterministic() {
    assert_eq!(gen_synthetic_corpus(16, 3, 7).unwrap(), gen_synthetic_corpus(16, 3, 7).unwrap());
    assert_ne!(gen_synthetic_corpus(16, 3, 7).unwrap(), gen_synthetic_corpus(16, 3, 8).unwrap());
    assert!(gen_synthetic_corpus(0, 3, 7).is_err());
    assert!(gen_synthetic_corpus(1, 7, 7).is_err());
}

#[test]
fn sixty_four_docs_have_unique_triples() {
    let world = gen_synthetic_corpus(64, 3, 7).unwrap();
    assert_eq!(world.docs.len(), 64);
    assert_eq!(world.corpus().len(), 64);
    let all: Vec<&FactTriple> = world.docs.iter().flat_map(|d| &d.triples).collect();
    let set: HashSet<&FactTriple> = all.iter().copied().collect();
    assert_eq!(all.len(), 192);
    assert_eq!(set.len(), 192);
    for d in &world.docs {
        assert_eq!(extract_triples(&d.doc.text), d.triples);
        assert_eq!(d.held_out.len(), 3);
    }
}

#[test]
fn lexicon_avoids_english_words() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/english_words.txt");
    let words: HashSet<String> = std::fs::read_to_string(path).unwrap().lines().map(|w| w.trim().to_lowercase()).collect();
    assert!(words.len() > 200_000);
    for seed in 0..4 {
        for part in [Partition::Even, Partition::Odd] {
            let world = gen_world(200, 3, seed, part).unwrap();
            for d in &world.docs {
                for t in &d.triples {
                    for w in t.subject.split(' ').chain(t.object.split(' ')) {
                        assert!(!words.contains(&w.to_lowercase()), "{w} is an English word");
                    }
                }
            }
        }
    }
}

#[test]
fn held_out_questions_use_unseen_templates() {
    let world = gen_synthetic_corpus(20, 3, 2).unwrap();
    for d in &world.docs {
        let train: HashSet<String> = gen_qa_rule_based(&d.doc, 12, 0).unwrap().into_iter().map(|p| p.question).collect();
        for h in &d.held_out {
            assert!(!train.contains(&h.question));
        }
    }
}

#[test]
fn default_dataset_has_six_triples() {
    let world = gen_synthetic_corpus(4, 3, 2).unwrap();
    let ds = build_dataset(&world.docs[0].doc, DEFAULT_REWRITES, DEFAULT_QA_PAIRS, &RuleBased::default()).unwrap();
    assert_eq!(ds.triples().len(), 6);
    assert_eq!(ds.rewrites[0], world.docs[0].doc.text);
    let single = build_dataset(&world.docs[0].doc, 0, 1, &RuleBased::default()).unwrap();
    assert_eq!(single.triples().len(), 1);
    assert_eq!(single.triples()[0].doc, world.docs[0].doc.text);
}

#[test]
fn dataset_invariants_reject_empty_parts() {
    assert!(AugmentedDataset::new(1, vec![], vec![]).is_err());
    assert!(AugmentedDataset::new(1, vec![" ".into()], vec![]).is_err());
    assert!(AugmentedDataset::new(1, vec!["x".into()], vec![QaPair::new("q", "")]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rewrites_preserve_triples(seed in any::<u64>(), n in 1usize..5, tpd in 1usize..7) {
        let world = gen_synthetic_corpus(2, tpd, seed).unwrap();
        for d in &world.docs {
            let want: HashSet<FactTriple> = d.triples.iter().cloned().collect();
            for r in rewrite_rule_based(&d.doc, n, seed ^ 1) {
                let got: HashSet<FactTriple> = extract_triples(&r).into_iter().collect();
                prop_assert_eq!(&got, &want);
            }
        }
    }

    #[test]
    fn triples_enumerate_the_cross_product(n in 0usize..4, m in 1usize..6, seed in any::<u64>()) {
        let world = gen_synthetic_corpus(1, 3, seed).unwrap();
        let ds = build_dataset(&world.docs[0].doc, n, m, &RuleBased { seed }).unwrap();
        let idx: Vec<(usize, usize)> = ds.triples().iter().map(|t| (t.rewrite, t.qa)).collect();
        let set: HashSet<(usize, usize)> = idx.iter().copied().collect();
        prop_assert_eq!(idx.len(), (n + 1) * m);
        prop_assert_eq!(set.len(), idx.len());
        prop_assert!(idx.iter().all(|&(k, j)| k <= n && j < m));
        prop_assert_eq!(build_dataset(&world.docs[0].doc, n, m, &RuleBased { seed }).unwrap(), ds);
    }
}

// ---- LLM augmenter -----------------------------------------------------------

struct Canned {
    rewrite: String,
    qa: String,
    calls: AtomicUsize,
}

impl ChatTransport for Canned {
    fn complete(&self, endpoint: &AugmenterEndpoint, request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        assert_eq!(request.model, endpoint.model);
        if request.messages[0].content.starts_with("Rewrite") {
            Ok(self.rewrite.clone())
        } else {
            Ok(self.qa.clone())
        }
    }
}

struct Down;

impl ChatTransport for Down {
    fn complete(&self, _: &AugmenterEndpoint, _: &ChatRequest) -> Result<String, TransportError> {
        Err(TransportError::Unreachable("connection refused".into()))
    }
}

fn fast_endpoint() -> AugmenterEndpoint {
    AugmenterEndpoint { backoff_ms: 0, max_retries: 2, ..Default::default() }
}

const RECORDED_QA: &str = "Here you go:\n[{\"question\": \"What is the capital of Bruneth?\", \"answer\": \"Alderville\"},\n {\"question\": \"Which country has Alderville as capital?\", \"answer\": \"Bruneth\"},\n {\"question\": \"Name Bruneth's capital.\", \"answer\": \"Alderville\"}]";

#[test]
fn canned_completions_round_trip() {
    let t = Canned { rewrite: "Rewrite 1: Alderville serves as the capital of Bruneth.".into(), qa: RECORDED_QA.into(), calls: AtomicUsize::new(0) };
    let ds = augment_llm(&capital_doc(), 1, 3, &fast_endpoint(), &t).unwrap();
    assert_eq!(ds.rewrites, vec![capital_doc().text, "Alderville serves as the capital of Bruneth.".to_string()]);
    assert_eq!(ds.qa_pairs[1], QaPair::new("Which country has Alderville as capital?", "Bruneth"));
    assert_eq!(ds.triples().len(), 6);
    assert_eq!(t.calls.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_replies_are_retried_then_rejected() {
    let t = Canned { rewrite: "Sure! Here is a rewrite without the format.".into(), qa: RECORDED_QA.into(), calls: AtomicUsize::new(0) };
    let err = augment_llm(&capital_doc(), 1, 3, &fast_endpoint(), &t).unwrap_err();
    assert!(matches!(err, AugmentError::MalformedResponse(_)));
    assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    assert!(matches!(parse_qa("[{\"question\": 1}]", 1), Err(AugmentError::MalformedResponse(_))));
    assert!(matches!(parse_qa(RECORDED_QA, 4), Err(AugmentError::MalformedResponse(_))));
    assert_eq!(parse_rewrites("Rewrite 1: a\nnoise\nRewrite 2: b", 2).unwrap(), vec!["a", "b"]);
}

#[test]
fn unreachable_endpoint_errors() {
    let err = augment_llm(&capital_doc(), 1, 3, &fast_endpoint(), &Down).unwrap_err();
    assert!(matches!(err, AugmentError::EndpointUnreachable(_)));
}

#[test]
fn many_documents_keep_order() {
    let t = Canned { rewrite: "Rewrite 1: x.".into(), qa: RECORDED_QA.into(), calls: AtomicUsize::new(0) };
    let docs: Vec<Document> = (0..5).map(|i| Document::new(format!("d{i}"), "text.")).collect();
    let out = augment_llm_many(&docs, 1, 2, &AugmenterEndpoint { max_in_flight: 2, ..fast_endpoint() }, &t);
    assert_eq!(out.len(), 5);
    for (d, r) in docs.iter().zip(&out) {
        assert_eq!(r.as_ref().unwrap().doc_id, d.id);
    }
}

#[cfg(feature = "http")]
/// Serves one canned HTTP response per connection and records request bodies.
fn one_shot_server(replies: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let seen = Mutex::new(Vec::new());
        for reply in replies {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf).to_string();
                if let Some(head_end) = text.find("\r\n\r\n") {
                    let body = &text[head_end + 4..];
                    if text[..head_end].to_ascii_lowercase().contains("transfer-encoding: chunked") {
                        if body.ends_with("0\r\n\r\n") {
                            seen.lock().unwrap().push(text);
                            break;
                        }
                        continue;
                    }
                    let len = text[..head_end]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= head_end + 4 + len {
                        seen.lock().unwrap().push(text);
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            let body = serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": reply } }] }).to_string();
            let resp = format!("HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}", body.len(), body);
            sock.write_all(resp.as_bytes()).unwrap();
        }
        seen.into_inner().unwrap()
    });
    (format!("http://{addr}/v1"), handle)
}

#[cfg(feature = "http")]
#[test]
fn http_transport_speaks_chat_completions() {
    let (url, server) = one_shot_server(vec!["Rewrite 1: Alderville serves as the capital of Bruneth.".into(), RECORDED_QA.into()]);
    let ep = AugmenterEndpoint { base_url: url, model: "m-test".into(), timeout_secs: 10, ..fast_endpoint() };
    let ds = augment_llm(&capital_doc(), 1, 3, &ep, &llm::HttpTransport).unwrap();
    assert_eq!(ds.triples().len(), 6);
    let requests = server.join().unwrap();
    assert!(requests[0].starts_with("POST /v1/chat/completions"));
    let body = &requests[0][requests[0].find("\r\n\r\n").unwrap() + 4..];
    let sent: ChatRequest = serde_json::from_str(body).unwrap();
    assert_eq!(sent.model, "m-test");
    assert_eq!(sent.messages[0].role, "user");
}
