//! Subcommand bodies. Each takes the fully resolved configuration.

use std::fs::{self, OpenOptions};
use std::io::{BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use prag_core::adapters::{deserialize, serialize, LowRankAdapter};
use prag_core::augment::llm::HttpTransport;
use prag_core::augment::{build_dataset, gen_synthetic_corpus, pretraining_text, warmup_qa, Augmenter, LlmAugmenter, RuleBased};
use prag_core::eval::{read_qa_jsonl, run_benchmark, write_qa_jsonl, QaItem};
use prag_core::hash::Fnv64;
use prag_core::model::{checkpoint, pretrain_on_sequences, text_to_sequences, ModelParams};
use prag_core::pipeline::{Pipeline, PipelineConfig};
use prag_core::retriever::{build_index, id_hex, parse_id, Corpus, Document, InvertedIndex};
use prag_core::store::{compute_cost_estimate, online_saving_estimate, storage_estimate, write_atomic, ParametricCorpus};
use prag_core::trainer::train_adapter;
use serde::Serialize;

use crate::config::{AugmenterKind, RunConfig};
use crate::{Command, CostArgs, ParameterizeArgs};

pub fn execute(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::GenCorpus(_) => gen_corpus(cfg),
        Command::Pretrain(_) => pretrain(cfg),
        Command::Index(_) => index(cfg),
        Command::Parameterize(a) => parameterize(cfg, a),
        Command::Warmup(_) => warmup(cfg),
        Command::Query(a) => query(cfg, &a.question, a.json),
        Command::Serve(_) => serve(cfg),
        Command::Eval(a) => eval(cfg, a.limit),
        Command::Cost(a) => cost(cfg, a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, bytes)?;
    Ok(())
}

fn gen_corpus(cfg: &RunConfig) -> Result<()> {
    let c = cfg.corpus;
    let world = gen_synthetic_corpus(c.docs, c.triples_per_doc, c.seed)?;
    let items: Vec<QaItem> = world
        .docs
        .iter()
        .flat_map(|sd| sd.held_out.iter().map(|qa| QaItem::new(qa.question.clone(), vec![qa.answer.clone()], Some(sd.doc.id))))
        .collect::<Result<_, _>>()?;
    write_file(&cfg.paths.corpus(), world.corpus().to_jsonl().as_bytes())?;
    write_file(&cfg.paths.qa(), write_qa_jsonl(&items).as_bytes())?;
    println!("wrote {} documents to {}", world.docs.len(), cfg.paths.corpus().display());
    println!("wrote {} questions to {}", items.len(), cfg.paths.qa().display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let text = pretraining_text(&cfg.mix)?;
    let seqs = text_to_sequences(&text, cfg.model.max_seq_len);
    let tokens: usize = seqs.iter().map(Vec::len).sum();
    eprintln!("pretraining on {} records, {tokens} tokens", seqs.len());
    let t0 = Instant::now();
    let steps = cfg.pretrain.steps;
    let (model, report) = pretrain_on_sequences(cfg.model, &seqs, &cfg.pretrain, |step, loss| {
        if step % 50 == 0 || step + 1 == steps {
            eprintln!("step {step:>6} loss {loss:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
        }
    })?;
    let path = cfg.paths.base();
    write_file(&path, &checkpoint::to_bytes(&model))?;
    println!("base {} fingerprint {} final loss {:.4}", path.display(), id_hex(model.fingerprint()), report.losses.last().copied().unwrap_or(f32::NAN));
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = fs::File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    Ok(Corpus::from_jsonl(BufReader::new(f))?)
}

pub fn load_base(path: &Path) -> Result<ModelParams> {
    checkpoint::load(path).with_context(|| format!("loading base checkpoint {}", path.display()))
}

fn index(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(&cfg.paths.corpus())?;
    let idx = build_index(&corpus, cfg.retrieval.k1, cfg.retrieval.b)?;
    write_file(&cfg.paths.index(), &serde_json::to_vec(&idx)?)?;
    println!("indexed {} documents, {} terms, avg length {:.1}", idx.doc_count(), idx.terms().count(), idx.avg_doc_length());
    Ok(())
}

/// The stored index, or a fresh one when the file is absent. A stored index
/// built over a different corpus is an error.
pub fn load_index(cfg: &RunConfig, corpus: &Corpus) -> Result<InvertedIndex> {
    let path = cfg.paths.index();
    if !path.exists() {
        return Ok(build_index(corpus, cfg.retrieval.k1, cfg.retrieval.b)?);
    }
    let idx: InvertedIndex = serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("parsing index {}", path.display()))?;
    let same = idx.doc_count() == corpus.len() && corpus.docs().iter().enumerate().all(|(i, d)| idx.doc_id(i) == d.id);
    if !same {
        bail!("index {} does not match the corpus; rerun `prag index`", path.display());
    }
    Ok(idx)
}

pub fn build_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    let base = load_base(&cfg.paths.base())?;
    let corpus = load_corpus(&cfg.paths.corpus())?;
    let index = load_index(cfg, &corpus)?;
    let store = ParametricCorpus::open(cfg.paths.parametric())?;
    let config = PipelineConfig { max_new_tokens: cfg.service.max_new_tokens, adapter: cfg.adapter };
    Ok(Pipeline::new(base, corpus, index, Some(store), config))
}

#[derive(Serialize)]
struct TrainLine {
    doc_id: String,
    final_loss: f64,
    tokens: usize,
    seconds: f64,
    adapter_path: String,
}

/// Per-document init seed: independent of job scheduling.
fn init_seed(seed: u64, doc_id: u64) -> u64 {
    Fnv64::new().write_u64(seed).write_u64(doc_id).finish()
}

fn parameterize(cfg: &RunConfig, args: &ParameterizeArgs) -> Result<()> {
    let base = load_base(&cfg.paths.base())?;
    let fp = base.fingerprint();
    let corpus = load_corpus(&cfg.paths.corpus())?;
    let store = ParametricCorpus::open(cfg.paths.parametric())?;

    let mut selected: Vec<&Document> = if args.docs.is_empty() {
        corpus.docs().iter().collect()
    } else {
        args.docs.iter().map(|s| corpus.get(parse_id(s)).ok_or_else(|| anyhow!("no document {s} in the corpus"))).collect::<Result<_>>()?
    };
    if let Some(n) = args.limit {
        selected.truncate(n);
    }
    let todo: Vec<&Document> = selected.iter().copied().filter(|d| args.overwrite || !store.contains(d.id, fp)).collect();
    eprintln!("{} selected, {} already parameterized, {} to train", selected.len(), selected.len() - todo.len(), todo.len());

    let warm = if cfg.warmup.use_as_init {
        let path = cfg.paths.warmup();
        let a = deserialize(&fs::read(&path).with_context(|| format!("reading warm-up adapter {}", path.display()))?)?;
        if a.model_fingerprint != fp {
            bail!("warm-up adapter was trained against {}, base is {}", id_hex(a.model_fingerprint), id_hex(fp));
        }
        if a.config != cfg.adapter {
            bail!("warm-up adapter config {:?} differs from adapter config {:?}", a.config, cfg.adapter);
        }
        Some(a)
    } else {
        None
    };
    let transport = HttpTransport;
    let rule = RuleBased { seed: cfg.augment.seed };
    let llm = LlmAugmenter { endpoint: &cfg.augment.endpoint, transport: &transport };
    let augmenter: &(dyn Augmenter + Sync) = match cfg.augment.kind {
        AugmenterKind::RuleBased => &rule,
        AugmenterKind::Llm => &llm,
    };

    let manifest_path = cfg.paths.train_manifest();
    let log = Mutex::new(OpenOptions::new().create(true).append(true).open(&manifest_path).with_context(|| format!("opening {}", manifest_path.display()))?);
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let one = |doc: &Document| -> Result<TrainLine> {
        let dataset = build_dataset(doc, cfg.augment.rewrites, cfg.augment.qa_pairs, augmenter)?;
        let init = match &warm {
            Some(w) => w.clone().with_doc_id(doc.id),
            None => LowRankAdapter::new_random(cfg.adapter, &base, doc.id, init_seed(cfg.train.seed, doc.id))?,
        };
        let (adapter, report) = train_adapter(&base, &dataset, &init, &cfg.train)?;
        let entry = store.put(&adapter, args.overwrite)?;
        store.put_dataset(&dataset)?;
        Ok(TrainLine {
            doc_id: id_hex(doc.id),
            final_loss: report.final_loss,
            tokens: report.tokens,
            seconds: report.seconds,
            adapter_path: entry.adapter_path,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..(args.jobs as usize).min(todo.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(doc) = todo.get(i) else { break };
                match one(doc) {
                    Ok(line) => {
                        eprintln!("[{}/{}] {} loss {:.4} ({:.1}s)", i + 1, todo.len(), line.doc_id, line.final_loss, line.seconds);
                        let mut f = log.lock().expect("log lock");
                        let _ = writeln!(f, "{}", serde_json::to_string(&line).expect("line serializes"));
                    }
                    Err(e) => {
                        eprintln!("[{}/{}] {} failed: {e:#}", i + 1, todo.len(), id_hex(doc.id));
                        failures.lock().expect("failure lock").push(doc.id);
                    }
                }
            });
        }
    });
    let failures = failures.into_inner().expect("failure lock");
    if !failures.is_empty() {
        bail!("{} of {} documents failed; rerun to resume", failures.len(), todo.len());
    }
    println!("parameterized {} documents into {} ({} stored)", todo.len(), cfg.paths.parametric().display(), store.len());
    Ok(())
}

fn warmup(cfg: &RunConfig) -> Result<()> {
    let base = load_base(&cfg.paths.base())?;
    let qa = warmup_qa(cfg.warmup.questions, cfg.warmup.seed)?;
    let hyper = prag_core::trainer::TrainHyper { seed: cfg.warmup.seed, ..cfg.train };
    let (adapter, report) = prag_core::trainer::warmup_init(&base, &qa, cfg.adapter, &hyper)?;
    let path = cfg.paths.warmup();
    write_file(&path, &serialize(&adapter))?;
    println!("warm-up adapter {} from {} questions, loss {:.4} -> {:.4}", path.display(), qa.len(), report.initial_loss, report.final_loss);
    Ok(())
}

fn query(cfg: &RunConfig, question: &str, json: bool) -> Result<()> {
    let pipeline = build_pipeline(cfg)?;
    let r = pipeline.answer(question, cfg.service.default_mode, cfg.retrieval.k)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&r)?);
        return Ok(());
    }
    println!("{}", r.answer);
    let ids = |v: &[u64]| v.iter().map(|&i| id_hex(i)).collect::<Vec<_>>().join(",");
    eprintln!(
        "mode {} retrieved [{}] merged [{}] prompt {} tokens, generated {}",
        r.mode,
        ids(&r.retrieved.ids()),
        ids(&r.merged_doc_ids),
        r.prompt_token_count,
        r.generated_token_count
    );
    if let Some(f) = &r.fallback {
        eprintln!("fallback: {}", serde_json::to_string(f)?);
    }
    Ok(())
}

fn serve(cfg: &RunConfig) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let cfg = cfg.clone();
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.service.bind).await.with_context(|| format!("binding {}", cfg.service.bind))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let state = crate::server::AppState::new(cfg.service.default_mode, cfg.service.default_k);
        crate::server::serve(listener, state, move || build_pipeline(&cfg)).await?;
        Ok(())
    })
}

fn eval(cfg: &RunConfig, limit: Option<usize>) -> Result<()> {
    let path = cfg.paths.qa();
    let f = fs::File::open(&path).with_context(|| format!("opening QA file {}", path.display()))?;
    let mut items = read_qa_jsonl(BufReader::new(f))?;
    if let Some(n) = limit {
        items.truncate(n);
    }
    let pipeline = build_pipeline(cfg)?;
    let report = run_benchmark(&items, &cfg.eval.modes, cfg.retrieval.k, &pipeline, cfg.eval.jobs.max(1));
    let dir = cfg.paths.reports();
    write_file(&dir.join("eval.json"), report.to_json().as_bytes())?;
    write_file(&dir.join("eval.txt"), report.text_table().as_bytes())?;
    print!("{}", report.text_table());
    eprintln!("report written to {}", dir.display());
    Ok(())
}

/// `1234567` -> `1,234,567`.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cost(cfg: &RunConfig, a: &CostArgs) -> Result<()> {
    let layers = a.layers.unwrap_or(cfg.model.n_layers as u64);
    let hidden = a.hidden.unwrap_or(cfg.model.hidden as u64);
    let ffn = a.ffn.unwrap_or(cfg.model.ffn_intermediate as u64);
    let rank = a.rank.unwrap_or(cfg.adapter.rank as u64);
    let s = storage_estimate(layers, hidden, ffn, rank, a.bytes);
    println!("layers {layers} hidden {hidden} ffn {ffn} rank {rank} bytes/param {}", a.bytes);
    println!("storage per document: {} params / {:.2} MB ({} bytes)", group_digits(s.params), s.bytes as f64 / 1e6, group_digits(s.bytes));
    if let Some(d) = a.doc_tokens {
        let c = compute_cost_estimate(d);
        println!(
            "offline compute for |d|={d}: augment {} (decode {} + forward {}), train {} (forward {} + backward {}), total {} token-equivalents",
            c.augmentation(),
            c.augment_decode,
            c.augment_forward,
            c.training(),
            c.train_forward,
            c.train_backward,
            c.total
        );
        if let Some(q) = a.q_tokens {
            let o = online_saving_estimate(q, d, a.t);
            println!("online input tokens with t={}: in-context {}, parametric {}, saved {}", a.t, o.in_context_input, o.parametric_input, o.saved);
        }
    }
    Ok(())
}
