//! `prag`: the offline phase (corpus, pretraining, indexing, adapter
//! training) and the online phase (one-shot queries, the HTTP service,
//! benchmarks) behind one binary.
//!
//! Exit status: 0 on success, 2 for usage and configuration errors, 1 for
//! anything that fails while running.

pub mod commands;
pub mod config;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use prag_core::pipeline::Mode;

use crate::config::{AugmenterKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "prag", version, about = "Parametric retrieval-augmented generation at desk scale")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Data root (overrides PRAG_ROOT and the config file).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its held-out QA set.
    GenCorpus(GenCorpusArgs),
    /// Pretrain the base model on synthetic text.
    Pretrain(PretrainArgs),
    /// Build the BM25 index over the corpus.
    Index(IndexArgs),
    /// Augment and train one adapter per document.
    Parameterize(ParameterizeArgs),
    /// Train the warm-up adapter used as a shared initialization.
    Warmup(WarmupArgs),
    /// Answer one question.
    Query(QueryArgs),
    /// Run the HTTP query service.
    Serve(ServeArgs),
    /// Benchmark modes on a QA file.
    Eval(EvalArgs),
    /// Storage and compute estimates.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub docs: Option<usize>,
    #[arg(long)]
    pub triples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// People in the pretraining world.
    #[arg(long)]
    pub mix_docs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Architecture preset.
    #[arg(long, value_parser = ["desk", "tiny"])]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub k1: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ParameterizeArgs {
    /// Comma-separated doc ids; all documents when absent.
    #[arg(long, value_delimiter = ',')]
    pub docs: Vec<String>,
    /// Only the first N selected documents.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: u32,
    /// Retrain documents that already have an adapter.
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long, value_parser = ["rule-based", "llm"])]
    pub augmenter: Option<String>,
    #[arg(long)]
    pub rewrites: Option<usize>,
    #[arg(long)]
    pub qa_pairs: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from the warm-up adapter.
    #[arg(long)]
    pub warmup_init: bool,
}

#[derive(Debug, Args)]
pub struct WarmupArgs {
    #[arg(long)]
    pub questions: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub question: String,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Print the full result as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// QA JSONL; defaults to the generated held-out set.
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<Mode>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub layers: Option<u64>,
    #[arg(long)]
    pub hidden: Option<u64>,
    #[arg(long)]
    pub ffn: Option<u64>,
    #[arg(long)]
    pub rank: Option<u64>,
    /// Bytes per stored parameter.
    #[arg(long, default_value_t = 4)]
    pub bytes: u64,
    /// Document length for the offline compute breakdown.
    #[arg(long)]
    pub doc_tokens: Option<u64>,
    /// Question length for the online saving estimate.
    #[arg(long)]
    pub q_tokens: Option<u64>,
    /// Documents that in-context injection would put in the prompt.
    #[arg(long, default_value_t = 3)]
    pub t: u64,
}

/// Folds the flags of `cli` into the configuration.
pub fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(root) = &cli.root {
        cfg.paths.root = root.clone();
    }
    match &cli.command {
        Command::GenCorpus(a) => {
            set(&mut cfg.corpus.docs, a.docs);
            set(&mut cfg.corpus.triples_per_doc, a.triples);
            set(&mut cfg.corpus.seed, a.seed);
        }
        Command::Pretrain(a) => {
            if let Some(p) = &a.preset {
                cfg.model = if p == "tiny" { prag_core::model::ModelConfig::tiny() } else { prag_core::model::ModelConfig::desk() };
            }
            set(&mut cfg.pretrain.steps, a.steps);
            set(&mut cfg.pretrain.batch_size, a.batch_size);
            set(&mut cfg.pretrain.learning_rate, a.lr);
            set(&mut cfg.mix.docs, a.mix_docs);
            set(&mut cfg.pretrain.seed, a.seed);
        }
        Command::Index(a) => {
            set(&mut cfg.retrieval.k1, a.k1);
            set(&mut cfg.retrieval.b, a.b);
        }
        Command::Parameterize(a) => {
            if let Some(kind) = &a.augmenter {
                cfg.augment.kind = if kind == "llm" { AugmenterKind::Llm } else { AugmenterKind::RuleBased };
            }
            set(&mut cfg.augment.rewrites, a.rewrites);
            set(&mut cfg.augment.qa_pairs, a.qa_pairs);
            set(&mut cfg.adapter.rank, a.rank);
            set(&mut cfg.adapter.alpha, a.alpha);
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.seed, a.seed);
            cfg.warmup.use_as_init |= a.warmup_init;
        }
        Command::Warmup(a) => {
            set(&mut cfg.warmup.questions, a.questions);
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.warmup.seed, a.seed);
        }
        Command::Query(a) => {
            set(&mut cfg.service.default_mode, a.mode);
            set(&mut cfg.retrieval.k, a.k);
        }
        Command::Serve(a) => set(&mut cfg.service.bind, a.bind.clone()),
        Command::Eval(a) => {
            if !a.modes.is_empty() {
                cfg.eval.modes = a.modes.clone();
            }
            set(&mut cfg.retrieval.k, a.k);
            set(&mut cfg.eval.jobs, a.jobs);
            if let Some(qa) = &a.qa {
                cfg.paths.qa = Some(qa.clone());
            }
        }
        Command::Cost(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    eprintln!("resolved config: {}", serde_json::to_string(&cfg).expect("config serializes"));
    match commands::execute(&cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
