//! `RunConfig`: one JSON file for every subcommand. Flags override it, and
//! `PRAG_ROOT` / `PRAG_BIND` override the data root and bind address.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use prag_core::adapters::AdapterConfig;
use prag_core::augment::{AugmenterEndpoint, PretrainMix};
use prag_core::model::{ModelConfig, PretrainHyper};
use prag_core::pipeline::{Mode, DEFAULT_MAX_NEW_TOKENS};
use prag_core::retriever::{DEFAULT_B, DEFAULT_K1, DEFAULT_TOP_K};
use prag_core::trainer::TrainHyper;
use serde::{Deserialize, Serialize};

pub const ROOT_ENV: &str = "PRAG_ROOT";
pub const BIND_ENV: &str = "PRAG_BIND";

/// Every file location. Unset entries live under `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub root: PathBuf,
    pub corpus: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub parametric: Option<PathBuf>,
    pub warmup: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { root: PathBuf::from("prag-data"), corpus: None, qa: None, base: None, index: None, parametric: None, warmup: None, reports: None }
    }
}

impl Paths {
    fn under(&self, set: &Option<PathBuf>, name: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.root.join(name))
    }

    pub fn corpus(&self) -> PathBuf {
        self.under(&self.corpus, "corpus.jsonl")
    }

    pub fn qa(&self) -> PathBuf {
        self.under(&self.qa, "qa.jsonl")
    }

    pub fn base(&self) -> PathBuf {
        self.under(&self.base, "base.ckpt")
    }

    pub fn index(&self) -> PathBuf {
        self.under(&self.index, "index.json")
    }

    pub fn parametric(&self) -> PathBuf {
        self.under(&self.parametric, "parametric")
    }

    pub fn warmup(&self) -> PathBuf {
        self.under(&self.warmup, "warmup.pra")
    }

    pub fn reports(&self) -> PathBuf {
        self.under(&self.reports, "reports")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.parametric().join("train_manifest.jsonl")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmenterKind {
    RuleBased,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSettings {
    /// Rewrites per document besides the original.
    pub rewrites: usize,
    pub qa_pairs: usize,
    pub kind: AugmenterKind,
    pub seed: u64,
    pub endpoint: AugmenterEndpoint,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings { rewrites: 1, qa_pairs: 3, kind: AugmenterKind::RuleBased, seed: 0, endpoint: AugmenterEndpoint::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSettings {
    pub k1: f64,
    pub b: f64,
    pub k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings { k1: DEFAULT_K1, b: DEFAULT_B, k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub docs: usize,
    pub triples_per_doc: usize,
    pub seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings { docs: 64, triples_per_doc: 3, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupSettings {
    pub questions: usize,
    pub seed: u64,
    /// Start every document's adapter from the warm-up adapter instead of a random init.
    pub use_as_init: bool,
}

impl Default for WarmupSettings {
    fn default() -> Self {
        WarmupSettings { questions: 600, seed: 11, use_as_init: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSettings {
    pub bind: String,
    pub default_mode: Mode,
    pub default_k: usize,
    pub max_new_tokens: usize,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings { bind: "127.0.0.1:8080".into(), default_mode: Mode::Parametric, default_k: DEFAULT_TOP_K, max_new_tokens: DEFAULT_MAX_NEW_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub modes: Vec<Mode>,
    pub jobs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { modes: Mode::ALL.to_vec(), jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub pretrain: PretrainHyper,
    pub mix: PretrainMix,
    pub adapter: AdapterConfig,
    pub train: TrainHyper,
    pub augment: AugmentSettings,
    pub retrieval: RetrievalSettings,
    pub corpus: CorpusSettings,
    pub warmup: WarmupSettings,
    pub service: ServiceSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    /// Reads `path` if given, else the defaults; then applies the environment.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(root) = std::env::var_os(ROOT_ENV).filter(|v| !v.is_empty()) {
            cfg.paths.root = PathBuf::from(root);
        }
        if let Ok(bind) = std::env::var(BIND_ENV) {
            if !bind.is_empty() {
                cfg.service.bind = bind;
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.adapter.validate(&self.model)?;
        self.train.validate()?;
        let r = &self.retrieval;
        if !(r.k1 > 0.0 && r.k1.is_finite() && (0.0..=1.0).contains(&r.b)) {
            bail!("retrieval.k1 must be > 0 and retrieval.b in [0, 1]");
        }
        if r.k == 0 || self.service.default_k == 0 {
            bail!("retrieval.k and service.default_k must be >= 1");
        }
        if self.augment.qa_pairs == 0 {
            bail!("augment.qa_pairs must be >= 1");
        }
        if self.pretrain.batch_size == 0 {
            bail!("pretrain.batch_size must be >= 1");
        }
        if self.service.max_new_tokens == 0 {
            bail!("service.max_new_tokens must be >= 1");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
