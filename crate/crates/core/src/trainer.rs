//! Per-document adapter training with the base frozen, warm-up
//! initialization, and a finite-difference gradient oracle.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterConfig, AdapterError, LoraWeights, LowRankAdapter};
use crate::augment::{AugmentedDataset, QaPair};
use crate::model::{
    backward, forward, forward_trace, lm_loss, loss_and_dlogits, shift, EffectiveWeights, FfnDelta, GradRequest, LogitRows, ModelError, ModelParams, Params,
};
use crate::optim::{clip_grad_norm, sgd_step, AdamW, OptimizerKind};
use crate::text::{encode_bytes, TokenId, BOS, EOS, PAD, SEP};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("adapter was built for model {found:016x}, base is {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max} even with the document dropped")]
    Overlong { len: usize, max: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("nothing to train on")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Must be zero; present so configs can state it.
    pub dropout: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { learning_rate: 3e-4, epochs: 1, optimizer: OptimizerKind::Adamw, weight_decay: 0.0, dropout: 0.0, grad_clip_norm: 1.0, seed: 0 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidHyper("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidHyper("epochs must be >= 1".into()));
        }
        if self.dropout != 0.0 {
            return Err(TrainError::InvalidHyper("dropout is not supported and must be 0".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip_norm < 0.0 {
            return Err(TrainError::InvalidHyper("weight_decay and grad_clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Loss of the first optimization step, before any update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub step_losses: Vec<f32>,
    pub tokens: usize,
    pub clipped_steps: usize,
    pub seconds: f64,
}

/// `[BOS] d [SEP] q [SEP] a [EOS]` with the loss mask false only at BOS.
///
/// When too long, the head of the document is dropped (its tail is kept);
/// the question and answer are never truncated.
pub fn build_sequence(doc: &str, question: &str, answer: &str, max_len: usize) -> Result<(Vec<TokenId>, Vec<bool>)> {
    let (d, q, a) = (encode_bytes(doc), encode_bytes(question), encode_bytes(answer));
    let fixed = 4 + q.len() + a.len();
    if fixed > max_len {
        return Err(TrainError::Overlong { len: fixed, max: max_len });
    }
    let keep = d.len().min(max_len - fixed);
    let mut ids = Vec::with_capacity(fixed + keep);
    ids.push(BOS);
    ids.extend_from_slice(&d[d.len() - keep..]);
    ids.push(SEP);
    ids.extend(q);
    ids.push(SEP);
    ids.extend(a);
    ids.push(EOS);
    let mut mask = vec![true; ids.len()];
    mask[0] = false;
    Ok((ids, mask))
}

/// `[BOS] q [SEP] a [EOS]`, the warm-up format.
pub fn build_qa_sequence(question: &str, answer: &str, max_len: usize) -> Result<(Vec<TokenId>, Vec<bool>)> {
    let (q, a) = (encode_bytes(question), encode_bytes(answer));
    let mut ids = Vec::with_capacity(q.len() + a.len() + 3);
    ids.push(BOS);
    ids.extend(q);
    ids.push(SEP);
    ids.extend(a);
    ids.push(EOS);
    if ids.len() > max_len {
        return Err(TrainError::Overlong { len: ids.len(), max: max_len });
    }
    let mut mask = vec![true; ids.len()];
    mask[0] = false;
    Ok((ids, mask))
}

/// Right-pads sequences to a common length with PAD, masking the padding.
pub fn pad_batch(seqs: &[(Vec<TokenId>, Vec<bool>)]) -> Vec<(Vec<TokenId>, Vec<bool>)> {
    let width = seqs.iter().map(|s| s.0.len()).max().unwrap_or(0);
    seqs.iter()
        .map(|(ids, mask)| {
            let mut ids = ids.clone();
            let mut mask = mask.clone();
            ids.resize(width, PAD);
            mask.resize(width, false);
            (ids, mask)
        })
        .collect()
}

fn dataset_sequences(dataset: &AugmentedDataset, max_len: usize) -> Result<Vec<(Vec<TokenId>, Vec<bool>)>> {
    dataset.triples().iter().map(|t| build_sequence(t.doc, t.question, t.answer, max_len)).collect()
}

fn check_fingerprint(base: &ModelParams, adapter: &LowRankAdapter) -> Result<()> {
    if adapter.model_fingerprint != base.fingerprint() {
        return Err(TrainError::FingerprintMismatch { expected: base.fingerprint(), found: adapter.model_fingerprint });
    }
    adapter.check_shapes(base.config())?;
    Ok(())
}

/// Loss and flattened adapter gradient of one sequence.
fn loss_and_grad<T: crate::model::math::Real>(params: &Params<T>, lora: &LoraWeights<T>, ids: &[TokenId], mask: &[bool]) -> Result<(T, Vec<T>)> {
    let (inputs, targets, tmask) = shift(ids, mask);
    let delta = FfnDelta::LowRank(lora);
    let trace = forward_trace(params, &delta, inputs, LogitRows::All);
    let (loss, dlogits) = loss_and_dlogits(&trace.logits, params.config.vocab, targets, tmask)?;
    let grads = backward(params, &delta, &trace, &dlogits, GradRequest { base: false, lora: true });
    let layers = grads.lora.expect("adapter grads requested");
    let flat = LoraWeights { rank: lora.rank, scale: lora.scale, layers }.flatten();
    Ok((loss, flat))
}

fn run_training(base: &ModelParams, seqs: &[(Vec<TokenId>, Vec<bool>)], init: &LowRankAdapter, hyper: &TrainHyper) -> Result<(LowRankAdapter, TrainReport)> {
    hyper.validate()?;
    check_fingerprint(base, init)?;
    if seqs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let params = base.params();
    for (ids, _) in seqs {
        params.check_tokens(ids)?;
    }
    let started = Instant::now();
    let mut lora = init.to_weights::<f32>();
    let mut flat = lora.flatten();
    let mut adam = AdamW::<f32>::new(flat.len(), hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(hyper.epochs),
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        step_losses: Vec::with_capacity(seqs.len() * hyper.epochs),
        tokens: 0,
        clipped_steps: 0,
        seconds: 0.0,
    };
    let mut step = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f64;
        for &i in &order {
            let (ids, mask) = &seqs[i];
            let (loss, mut grad) = loss_and_grad(params, &lora, ids, mask)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step });
            }
            if step == 0 {
                report.initial_loss = f64::from(loss);
            }
            if clip_grad_norm(&mut grad, hyper.grad_clip_norm).1 {
                report.clipped_steps += 1;
            }
            match hyper.optimizer {
                OptimizerKind::Adamw => adam.step(&mut flat, &grad, hyper.learning_rate),
                OptimizerKind::Sgd => sgd_step(&mut flat, &grad, hyper.learning_rate),
            }
            lora.set_flat(&flat);
            report.step_losses.push(loss);
            report.tokens += ids.iter().filter(|&&t| t != PAD).count();
            epoch_total += f64::from(loss);
            step += 1;
        }
        report.epoch_losses.push(epoch_total / seqs.len() as f64);
    }
    report.final_loss = *report.epoch_losses.last().expect("epochs >= 1");
    report.seconds = started.elapsed().as_secs_f64();
    let mut out = init.clone();
    out.set_weights(&lora);
    Ok((out, report))
}

/// Optimizes `init`'s factors on every (rewrite, question, answer) triple of
/// `dataset`, batch size 1, in seeded-shuffled order.
pub fn train_adapter(base: &ModelParams, dataset: &AugmentedDataset, init: &LowRankAdapter, hyper: &TrainHyper) -> Result<(LowRankAdapter, TrainReport)> {
    let seqs = dataset_sequences(dataset, base.config().max_seq_len)?;
    let (adapter, report) = run_training(base, &seqs, init, hyper)?;
    Ok((adapter.with_doc_id(dataset.doc_id), report))
}

/// Trains a fresh adapter on `[BOS] q [SEP] a [EOS]` sequences. The result
/// (doc id 0) serves as the shared init for per-document training.
pub fn warmup_init(base: &ModelParams, qa_pairs: &[QaPair], config: AdapterConfig, hyper: &TrainHyper) -> Result<(LowRankAdapter, TrainReport)> {
    if qa_pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let max = base.config().max_seq_len;
    let seqs = qa_pairs.iter().map(|p| build_qa_sequence(&p.question, &p.answer, max)).collect::<Result<Vec<_>>>()?;
    let init = LowRankAdapter::new_random(config, base, 0, hyper.seed)?;
    run_training(base, &seqs, &init, hyper)
}

/// Mean next-token loss of `ids` under `weights`, positions selected by `mask`.
pub fn sequence_loss(weights: &EffectiveWeights<'_>, ids: &[TokenId], mask: &[bool]) -> Result<f64> {
    if ids.len() < 2 || mask.len() != ids.len() {
        return Err(TrainError::Model(ModelError::LengthMismatch { what: "sequence and mask" }));
    }
    let (inputs, targets, tmask) = shift(ids, mask);
    let logits = forward(weights, inputs)?;
    Ok(lm_loss(&logits, targets, tmask)?)
}

/// Per-token loss of plain text, `[BOS] text [EOS]`, excluding the BOS position.
pub fn text_loss(weights: &EffectiveWeights<'_>, text: &str) -> Result<f64> {
    let mut ids = vec![BOS];
    ids.extend(encode_bytes(text));
    ids.push(EOS);
    let mut mask = vec![true; ids.len()];
    mask[0] = false;
    sequence_loss(weights, &ids, &mask)
}

/// Central differences `(f(x+e) - f(x-e)) / 2e` at the chosen coordinates.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let fp = f(&probe);
            probe[i] = orig - eps;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Numeric gradient of the sequence loss w.r.t. the adapter's flattened
/// factors (layer order; up A, up B, down A, down B), evaluated in fp64.
/// `coords = None` probes every scalar.
pub fn finite_diff_grad(base: &ModelParams, adapter: &LowRankAdapter, ids: &[TokenId], mask: &[bool], eps: f64, coords: Option<&[usize]>) -> Result<Vec<f64>> {
    check_fingerprint(base, adapter)?;
    let params = base.params().cast::<f64>();
    params.check_tokens(ids)?;
    let mut lora = adapter.to_weights::<f64>();
    let x = lora.flatten();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let (inputs, targets, tmask) = shift(ids, mask);
    if !tmask.iter().any(|&m| m) {
        return Err(TrainError::Model(ModelError::AllMasked));
    }
    Ok(central_difference(
        |w| {
            lora.set_flat(w);
            let trace = forward_trace(&params, &FfnDelta::LowRank(&lora), inputs, LogitRows::All);
            loss_and_dlogits(&trace.logits, params.config.vocab, targets, tmask).expect("mask checked").0
        },
        &x,
        coords,
        eps,
    ))
}

/// Analytic loss and adapter gradient in fp64, same layout as [`finite_diff_grad`].
pub fn analytic_grad(base: &ModelParams, adapter: &LowRankAdapter, ids: &[TokenId], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_fingerprint(base, adapter)?;
    let params = base.params().cast::<f64>();
    params.check_tokens(ids)?;
    let lora = adapter.to_weights::<f64>();
    loss_and_grad(&params, &lora, ids, mask)
}
