//! A small pre-norm decoder-only transformer with frozen base weights.
//!
//! Layout per layer: `x += Attn(LN1(x)); x += FFN(LN2(x))` with
//! `FFN(u) = GELU(u W_up + b_up) W_down + b_down`. Only `W_up` and `W_down`
//! accept deltas. Parameters live in one flat buffer so checkpointing,
//! fingerprinting and optimizer updates are simple slices.

pub mod checkpoint;
pub mod math;
mod pretrain;
pub(crate) mod transformer;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::MergedDelta;
use crate::hash::Fnv64;
use crate::text::{TokenId, EOS, VOCAB_SIZE};
use math::{log_sum_exp, Real};
pub use pretrain::{pretrain_base, pretrain_on_sequences, text_to_sequences, PretrainHyper, PretrainReport, RECORD_SEPARATOR, SEP_CHAR};
pub(crate) use transformer::{backward, forward_trace, DenseDelta, FfnDelta, GradRequest, LogitRows};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {0} outside the vocabulary")]
    InvalidToken(TokenId),
    #[error("delta fingerprint {found:016x} does not match model fingerprint {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("every position is masked")]
    AllMasked,
    #[error("length mismatch: {what}")]
    LengthMismatch { what: &'static str },
    #[error("pretraining text is empty")]
    EmptyText,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture dimensions. `ffn_intermediate` is the FFN width `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub ffn_intermediate: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 4 layers, h=128, l=512, 4 heads, 512 positions.
    pub fn desk() -> Self {
        ModelConfig { n_layers: 4, hidden: 128, ffn_intermediate: 512, n_heads: 4, vocab: VOCAB_SIZE, max_seq_len: 512 }
    }

    /// The 2-layer, h=16 configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig { n_layers: 2, hidden: 16, ffn_intermediate: 64, n_heads: 2, vocab: VOCAB_SIZE, max_seq_len: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.hidden, self.ffn_intermediate, self.n_heads, self.max_seq_len];
        if dims.contains(&0) {
            return Err(ModelError::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!("hidden {} not divisible by n_heads {}", self.hidden, self.n_heads)));
        }
        if self.vocab != VOCAB_SIZE {
            return Err(ModelError::InvalidConfig(format!("vocab must be {VOCAB_SIZE}, got {}", self.vocab)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

/// Offsets of one transformer block inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    /// `hidden x ffn_intermediate`, row-major.
    pub w_up: Range<usize>,
    pub b_up: Range<usize>,
    /// `ffn_intermediate x hidden`, row-major.
    pub w_down: Range<usize>,
    pub b_down: Range<usize>,
}

/// Tensor order in the flat buffer (and in checkpoints): token embedding,
/// position embedding, each block in order, final norm, output head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (h, l, v) = (cfg.hidden, cfg.ffn_intermediate, cfg.vocab);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let tok_emb = take(v * h);
        let pos_emb = take(cfg.max_seq_len * h);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(h),
                ln1_b: take(h),
                w_qkv: take(h * 3 * h),
                b_qkv: take(3 * h),
                w_o: take(h * h),
                b_o: take(h),
                ln2_g: take(h),
                ln2_b: take(h),
                w_up: take(h * l),
                b_up: take(l),
                w_down: take(l * h),
                b_down: take(h),
            })
            .collect();
        let lnf_g = take(h);
        let lnf_b = take(h);
        let head = take(h * v);
        ParamLayout { tok_emb, pos_emb, layers, lnf_g, lnf_b, head, total: at }
    }

    /// Named tensors in declared order.
    pub fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb.clone()), ("pos_emb".to_string(), self.pos_emb.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, r) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w_qkv", &l.w_qkv),
                ("b_qkv", &l.b_qkv),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_up", &l.w_up),
                ("b_up", &l.b_up),
                ("w_down", &l.w_down),
                ("b_down", &l.b_down),
            ] {
                out.push((format!("layers.{i}.{name}"), r.clone()));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g.clone()));
        out.push(("lnf_b".to_string(), self.lnf_b.clone()));
        out.push(("head".to_string(), self.head.clone()));
        out
    }
}

/// Flat parameter buffer plus its layout, generic over precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

impl<T: Real> Params<T> {
    /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    /// 1/sqrt(2n), unit norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut data = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |range: Range<usize>, sd: f64, data: &mut [T]| {
            let dist = Normal::new(0.0, sd).expect("valid std");
            for v in &mut data[range] {
                *v = T::lit(dist.sample(&mut rng) as f32 as f64);
            }
        };
        fill(layout.tok_emb.clone(), std, &mut data);
        fill(layout.pos_emb.clone(), std / 2.0, &mut data);
        for l in &layout.layers {
            fill(l.w_qkv.clone(), std, &mut data);
            fill(l.w_o.clone(), resid_std, &mut data);
            fill(l.w_up.clone(), std, &mut data);
            fill(l.w_down.clone(), resid_std, &mut data);
            data[l.ln1_g.clone()].fill(T::one());
            data[l.ln2_g.clone()].fill(T::one());
        }
        data[layout.lnf_g.clone()].fill(T::one());
        fill(layout.head.clone(), std, &mut data);
        Ok(Params { config, layout, data })
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { config: self.config, layout: self.layout.clone(), data: self.data.iter().map(|v| U::from(*v).expect("finite parameter")).collect() }
    }

    pub fn w_up(&self, layer: usize) -> &[T] {
        &self.data[self.layout.layers[layer].w_up.clone()]
    }

    pub fn w_down(&self, layer: usize) -> &[T] {
        &self.data[self.layout.layers[layer].w_down.clone()]
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SeqTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(ModelError::InvalidToken(bad));
        }
        Ok(())
    }
}

/// Frozen fp32 base model with its fingerprint.
///
/// There is no mutable access to the weights: adapters are evaluated
/// alongside them, never written into them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    params: Params<f32>,
    fingerprint: u64,
}

impl ModelParams {
    pub fn new(params: Params<f32>) -> Self {
        let fingerprint = fingerprint_of(&params);
        ModelParams { params, fingerprint }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(Params::init(config, seed)?))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn into_params(self) -> Params<f32> {
        self.params
    }
}

/// Hash of the architecture and every weight byte.
pub fn fingerprint_of(params: &Params<f32>) -> u64 {
    let c = &params.config;
    let mut h = Fnv64::new();
    for dim in [c.n_layers, c.hidden, c.ffn_intermediate, c.n_heads, c.vocab, c.max_seq_len] {
        h.write_u64(dim as u64);
    }
    for v in &params.data {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

/// Base weights, optionally paired with a merged FFN delta (`W' = W + dW`).
#[derive(Debug, Clone, Copy)]
pub struct EffectiveWeights<'a> {
    pub base: &'a ModelParams,
    pub delta: Option<&'a MergedDelta>,
}

impl<'a> EffectiveWeights<'a> {
    pub fn base_only(base: &'a ModelParams) -> Self {
        EffectiveWeights { base, delta: None }
    }

    fn ffn_delta(&self) -> Result<FfnDelta<'a, f32>> {
        match self.delta {
            None => Ok(FfnDelta::None),
            Some(d) => {
                if d.model_fingerprint != self.base.fingerprint {
                    return Err(ModelError::FingerprintMismatch { expected: self.base.fingerprint, found: d.model_fingerprint });
                }
                Ok(FfnDelta::Dense(d.dense_view(self.base.config().n_layers)))
            }
        }
    }
}

/// Row-major `rows x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

/// Logits for every position of `tokens`.
pub fn forward(weights: &EffectiveWeights<'_>, tokens: &[TokenId]) -> Result<Logits> {
    let params = weights.base.params();
    params.check_tokens(tokens)?;
    let delta = weights.ffn_delta()?;
    let trace = forward_trace(params, &delta, tokens, LogitRows::All);
    Ok(Logits { rows: tokens.len(), vocab: params.config.vocab, data: trace.logits })
}

/// Mean over unmasked positions of `-log softmax(logits_t)[target_t]`,
/// accumulated in fp64.
pub fn lm_loss(logits: &Logits, targets: &[TokenId], mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows {
        return Err(ModelError::LengthMismatch { what: "targets vs logits rows" });
    }
    if mask.len() != targets.len() {
        return Err(ModelError::LengthMismatch { what: "mask vs targets" });
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut row64 = vec![0.0f64; logits.vocab];
    for (i, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if tgt as usize >= logits.vocab {
            return Err(ModelError::InvalidToken(tgt));
        }
        for (d, &s) in row64.iter_mut().zip(logits.row(i)) {
            *d = f64::from(s);
        }
        total += log_sum_exp(&row64) - row64[tgt as usize];
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::AllMasked);
    }
    Ok(total / count as f64)
}

/// Mean masked NLL and its gradient w.r.t. the logits, in the model's
/// precision. `logits` is `targets.len() x vocab`.
pub(crate) fn loss_and_dlogits<T: Real>(logits: &[T], vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<(T, Vec<T>)> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::AllMasked);
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (i, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let lse = log_sum_exp(row);
        loss += lse - row[tgt as usize];
        let drow = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (d, &s) in drow.iter_mut().zip(row) {
            *d = (s - lse).exp() * inv;
        }
        drow[tgt as usize] -= inv;
    }
    Ok((loss * inv, dlogits))
}

/// Shifts a training sequence into (inputs, targets, target mask).
///
/// `mask[i]` says whether token `i` contributes to the loss, so the
/// prediction of token `i + 1` is kept when `mask[i + 1]` is set.
pub(crate) fn shift<'s>(ids: &'s [TokenId], mask: &'s [bool]) -> (&'s [TokenId], &'s [TokenId], &'s [bool]) {
    (&ids[..ids.len() - 1], &ids[1..], &mask[1..])
}

/// Appends argmax tokens (lowest id on ties) until EOS or `max_new`.
/// Returns the prompt followed by the generated tokens.
pub fn generate_greedy(weights: &EffectiveWeights<'_>, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    let params = weights.base.params();
    params.check_tokens(prompt)?;
    let max = params.config.max_seq_len;
    if prompt.len() + max_new > max {
        return Err(ModelError::SeqTooLong { len: prompt.len() + max_new, max });
    }
    let delta = weights.ffn_delta()?;
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let trace = forward_trace(params, &delta, &seq, LogitRows::Last);
        let next = argmax(&trace.logits);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}

/// First index of the maximum (ties go to the lowest id).
pub fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}
