//! Full-parameter next-token pretraining of the base model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward_trace, loss_and_dlogits, FfnDelta, GradRequest, LogitRows, ModelConfig, ModelError, ModelParams, Params, Result};
use crate::optim::{clip_grad_norm, AdamW};
use crate::text::{TokenId, BOS, EOS, SEP};

/// Records in pretraining text are separated by a blank line.
pub const RECORD_SEPARATOR: &str = "\n\n";
/// Inside a record this character stands for the SEP token.
pub const SEP_CHAR: char = '\u{1f}';

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak (cosine decay).
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            steps: 1600,
            batch_size: 16,
            learning_rate: 2e-3,
            warmup_steps: 50,
            final_lr_fraction: 0.1,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl PretrainHyper {
    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.final_lr_fraction;
        self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss of each step's batch.
    pub losses: Vec<f32>,
    pub tokens: usize,
    pub seconds: f64,
}

/// Splits text into records and encodes each as `[BOS] bytes [EOS]`, mapping
/// [`SEP_CHAR`] to SEP and truncating to `max_len` tokens.
pub fn text_to_sequences(text: &str, max_len: usize) -> Vec<Vec<TokenId>> {
    text.split(RECORD_SEPARATOR)
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|record| {
            let mut ids = vec![BOS];
            for ch in record.chars() {
                if ch == SEP_CHAR {
                    ids.push(SEP);
                } else {
                    let mut buf = [0u8; 4];
                    ids.extend(ch.encode_utf8(&mut buf).bytes().map(TokenId::from));
                }
            }
            ids.push(EOS);
            ids.truncate(max_len);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect()
}

/// Trains from scratch on `corpus_text` with default hyperparameters.
pub fn pretrain_base(corpus_text: &str, config: ModelConfig, steps: usize, seed: u64) -> Result<ModelParams> {
    let hyper = PretrainHyper { steps, seed, ..PretrainHyper::default() };
    let seqs = text_to_sequences(corpus_text, config.max_seq_len);
    if seqs.is_empty() {
        return Err(ModelError::EmptyText);
    }
    pretrain_on_sequences(config, &seqs, &hyper, |_, _| {}).map(|(m, _)| m)
}

/// Next-token training on pre-tokenized sequences. Each step draws
/// `batch_size` sequences uniformly with replacement.
pub fn pretrain_on_sequences(
    config: ModelConfig,
    seqs: &[Vec<TokenId>],
    hyper: &PretrainHyper,
    mut on_step: impl FnMut(usize, f32),
) -> Result<(ModelParams, PretrainReport)> {
    if seqs.is_empty() || seqs.iter().all(|s| s.len() < 2) {
        return Err(ModelError::EmptyText);
    }
    if hyper.steps == 0 || hyper.batch_size == 0 {
        return Err(ModelError::InvalidConfig("steps and batch_size must be >= 1".into()));
    }
    let usable: Vec<&Vec<TokenId>> = seqs.iter().filter(|s| s.len() >= 2).collect();
    let started = Instant::now();
    let mut params = Params::<f32>::init(config, hyper.seed)?;
    for s in &usable {
        params.check_tokens(s)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5e_ed0f_da7a);
    let mut opt = AdamW::<f32>::new(params.data.len(), hyper.weight_decay);
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut tokens = 0usize;
    let mut grad = vec![0.0f32; params.data.len()];
    for step in 0..hyper.steps {
        grad.fill(0.0);
        let mut batch_loss = 0.0f32;
        for _ in 0..hyper.batch_size {
            let seq = usable[rng.random_range(0..usable.len())];
            let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
            let mask = vec![true; targets.len()];
            let trace = forward_trace(&params, &FfnDelta::None, inputs, LogitRows::All);
            let (loss, dlogits) = loss_and_dlogits(&trace.logits, config.vocab, targets, &mask)?;
            let g = backward(&params, &FfnDelta::None, &trace, &dlogits, GradRequest { base: true, lora: false });
            for (acc, x) in grad.iter_mut().zip(g.base.expect("base grads requested")) {
                *acc += x;
            }
            batch_loss += loss;
            tokens += targets.len();
        }
        let inv = 1.0 / hyper.batch_size as f32;
        grad.iter_mut().for_each(|g| *g *= inv);
        batch_loss *= inv;
        if !batch_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step });
        }
        clip_grad_norm(&mut grad, hyper.grad_clip_norm);
        opt.step(&mut params.data, &grad, hyper.lr_at(step));
        losses.push(batch_loss);
        on_step(step, batch_loss);
    }
    let report = PretrainReport { losses, tokens, seconds: started.elapsed().as_secs_f64() };
    Ok((ModelParams::new(params), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_become_bos_eos_sequences() {
        let seqs = text_to_sequences("ab\u{1f}c\n\n\n\nd", 64);
        assert_eq!(seqs, vec![vec![BOS, 97, 98, SEP, 99, EOS], vec![BOS, 100, EOS]]);
        assert!(text_to_sequences("   \n\n ", 64).is_empty());
        assert_eq!(text_to_sequences("abcdef", 3), vec![vec![BOS, 97, 98]]);
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let h = PretrainHyper { steps: 100, warmup_steps: 10, learning_rate: 1.0, final_lr_fraction: 0.1, ..Default::default() };
        assert!((h.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((h.lr_at(9) - 1.0).abs() < 1e-12);
        assert!(h.lr_at(50) < 1.0 && h.lr_at(50) > 0.1);
        assert!((h.lr_at(99) - 0.1).abs() < 1e-3);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert_eq!(pretrain_base("", ModelConfig::tiny(), 1, 0).unwrap_err(), ModelError::EmptyText);
    }

    #[test]
    fn periodic_text_is_learned_and_deterministic() {
        let cfg = ModelConfig { max_seq_len: 32, ..ModelConfig::tiny() };
        let text = "abababababababababababababab\n\nbababababababababababababa";
        let hyper = PretrainHyper { steps: 60, batch_size: 2, warmup_steps: 5, learning_rate: 1e-2, seed: 3, ..Default::default() };
        let seqs = text_to_sequences(text, cfg.max_seq_len);
        let (m1, report) = pretrain_on_sequences(cfg, &seqs, &hyper, |_, _| {}).unwrap();
        let (m2, _) = pretrain_on_sequences(cfg, &seqs, &hyper, |_, _| {}).unwrap();
        assert_eq!(m1.params().data, m2.params().data);
        assert_eq!(m1.fingerprint(), m2.fingerprint());
        let last = *report.losses.last().unwrap();
        assert!(f64::from(last) < (260f64).ln(), "final loss {last}");
        assert!(last < report.losses[0]);
    }
}
