//! Pretraining text for the base model, drawn from the half of the name
//! space that evaluation corpora never use.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{answer_for, gen_world, relation, render, Partition};
use super::{rewrite_rule_based, AugmentError, QaPair};
use crate::model::{RECORD_SEPARATOR, SEP_CHAR};
use crate::pipeline::prompt::answered_text;

/// How many records of each kind to emit per generated person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainMix {
    pub docs: usize,
    pub triples_per_doc: usize,
    /// Plain rewrites besides the original text.
    pub rewrites: usize,
    /// Closed-book `Question/Answer` records per fact.
    pub closed_book: usize,
    /// Records with the document (plus distractors) as passages, per fact.
    pub in_context: usize,
    /// `doc SEP question SEP answer` records per fact.
    pub training_format: usize,
    pub max_distractors: usize,
    pub seed: u64,
}

impl Default for PretrainMix {
    fn default() -> Self {
        PretrainMix { docs: 3000, triples_per_doc: 3, rewrites: 1, closed_book: 1, in_context: 3, training_format: 1, max_distractors: 2, seed: 1 }
    }
}

/// Records separated by blank lines; `SEP_CHAR` stands for the SEP token.
pub fn pretraining_text(mix: &PretrainMix) -> Result<String, AugmentError> {
    let world = gen_world(mix.docs, mix.triples_per_doc, mix.seed, Partition::Odd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix.seed ^ 0x9e37_79b9);
    let mut records: Vec<String> = Vec::new();
    let texts: Vec<&str> = world.docs.iter().map(|d| d.doc.text.as_str()).collect();
    for sd in &world.docs {
        let mut variants = vec![sd.doc.text.clone()];
        variants.extend(rewrite_rule_based(&sd.doc, mix.rewrites, mix.seed));
        records.extend(variants.iter().cloned());
        for t in &sd.triples {
            let r = relation(&t.relation).expect("generated relations are known");
            let all_q: Vec<&str> = r.questions.iter().chain(r.held_out).copied().collect();
            for _ in 0..mix.closed_book {
                let tpl = all_q.choose(&mut rng).expect("templates exist");
                records.push(answered_text(&render(tpl, t), [], answer_for(tpl, t)));
            }
            for _ in 0..mix.in_context {
                let tpl = all_q.choose(&mut rng).expect("templates exist");
                let own = variants.choose(&mut rng).expect("original present").as_str();
                let mut passages = vec![own];
                for _ in 0..rng.random_range(0..=mix.max_distractors) {
                    passages.push(texts.choose(&mut rng).expect("non-empty world"));
                }
                passages.shuffle(&mut rng);
                records.push(answered_text(&render(tpl, t), passages, answer_for(tpl, t)));
            }
            for _ in 0..mix.training_format {
                let tpl = r.questions.choose(&mut rng).expect("templates exist");
                let own = variants.choose(&mut rng).expect("original present");
                records.push(format!("{own}{SEP_CHAR}{}{SEP_CHAR}{}", render(tpl, t), answer_for(tpl, t)));
            }
        }
    }
    records.shuffle(&mut rng);
    Ok(records.join(RECORD_SEPARATOR))
}

/// Closed-book QA over the pretraining half of the name space, phrased with
/// the training templates. Used to warm up adapter initializations.
pub fn warmup_qa(count: usize, seed: u64) -> Result<Vec<QaPair>, AugmentError> {
    if count == 0 {
        return Err(AugmentError::InvalidRequest("warm-up needs at least one question".into()));
    }
    let world = gen_world(count.div_ceil(3), 3, seed, Partition::Odd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5752_4d55);
    let mut out = Vec::with_capacity(count);
    for t in world.docs.iter().flat_map(|d| &d.triples).take(count) {
        let r = relation(&t.relation).expect("generated relations are known");
        let tpl = r.questions.choose(&mut rng).expect("templates exist");
        out.push(QaPair::new(render(tpl, t), answer_for(tpl, t)));
    }
    Ok(out)
}
