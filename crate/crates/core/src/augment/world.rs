//! Fabricated fact world: nonsense entities, relation templates, rendering
//! and the inverse (template-matching) extractor.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentError, QaPair};
use crate::hash::{fnv64, Fnv64};
use crate::retriever::{Corpus, Document};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl FactTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        FactTriple { subject: subject.into(), relation: relation.into(), object: object.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Person,
    City,
    Country,
    Language,
    Guild,
    Instrument,
    School,
}

impl EntityKind {
    fn suffixes(self) -> &'static [&'static str] {
        match self {
            EntityKind::Person => &[],
            EntityKind::City => &["ovar", "esk", "ubrin"],
            EntityKind::Country => &["eth", "azia", "undor"],
            EntityKind::Language => &["ikh", "oshi", "yrren"],
            EntityKind::Guild => &["axcorp", "ulgild", "ohaus"],
            EntityKind::Instrument => &["ophone", "aluth", "izzar"],
            EntityKind::School => &["akadem", "oxium", "ylyceum"],
        }
    }
}

/// A relation with its sentence bank. `{s}` and `{o}` mark the subject and
/// object. A question answers whichever side it does not mention.
#[derive(Debug)]
pub struct Relation {
    pub name: &'static str,
    pub subject: EntityKind,
    pub object: EntityKind,
    pub statements: &'static [&'static str],
    pub questions: &'static [&'static str],
    pub held_out: &'static [&'static str],
}

pub static RELATIONS: &[Relation] = &[
    Relation {
        name: "born_in",
        subject: EntityKind::Person,
        object: EntityKind::City,
        statements: &["{s} was born in {o}.", "The birthplace of {s} is {o}.", "{o} is the city where {s} was born.", "{s} came into the world in {o}."],
        questions: &["Where was {s} born?", "What is the birthplace of {s}?", "In which city was {s} born?"],
        held_out: &["Which city is the hometown of {s}?", "{s} was born in which city?"],
    },
    Relation {
        name: "citizen_of",
        subject: EntityKind::Person,
        object: EntityKind::Country,
        statements: &["{s} is a citizen of {o}.", "{s} holds citizenship in {o}.", "The homeland of {s} is {o}.", "{o} granted citizenship to {s}."],
        questions: &["Which country is {s} a citizen of?", "What is the homeland of {s}?", "Where does {s} hold citizenship?"],
        held_out: &["{s} is a citizen of which country?", "What nation does {s} belong to?"],
    },
    Relation {
        name: "speaks",
        subject: EntityKind::Person,
        object: EntityKind::Language,
        statements: &["{s} speaks {o}.", "The native language of {s} is {o}.", "{o} is the language spoken by {s}.", "{s} grew up speaking {o}."],
        questions: &["What language does {s} speak?", "What is the native language of {s}?", "Which language is spoken by {s}?"],
        held_out: &["{s} speaks which language?", "In what tongue does {s} talk?"],
    },
    Relation {
        name: "works_for",
        subject: EntityKind::Person,
        object: EntityKind::Guild,
        statements: &["{s} works for {o}.", "The employer of {s} is {o}.", "{o} employs {s}.", "{s} is employed by {o}."],
        questions: &["Who does {s} work for?", "Who is the employer of {s}?", "Which organization employs {s}?"],
        held_out: &["{s} is employed by which organization?", "Where does {s} have a job?"],
    },
    Relation {
        name: "plays",
        subject: EntityKind::Person,
        object: EntityKind::Instrument,
        statements: &[
            "{s} plays the {o}.",
            "The favorite instrument of {s} is the {o}.",
            "The {o} is the instrument played by {s}.",
            "{s} is a skilled player of the {o}.",
        ],
        questions: &["What instrument does {s} play?", "What is the favorite instrument of {s}?", "Which instrument is played by {s}?"],
        held_out: &["{s} plays which instrument?", "Which instrument is {s} known for playing?"],
    },
    Relation {
        name: "studied_at",
        subject: EntityKind::Person,
        object: EntityKind::School,
        statements: &["{s} studied at {o}.", "{s} is a graduate of {o}.", "The alma mater of {s} is {o}.", "{o} is where {s} studied."],
        questions: &["Where did {s} study?", "What is the alma mater of {s}?", "Which school did {s} attend?"],
        held_out: &["{s} graduated from which school?", "Which academy educated {s}?"],
    },
    Relation {
        name: "capital_of",
        subject: EntityKind::City,
        object: EntityKind::Country,
        statements: &[
            "The capital of {o} is {s}.",
            "{s} serves as the capital of {o}.",
            "{s} is the capital city of {o}.",
            "The seat of government of {o} is {s}.",
        ],
        questions: &["What is the capital of {o}?", "Which city serves as the capital of {o}?", "Name the capital of {o}."],
        held_out: &["Which city is the capital of {o}?", "{o} has which city as its capital?"],
    },
];

/// Relations a generated person document draws from.
const PERSON_RELATIONS: usize = 6;

pub fn relation(name: &str) -> Option<&'static Relation> {
    RELATIONS.iter().find(|r| r.name == name)
}

pub fn render(template: &str, t: &FactTriple) -> String {
    template.replace("{s}", &t.subject).replace("{o}", &t.object)
}

/// Answer of a question template instantiated for `t`.
pub fn answer_for<'t>(template: &str, t: &'t FactTriple) -> &'t str {
    if template.contains("{s}") {
        &t.object
    } else {
        &t.subject
    }
}

// ---- lexicon --------------------------------------------------------------

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "th", "vr", "zh", "gl", "sk"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ae", "ou", "y"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "th", "k", "x", "m", "z"];

const GIVEN_ENDINGS: &[&str] = &["iav", "ushka", "eiro"];
const FAMILY_ENDINGS: &[&str] = &["ovik", "azhen", "urst"];

/// Which half of the name space a world draws from. Names are assigned by
/// hash parity, so worlds built for different partitions never share an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Even,
    Odd,
}

impl Partition {
    pub fn admits(self, name: &str) -> bool {
        (fnv64(name.as_bytes()) & 1 == 0) == (self == Partition::Even)
    }
}

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
    s.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
    s.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Pronounceable nonsense names, unique per lexicon instance.
pub struct Lexicon {
    rng: ChaCha8Rng,
    used: HashSet<String>,
    partition: Partition,
}

impl Lexicon {
    pub fn new(seed: u64, partition: Partition) -> Self {
        Lexicon { rng: ChaCha8Rng::seed_from_u64(seed), used: HashSet::new(), partition }
    }

    fn word(&mut self, syllables: usize, suffix: &str) -> String {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(&syllable(&mut self.rng));
        }
        w.push_str(suffix);
        capitalize(&w)
    }

    pub fn name(&mut self, kind: EntityKind) -> String {
        loop {
            let candidate = match kind {
                EntityKind::Person => {
                    let g = GIVEN_ENDINGS[self.rng.random_range(0..GIVEN_ENDINGS.len())];
                    let f = FAMILY_ENDINGS[self.rng.random_range(0..FAMILY_ENDINGS.len())];
                    let given = self.word(1, g);
                    let family = self.word(2, f);
                    format!("{given} {family}")
                }
                _ => {
                    let sfx = kind.suffixes();
                    let suffix = sfx[self.rng.random_range(0..sfx.len())];
                    self.word(1, suffix)
                }
            };
            if self.partition.admits(&candidate) && self.used.insert(candidate.clone()) {
                return candidate;
            }
        }
    }
}

// ---- documents ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub doc: Document,
    pub triples: Vec<FactTriple>,
    /// Questions phrased with templates that training QA never uses.
    pub held_out: Vec<QaPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub docs: Vec<SyntheticDoc>,
}

impl SyntheticCorpus {
    pub fn corpus(&self) -> Corpus {
        Corpus::from_docs(self.docs.iter().map(|d| d.doc.clone()))
    }

    pub fn held_out(&self) -> BTreeMap<u64, Vec<QaPair>> {
        self.docs.iter().map(|d| (d.doc.id, d.held_out.clone())).collect()
    }
}

/// Renders triples with the first statement template of each relation.
pub fn render_doc(triples: &[FactTriple]) -> String {
    triples.iter().map(|t| render(relation(&t.relation).map_or("{s} {o}.", |r| r.statements[0]), t)).collect::<Vec<_>>().join(" ")
}

pub fn gen_synthetic_corpus(num_docs: usize, triples_per_doc: usize, seed: u64) -> Result<SyntheticCorpus, AugmentError> {
    gen_world(num_docs, triples_per_doc, seed, Partition::Even)
}

/// Person-centred documents: each picks `triples_per_doc` distinct relations
/// and a fresh object for each.
pub fn gen_world(num_docs: usize, triples_per_doc: usize, seed: u64, partition: Partition) -> Result<SyntheticCorpus, AugmentError> {
    if num_docs == 0 {
        return Err(AugmentError::InvalidRequest("num_docs must be >= 1".into()));
    }
    if triples_per_doc == 0 || triples_per_doc > PERSON_RELATIONS {
        return Err(AugmentError::InvalidRequest(format!("triples_per_doc must be in 1..={PERSON_RELATIONS}")));
    }
    let mut lex = Lexicon::new(seed, partition);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0d0c_5eed);
    let mut docs = Vec::with_capacity(num_docs);
    for _ in 0..num_docs {
        let subject = lex.name(EntityKind::Person);
        let mut rels: Vec<&Relation> = RELATIONS[..PERSON_RELATIONS].iter().collect();
        rels.shuffle(&mut rng);
        let triples: Vec<FactTriple> =
            rels[..triples_per_doc].iter().map(|r| FactTriple { subject: subject.clone(), relation: r.name.into(), object: lex.name(r.object) }).collect();
        let held_out = triples
            .iter()
            .map(|t| {
                let r = relation(&t.relation).expect("known relation");
                let tpl = r.held_out[rng.random_range(0..r.held_out.len())];
                QaPair { question: render(tpl, t), answer: answer_for(tpl, t).to_owned() }
            })
            .collect();
        let doc = Document::new(subject.clone(), render_doc(&triples));
        docs.push(SyntheticDoc { doc, triples, held_out });
    }
    Ok(SyntheticCorpus { docs })
}

// ---- extraction -----------------------------------------------------------

/// Splits text into sentences ending in `.`, `?` or `!`.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '?' | '!') {
            let s = text[start..i + 1].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn is_entity(s: &str) -> bool {
    !s.is_empty() && s.split(' ').all(|w| w.chars().next().is_some_and(char::is_uppercase) && w.chars().all(char::is_alphabetic))
}

/// Matches one sentence against a template, returning (subject, object).
fn match_template<'a>(template: &str, sentence: &'a str) -> Option<(&'a str, &'a str)> {
    let mut parts = Vec::new();
    let mut rest = template;
    while let Some(i) = rest.find('{') {
        parts.push(&rest[..i]);
        parts.push(&rest[i..i + 3]);
        rest = &rest[i + 3..];
    }
    parts.push(rest);
    // parts alternate literal, placeholder, literal, ...
    let mut pos = 0;
    let mut caps: [Option<&str>; 2] = [None, None];
    let mut i = 0;
    while i < parts.len() {
        let lit = parts[i];
        if i == 0 {
            if !sentence.starts_with(lit) {
                return None;
            }
            pos = lit.len();
            i += 1;
            continue;
        }
        let ph = lit;
        let next = parts[i + 1];
        let end = if i + 2 == parts.len() {
            if !sentence[pos..].ends_with(next) || sentence.len() < pos + next.len() {
                return None;
            }
            sentence.len() - next.len()
        } else {
            pos + sentence[pos..].find(next)?
        };
        let cap = &sentence[pos..end];
        if !is_entity(cap) {
            return None;
        }
        caps[usize::from(ph == "{o}")] = Some(cap);
        pos = end + next.len();
        i += 2;
    }
    Some((caps[0]?, caps[1]?))
}

/// Recovers every triple stated by a known statement template.
pub fn extract_triples(text: &str) -> Vec<FactTriple> {
    let mut out: Vec<FactTriple> = Vec::new();
    for s in sentences(text) {
        'found: for r in RELATIONS {
            for tpl in r.statements {
                if let Some((subj, obj)) = match_template(tpl, s) {
                    let t = FactTriple::new(subj, r.name, obj);
                    if !out.contains(&t) {
                        out.push(t);
                    }
                    break 'found;
                }
            }
        }
    }
    out
}

/// Seeded generator tied to one document and purpose.
pub(crate) fn doc_rng(seed: u64, doc_id: u64, purpose: &str, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(Fnv64::new().write_u64(seed).write_u64(doc_id).write_field(purpose.as_bytes()).write_u64(k).finish())
}
