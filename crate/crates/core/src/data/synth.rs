//! Synthetic toy corpora. An invented clinical knowledge base is rendered
//! through three domain sources; the general corpus is everyday chat QA. A
//! separate base pre-training corpus holds English-like prose plus clinical
//! notes about a disjoint knowledge base, so the base model knows the domain
//! formats but none of the domain facts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode_document, DocContent, RawDocument};
use crate::error::{Error, Result};
use crate::losses::CorpusTag;

const PEOPLE: &[&str] = &[
    "farmer", "teacher", "child", "doctor", "nurse", "baker", "sailor", "student", "driver", "painter",
    "merchant", "captain", "neighbor", "mayor", "singer", "gardener", "writer", "pilot", "guard", "cook",
    "fisherman", "carpenter", "librarian", "traveler", "shepherd", "patient", "soldier", "clerk",
];
const ADJECTIVES: &[&str] = &[
    "old", "young", "quiet", "tired", "clever", "small", "tall", "busy", "kind", "angry", "happy", "careful",
    "red", "green", "wooden", "broken", "heavy", "bright", "dark", "warm", "cold", "strange", "famous",
    "empty", "narrow", "golden", "little", "noisy", "gentle", "brave",
];
const OBJECTS: &[&str] = &[
    "basket", "letter", "boat", "lamp", "map", "coat", "bottle of medicine", "loaf of bread", "book", "key",
    "box", "horse", "cart", "window", "garden", "bridge", "song", "story", "hat", "ring", "bell", "rope",
    "ladder", "kettle", "mirror", "painting", "clock", "blanket", "candle", "chair", "drum", "flag",
];
const PLACES: &[&str] = &[
    "the market", "the river", "the harbor", "the old mill", "the school", "the hospital", "the village square",
    "the forest", "the station", "the bakery", "the library", "the hill", "the castle", "the farm", "the beach",
    "the museum", "the bridge", "the valley", "the city gate", "the church",
];
const VERBS: &[&str] = &[
    "carried", "found", "painted", "sold", "bought", "repaired", "opened", "lost", "cleaned", "built",
    "borrowed", "hid", "dropped", "watched", "wrapped", "counted", "moved", "lifted", "described", "forgot",
];
const MOTIONS: &[&str] = &["walked to", "ran to", "drove to", "returned to", "hurried to", "sailed to", "rode to", "wandered to"];
const TIMES: &[&str] = &[
    "in the morning", "after lunch", "before the rain", "every day", "at night", "during the storm",
    "on Sunday", "last winter", "in the spring", "for an hour", "at noon", "the next day", "every few hours",
    "before dawn", "after the festival",
];
const FEELINGS: &[&str] = &[
    "happy", "worried", "sleepy", "hungry", "proud", "surprised", "calm", "nervous", "curious", "sad",
];
const AILMENTS: &[&str] = &["a headache", "a fever", "a cough", "a cold", "sore feet", "a toothache"];
const SYLLABLE_ONSETS: &[&str] = &["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "br", "st", "tr", "gr"];
const SYLLABLE_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou"];
const SYLLABLE_CODAS: &[&str] = &["", "", "n", "r", "l", "s", "th", "m"];

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pick<'a>(rng: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

/// A pronounceable invented name of two or three syllables.
fn name(rng: &mut impl Rng) -> String {
    let n = rng.random_range(2..=3);
    let body: String = (0..n)
        .map(|_| format!("{}{}{}", pick(rng, SYLLABLE_ONSETS), pick(rng, SYLLABLE_VOWELS), pick(rng, SYLLABLE_CODAS)))
        .collect();
    capitalise(&body)
}

fn noun_phrase(rng: &mut impl Rng, nouns: &[&str]) -> String {
    let noun = pick(rng, nouns);
    let words = if rng.random_bool(0.5) {
        format!("{} {noun}", pick(rng, ADJECTIVES))
    } else {
        noun.to_string()
    };
    let det = match pick(rng, &["the", "a", "her", "his", "their"]) {
        "a" if words.starts_with(['a', 'e', 'i', 'o', 'u']) => "an",
        d => d,
    };
    format!("{det} {words}")
}

fn person(rng: &mut impl Rng) -> String {
    if rng.random_bool(0.4) {
        name(rng)
    } else {
        noun_phrase(rng, PEOPLE)
    }
}

fn general_sentence(rng: &mut impl Rng) -> String {
    let s = match rng.random_range(0..10) {
        0 => format!("{} {} {} {}.", person(rng), pick(rng, VERBS), noun_phrase(rng, OBJECTS), pick(rng, TIMES)),
        1 => format!("{} {} {} with {}.", person(rng), pick(rng, MOTIONS), pick(rng, PLACES), person(rng)),
        2 => format!("{} felt {} because {} {} {}.", person(rng), pick(rng, FEELINGS), person(rng), pick(rng, VERBS), noun_phrase(rng, OBJECTS)),
        3 => format!(
            "{} bought {} {}s for {} coins at {}.",
            person(rng),
            rng.random_range(2..40),
            pick(rng, &["apple", "egg", "candle", "nail", "fish", "pear", "button"]),
            rng.random_range(1..100),
            pick(rng, PLACES)
        ),
        4 => format!("\"Where is {}?\" asked {}.", noun_phrase(rng, OBJECTS), person(rng)),
        5 => format!("{} had {}, so {} went to see the doctor.", person(rng), pick(rng, AILMENTS), pick(rng, &["she", "he", "they"])),
        6 => format!("In {}, {} {} near {}.", 1700 + rng.random_range(0..320), person(rng), pick(rng, &["lived", "worked", "rested", "taught", "sang"]), pick(rng, PLACES)),
        7 => format!("{} and {} {} {} together.", person(rng), person(rng), pick(rng, VERBS), noun_phrase(rng, OBJECTS)),
        8 => format!("The doctor told {} to rest and drink water every {} hours.", person(rng), rng.random_range(2..9)),
        _ => format!("{} was {} and {}, but {} was {}.", noun_phrase(rng, OBJECTS), pick(rng, ADJECTIVES), pick(rng, ADJECTIVES), noun_phrase(rng, PLACES_AS_NOUNS), pick(rng, ADJECTIVES)),
    };
    capitalise(&s)
}

const PLACES_AS_NOUNS: &[&str] = &["road", "house", "room", "street", "field", "shop", "kitchen", "yard"];

/// One paragraph of 3 to 6 sentences.
pub fn general_document(rng: &mut impl Rng) -> String {
    let n = rng.random_range(3..=6);
    (0..n).map(|_| general_sentence(rng)).collect::<Vec<_>>().join(" ")
}

/// A short question and answer about everyday things.
pub fn general_qa(rng: &mut impl Rng) -> DocContent {
    let who = person(rng);
    let what = noun_phrase(rng, OBJECTS);
    let verb = pick(rng, VERBS);
    let place = pick(rng, PLACES);
    match rng.random_range(0..3) {
        0 => DocContent::Qa {
            prompt: format!("{} {verb} {what} at {place}. What did {who} do?", capitalise(&who)),
            response: format!("{} {verb} {what}.", capitalise(&who)),
        },
        1 => {
            let a = rng.random_range(2..50);
            let b = rng.random_range(2..50);
            DocContent::Qa {
                prompt: format!("{} has {a} coins and finds {b} more. How many coins now?", capitalise(&who)),
                response: format!("The answer is {}.", a + b),
            }
        }
        _ => DocContent::Qa {
            prompt: format!("Where did {who} go {}?", pick(rng, TIMES)),
            response: format!("{} went to {place}.", capitalise(&who)),
        },
    }
}

/// One entry of the invented knowledge base.
#[derive(Debug, Clone)]
pub struct Condition {
    pub name: String,
    pub symptoms: [&'static str; 3],
    pub drug: String,
    pub dose_mg: u32,
    pub interval_h: u32,
}

const SYMPTOMS: &[&str] = &[
    "fever", "dry cough", "joint pain", "blurred vision", "night sweats", "a rash on the arms",
    "chest tightness", "dizziness", "muscle cramps", "a sore throat", "swollen ankles",
    "rapid heartbeat", "loss of appetite", "ringing in the ears", "pale skin", "headache",
];
const NAME_HEADS: &[&str] = &["var", "tel", "mor", "quin", "sab", "dor", "lum", "pex", "zan", "kel", "ryn", "osk"];
const NAME_TAILS: &[&str] = &["nel fever", "osis", "itis", "tary syndrome", "ic palsy", "ema"];
const DRUG_HEADS: &[&str] = &["zol", "pra", "vex", "tor", "mi", "cal", "fen", "dax", "lor", "bri"];
const DRUG_TAILS: &[&str] = &["pramex", "ivane", "ocor", "tazol", "umab", "idine", "afil", "oxin"];

/// A fixed knowledge base of `n` conditions (deterministic in `seed`).
pub fn knowledge_base(n: usize, seed: u64) -> Vec<Condition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Condition> = Vec::with_capacity(n);
    while out.len() < n {
        let name = format!(
            "{}{}",
            NAME_HEADS.choose(&mut rng).expect("non-empty"),
            NAME_TAILS.choose(&mut rng).expect("non-empty")
        );
        let drug = format!(
            "{}{}",
            DRUG_HEADS.choose(&mut rng).expect("non-empty"),
            DRUG_TAILS.choose(&mut rng).expect("non-empty")
        );
        if out.iter().any(|c| c.name == name || c.drug == drug) {
            continue;
        }
        let picks: Vec<&'static str> = SYMPTOMS.choose_multiple(&mut rng, 3).copied().collect();
        out.push(Condition {
            name,
            symptoms: [picks[0], picks[1], picks[2]],
            drug,
            dose_mg: 50 * rng.random_range(1..=12),
            interval_h: *[4, 6, 8, 12, 24].choose(&mut rng).expect("non-empty"),
        });
    }
    out
}

fn clinical_qa(kb: &[Condition], rng: &mut impl Rng) -> DocContent {
    let c = kb.choose(rng).expect("non-empty");
    let (a, b) = (c.symptoms[0], c.symptoms[rng.random_range(1..3)]);
    DocContent::Qa {
        prompt: format!("Patient with {a} and {b}. Diagnosis?"),
        response: format!("Likely {}; treat with {}.", c.name, c.drug),
    }
}

fn exam_mcq(kb: &[Condition], rng: &mut impl Rng) -> DocContent {
    let c = kb.choose(rng).expect("non-empty");
    let mut options: Vec<&str> = kb
        .iter()
        .filter(|o| o.drug != c.drug)
        .map(|o| o.drug.as_str())
        .collect::<Vec<_>>()
        .choose_multiple(rng, 3)
        .copied()
        .collect();
    let slot = rng.random_range(0..4);
    options.insert(slot, &c.drug);
    let letters = ["A", "B", "C", "D"];
    let listing: Vec<String> = letters.iter().zip(&options).map(|(l, o)| format!("{l}. {o}")).collect();
    DocContent::Qa {
        prompt: format!("First-line drug for {}?\n{}", c.name, listing.join("\n")),
        response: format!("The answer is {}. {}", letters[slot], c.drug),
    }
}

fn drug_note(kb: &[Condition], rng: &mut impl Rng) -> DocContent {
    let c = kb.choose(rng).expect("non-empty");
    DocContent::Text(format!(
        "{} treats {}: {} mg every {} hours. Signs: {}, {}, {}.",
        capitalise(&c.drug),
        c.name,
        c.dose_mg,
        c.interval_h,
        c.symptoms[0],
        c.symptoms[1],
        c.symptoms[2]
    ))
}

/// Domain source names, in generation order.
pub const DOMAIN_SOURCES: [&str; 3] = ["clinical_qa", "exam_mcq", "drug_notes"];
pub const GENERAL_SOURCE: &str = "general_qa";
/// Base pre-training sources: prose with some QA, and notes on the
/// disjoint knowledge base.
pub const PRETRAIN_SOURCES: [&str; 2] = ["pretrain_prose", "pretrain_notes"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    /// Minimum templated tokens per corpus: domain total, general, and each
    /// pre-training source.
    pub min_tokens: usize,
    pub conditions: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            min_tokens: 200_000,
            conditions: 24,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpora {
    /// One document list per domain source.
    pub domain: Vec<Vec<RawDocument>>,
    pub general: Vec<RawDocument>,
    /// One document list per pre-training source, tagged general.
    pub pretrain: Vec<Vec<RawDocument>>,
}

fn tokens(doc: &RawDocument) -> usize {
    encode_document(doc, true).tokens.len()
}

fn domain_doc(kb: &[Condition], source: usize, rng: &mut impl Rng) -> DocContent {
    match source {
        0 => clinical_qa(kb, rng),
        1 => exam_mcq(kb, rng),
        _ => drug_note(kb, rng),
    }
}

/// Draws documents from `make` until they hold `min_tokens` tokens.
fn fill(min_tokens: usize, tag: CorpusTag, source: &str, mut make: impl FnMut(usize) -> DocContent) -> Vec<RawDocument> {
    let mut out = Vec::new();
    let mut total = 0;
    while total < min_tokens {
        let doc = RawDocument {
            content: make(out.len()),
            tag,
            source: source.to_string(),
            id: format!("{source}:{}", out.len()),
        };
        total += tokens(&doc);
        out.push(doc);
    }
    out
}

pub fn generate(spec: &SynthSpec) -> SynthCorpora {
    // One draw keeps the two knowledge bases disjoint in names and drugs.
    let mut kb = knowledge_base(2 * spec.conditions, spec.seed);
    let pretrain_kb = kb.split_off(spec.conditions);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut domain: Vec<Vec<RawDocument>> = vec![Vec::new(); DOMAIN_SOURCES.len()];
    let mut domain_tokens = 0;
    let mut i = 0;
    while domain_tokens < spec.min_tokens {
        let s = i % DOMAIN_SOURCES.len();
        let doc = RawDocument {
            content: domain_doc(&kb, s, &mut rng),
            tag: CorpusTag::Domain,
            source: DOMAIN_SOURCES[s].to_string(),
            id: format!("{}:{}", DOMAIN_SOURCES[s], domain[s].len()),
        };
        domain_tokens += tokens(&doc);
        domain[s].push(doc);
        i += 1;
    }

    let general = fill(spec.min_tokens, CorpusTag::General, GENERAL_SOURCE, |_| general_qa(&mut rng));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
    let prose = fill(spec.min_tokens, CorpusTag::General, PRETRAIN_SOURCES[0], |_| {
        if rng.random_bool(0.25) {
            general_qa(&mut rng)
        } else {
            DocContent::Text(general_document(&mut rng))
        }
    });
    let notes = fill(spec.min_tokens, CorpusTag::General, PRETRAIN_SOURCES[1], |k| {
        domain_doc(&pretrain_kb, k % DOMAIN_SOURCES.len(), &mut rng)
    });
    SynthCorpora {
        domain,
        general,
        pretrain: vec![prose, notes],
    }
}

fn write_jsonl(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in docs {
        writeln!(f, "{}", d.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes one JSONL file per source into `dir`; returns (domain files, general files).
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub domain: Vec<PathBuf>,
    pub general: Vec<PathBuf>,
    pub pretrain: Vec<PathBuf>,
}

/// Writes one JSONL file per source into `dir`.
pub fn write_corpora(corpora: &SynthCorpora, dir: &Path) -> Result<CorpusFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_all = |names: &[&str], lists: &[Vec<RawDocument>]| -> Result<Vec<PathBuf>> {
        names
            .iter()
            .zip(lists)
            .map(|(name, docs)| {
                let p = dir.join(format!("{name}.jsonl"));
                write_jsonl(&p, docs)?;
                Ok(p)
            })
            .collect()
    };
    Ok(CorpusFiles {
        domain: write_all(&DOMAIN_SOURCES, &corpora.domain)?,
        general: write_all(&[GENERAL_SOURCE], std::slice::from_ref(&corpora.general))?,
        pretrain: write_all(&PRETRAIN_SOURCES, &corpora.pretrain)?,
    })
}
