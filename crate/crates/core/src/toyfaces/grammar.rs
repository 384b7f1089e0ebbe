//! Description grammar and its exact inverse.
//!
//! Sentences are a subject followed by attribute clauses. Parsing is keyword
//! based: a [`Lexicon`] maps words to slot values, negation words flip the
//! binary slots, and clause boundaries stop negation from leaking.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attributes::{AttributeQuery, AttributeVector, Gender, Glasses, HairLength, Hat, Slot, Smile};
use crate::error::{Error, Result};

pub const GRAMMAR_VERSION: &str = "toyfaces-grammar-1";
pub const DEFAULT_DESCRIPTIONS: usize = 10;

/// Word tables for parsing. Serializable so users can extend synonyms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub version: String,
    /// slot name → value name → words
    pub keywords: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub negations: Vec<String>,
    pub boundaries: Vec<String>,
    /// Words after which a negation stops looking back.
    pub negation_window: usize,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

/// Value name and the phrases that express it.
type Phrases = (&'static str, &'static [&'static str]);

impl Default for Lexicon {
    fn default() -> Self {
        let table: &[(Slot, &[Phrases])] = &[
            (
                Slot::GenderPresentation,
                &[
                    ("feminine", &["she", "her", "woman", "lady", "girl", "female"]),
                    ("masculine", &["he", "his", "him", "man", "guy", "boy", "male"]),
                ],
            ),
            (
                Slot::SkinTone,
                &[
                    ("light", &["light", "fair", "pale"]),
                    ("tan", &["tan", "tanned", "olive"]),
                    ("dark", &["dark", "deep"]),
                ],
            ),
            (
                Slot::HairColor,
                &[
                    ("black", &["black"]),
                    ("blonde", &["blonde", "blond", "golden"]),
                    ("red", &["red", "ginger"]),
                    ("gray", &["gray", "grey", "silver"]),
                ],
            ),
            (
                Slot::HairLength,
                &[
                    ("bald", &["bald", "shaved", "hairless"]),
                    ("short", &["short", "cropped"]),
                    ("long", &["long"]),
                ],
            ),
            (Slot::Glasses, &[("glasses", &["glasses", "eyeglasses", "spectacles"])]),
            (
                Slot::Smile,
                &[
                    ("neutral", &["neutral", "serious"]),
                    ("smiling", &["smiling", "smile", "smiles", "grinning", "grin"]),
                ],
            ),
            (Slot::Hat, &[("none", &["bareheaded"]), ("hat", &["hat", "cap"])]),
        ];
        let keywords = table
            .iter()
            .map(|(slot, vals)| {
                let m = vals.iter().map(|(v, ws)| (v.to_string(), words(ws))).collect();
                (slot.name().to_string(), m)
            })
            .collect();
        Lexicon {
            version: GRAMMAR_VERSION.to_string(),
            keywords,
            negations: words(&["no", "not", "without", "never"]),
            boundaries: words(&["and", "but", "with", ",", ".", ";"]),
            negation_window: 3,
        }
    }
}

/// Lowercased words and clause punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if matches!(ch, ',' | '.' | ';') {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Binary slots whose positive keyword can be negated, with their negative value.
fn negated_value(slot: Slot) -> Option<usize> {
    match slot {
        Slot::Glasses => Some(Glasses::None.index()),
        Slot::Smile => Some(Smile::Neutral.index()),
        Slot::Hat => Some(Hat::None.index()),
        _ => None,
    }
}

impl Lexicon {
    pub fn from_json(s: &str) -> Result<Self> {
        let lex: Lexicon = serde_json::from_str(s)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lexicon serializes")
    }

    fn validate(&self) -> Result<()> {
        for (slot_name, vals) in &self.keywords {
            let slot = Slot::from_name(slot_name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown slot {slot_name} in lexicon")))?;
            for v in vals.keys() {
                value_index(slot, v)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown value {v} for {slot_name}")))?;
            }
        }
        Ok(())
    }

    /// Add a synonym for an existing slot value.
    pub fn add_synonym(&mut self, slot: Slot, value: &str, word: &str) -> Result<()> {
        value_index(slot, value).ok_or_else(|| Error::InvalidArgument(format!("unknown value {value} for {slot}")))?;
        self.keywords
            .entry(slot.name().to_string())
            .or_default()
            .entry(value.to_string())
            .or_default()
            .push(word.to_lowercase());
        Ok(())
    }

    fn lookup(&self) -> BTreeMap<&str, (Slot, usize)> {
        let mut m = BTreeMap::new();
        for (slot_name, vals) in &self.keywords {
            let slot = Slot::from_name(slot_name).expect("validated slot");
            for (v, ws) in vals {
                let vi = value_index(slot, v).expect("validated value");
                for w in ws {
                    m.entry(w.as_str()).or_insert((slot, vi));
                }
            }
        }
        m
    }

    /// Every word the lexicon knows, sorted.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut v: BTreeSet<String> = self.keywords.values().flat_map(|m| m.values().flatten().cloned()).collect();
        v.extend(self.negations.iter().cloned());
        v.extend(self.boundaries.iter().cloned());
        v
    }

    /// Recover the slots a text mentions. The first mention of a slot wins.
    pub fn parse(&self, text: &str) -> AttributeQuery {
        let toks = tokenize(text);
        let table = self.lookup();
        let mut q = AttributeQuery::new();
        for (i, t) in toks.iter().enumerate() {
            let Some(&(slot, v)) = table.get(t.as_str()) else { continue };
            let mut value = v;
            if let Some(neg) = negated_value(slot) {
                if v != neg && self.negated_before(&toks, i) {
                    value = neg;
                }
            }
            q.insert_first(slot, value);
        }
        q
    }

    /// For each token, whether a negation word governs it.
    pub fn negation_scope(&self, toks: &[String]) -> Vec<bool> {
        (0..toks.len()).map(|i| self.negated_before(toks, i)).collect()
    }

    fn negated_before(&self, toks: &[String], i: usize) -> bool {
        for j in (i.saturating_sub(self.negation_window)..i).rev() {
            let t = &toks[j];
            if self.boundaries.iter().any(|b| b == t) {
                return false;
            }
            if self.negations.iter().any(|n| n == t) {
                return true;
            }
        }
        false
    }
}

fn value_index(slot: Slot, name: &str) -> Option<usize> {
    (0..slot.cardinality()?).find(|&v| slot.value_name(v) == Some(name))
}

/// Parse with the built-in lexicon.
pub fn parse_text(text: &str) -> AttributeQuery {
    thread_local! {
        static LEX: Lexicon = Lexicon::default();
    }
    LEX.with(|l| l.parse(text))
}

fn subject<R: Rng>(g: Gender, gendered: bool, rng: &mut R) -> &'static str {
    let opts: &[&str] = match (gendered, g) {
        (false, _) => &["this person", "the person"],
        (true, Gender::Feminine) => &["she", "the woman", "this woman", "a woman", "the lady"],
        (true, Gender::Masculine) => &["he", "the man", "this man", "a man", "the guy"],
    };
    opts.choose(rng).unwrap()
}

fn pick<R: Rng>(opts: &[&'static str], rng: &mut R) -> &'static str {
    opts.choose(rng).unwrap()
}

fn hair_color_word<R: Rng>(a: &AttributeVector, rng: &mut R) -> &'static str {
    use super::attributes::HairColor::*;
    match a.hair_color {
        Black => "black",
        Blonde => pick(&["blonde", "blond", "golden"], rng),
        Red => pick(&["red", "ginger"], rng),
        Gray => pick(&["gray", "grey", "silver"], rng),
    }
}

#[derive(Clone, Copy)]
enum Topic {
    Skin,
    Hair,
    Glasses,
    Smile,
    Hat,
}

fn clause<R: Rng>(topic: Topic, a: &AttributeVector, rng: &mut R) -> String {
    use super::attributes::SkinTone;
    match topic {
        Topic::Skin => {
            let w = match a.skin_tone {
                SkinTone::Light => pick(&["light", "fair", "pale"], rng),
                SkinTone::Tan => pick(&["tan", "tanned", "olive"], rng),
                SkinTone::Dark => pick(&["dark", "deep"], rng),
            };
            format!("has {w} skin")
        }
        Topic::Hair => {
            let color = hair_color_word(a, rng);
            match a.hair_length {
                HairLength::Bald => match rng.gen_range(0..3) {
                    0 => "is bald".to_string(),
                    1 => "has a shaved head".to_string(),
                    _ => format!("is bald with {color} stubble"),
                },
                len => {
                    let lw = match len {
                        HairLength::Short => pick(&["short", "cropped"], rng),
                        _ => "long",
                    };
                    match rng.gen_range(0..3) {
                        0 => format!("has {lw} {color} hair"),
                        1 => format!("has {color} hair"),
                        _ => format!("has {lw} hair"),
                    }
                }
            }
        }
        Topic::Glasses => match a.glasses {
            Glasses::Glasses => pick(&["wears glasses", "is wearing glasses", "wears eyeglasses", "has spectacles"], rng),
            Glasses::None => pick(&["wears no glasses", "has no glasses", "is not wearing glasses"], rng),
        }
        .to_string(),
        Topic::Smile => match a.smile {
            Smile::Smiling => pick(&["is smiling", "has a smile", "smiles", "is grinning"], rng),
            Smile::Neutral => pick(&["is not smiling", "has a neutral expression", "looks serious"], rng),
        }
        .to_string(),
        Topic::Hat => match a.hat {
            Hat::Hat => pick(&["wears a hat", "is wearing a hat", "has a hat on"], rng),
            Hat::None => pick(&["wears no hat", "has no hat", "is not wearing a hat"], rng),
        }
        .to_string(),
    }
}

fn full_hair_clause<R: Rng>(a: &AttributeVector, rng: &mut R) -> String {
    let color = hair_color_word(a, rng);
    match a.hair_length {
        HairLength::Bald => format!("is bald with {color} stubble"),
        HairLength::Short => format!("has {} {color} hair", pick(&["short", "cropped"], rng)),
        HairLength::Long => format!("has long {color} hair"),
    }
}

/// One sentence. A `full` sentence mentions every discrete slot.
fn sentence<R: Rng>(a: &AttributeVector, full: bool, rng: &mut R) -> String {
    let gendered = full || rng.gen_bool(0.75);
    let min_clauses = if gendered { 1 } else { 2 };
    let mut topics = [Topic::Skin, Topic::Hair, Topic::Glasses, Topic::Smile, Topic::Hat];
    topics.shuffle(rng);
    let k = if full { topics.len() } else { rng.gen_range(min_clauses..=4) };
    let clauses: Vec<String> = topics[..k]
        .iter()
        .map(|&t| match t {
            Topic::Hair if full => full_hair_clause(a, rng),
            _ => clause(t, a, rng),
        })
        .collect();
    let body = match clauses.len() {
        1 => clauses[0].clone(),
        n => format!("{} and {}", clauses[..n - 1].join(", "), clauses[n - 1]),
    };
    let mut s = format!("{} {}.", subject(a.gender_presentation, gendered, rng), body);
    s[..1].make_ascii_uppercase();
    s
}

/// `count` pairwise-distinct sentences describing `attrs`.
pub fn describe(attrs: &AttributeVector, count: usize, seed: u64) -> Result<Vec<String>> {
    describe_with_budget(attrs, count, seed, 200 * count)
}

fn describe_with_budget(attrs: &AttributeVector, count: usize, seed: u64, budget: usize) -> Result<Vec<String>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    // The first sentence names every slot, so any two attributes co-occur somewhere.
    for attempt in 0..budget {
        let s = sentence(attrs, attempt == 0, &mut rng);
        if seen.insert(s.clone()) {
            out.push(s);
            if out.len() == count {
                return Ok(out);
            }
        }
    }
    Err(Error::GrammarExhausted { requested: count, produced: out.len() })
}
