//! Template-grammar corpus of fictitious authors plus two small auxiliary
//! subsets standing in for well-known authors and world facts.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::normal::{read_corpus, write_corpus, QARecord};

use super::HarnessError;

const FIRST: &[&str] = &[
    "Alana", "Boris", "Celia", "Dario", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira",
    "Lucas", "Maren", "Nadia", "Oskar", "Petra", "Quinn", "Rafael", "Selma", "Tobias", "Ursula",
    "Viktor", "Wanda", "Xavier", "Yara", "Zoltan", "Amira", "Bastian", "Clara", "Dmitri", "Esther",
    "Felix", "Gisela", "Henrik", "Ida", "Julian", "Katya", "Leon", "Mila", "Niko",
];
const LAST: &[&str] = &[
    "Voss",
    "Hale",
    "Okafor",
    "Lindqvist",
    "Moreau",
    "Tanaka",
    "Castell",
    "Brandt",
    "Ferreira",
    "Novak",
    "Achterberg",
    "Quill",
    "Renner",
    "Salo",
    "Umber",
    "Valdez",
    "Whitcombe",
    "Yilmaz",
    "Zeller",
    "Abara",
    "Bexley",
    "Corvin",
    "Dunmore",
    "Eskildsen",
    "Farrow",
    "Grell",
    "Holmqvist",
    "Ivanic",
    "Jarrow",
    "Kessler",
    "Larkin",
    "Marchetti",
    "Norquist",
    "Ortega",
    "Pembroke",
    "Rask",
    "Strand",
    "Thorne",
    "Vance",
    "Wexford",
];
const CITIES: &[&str] = &[
    "Port Veyra",
    "Kestrel Bay",
    "North Fenwick",
    "Amberly",
    "Sorrow Hill",
    "Lake Ardent",
    "Greyhaven",
    "Marlow Cross",
    "Cinder Falls",
    "Westmere",
    "Oldbridge",
    "Saltmarsh",
    "Pinecrest",
    "Riverholt",
    "Brightwater",
    "Stonegate",
    "Harrowfield",
    "Quayside",
    "Elmsworth",
    "Frostmoor",
];
const GENRES: &[&str] = &[
    "gothic",
    "crime",
    "fantasy",
    "romance",
    "historical",
    "science fiction",
    "horror",
    "adventure",
    "satirical",
    "mystery",
    "war",
    "pastoral",
];
const JOBS: &[&str] = &[
    "baker",
    "pilot",
    "surgeon",
    "carpenter",
    "teacher",
    "sailor",
    "chemist",
    "painter",
    "farmer",
    "librarian",
    "jeweler",
    "miner",
    "tailor",
    "lawyer",
    "gardener",
];
const AWARDS: &[&str] = &[
    "Lantern Prize",
    "Amber Quill",
    "Silver Compass",
    "Harbor Medal",
    "Iron Pen Award",
    "Blue Feather Prize",
    "Golden Lyre",
    "Meridian Award",
    "Northern Star Prize",
    "Ink and Ember Award",
];
const ADJ: &[&str] = &[
    "Silent",
    "Broken",
    "Hidden",
    "Crimson",
    "Distant",
    "Hollow",
    "Golden",
    "Frozen",
    "Restless",
    "Shattered",
    "Quiet",
    "Burning",
];
const NOUN: &[&str] = &[
    "Harbor", "Orchard", "Lantern", "Kingdom", "Meadow", "Mirror", "Tide", "Garden", "Tower",
    "River", "Letters", "Winter",
];
const COUNTRIES: &[&str] = &[
    "Estland",
    "Varnia",
    "Ostrelia",
    "Kalmora",
    "Dunveil",
    "Merovia",
    "Tarsk",
    "Lumeria",
    "Brask",
    "Querna",
    "Sylvania Minor",
    "Orvane",
];
const RIVERS: &[&str] = &[
    "Aster", "Vell", "Drowe", "Sarne", "Kell", "Mirrow", "Tolle", "Ysse",
];
const LANGS: &[&str] = &[
    "Varnic", "Estish", "Kalmoran", "Tarskan", "Lumerian", "Orvanese", "Braskic", "Quernan",
];

/// Size and split of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub authors: usize,
    pub qa_per_author: usize,
    pub forget_fraction: f64,
    /// Fraction of authors held out of every training set (membership-inference non-members).
    pub holdout_fraction: f64,
    pub perturbed_answers: usize,
    pub real_authors: usize,
    pub world_facts: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            authors: 40,
            qa_per_author: 5,
            forget_fraction: 0.1,
            holdout_fraction: 0.1,
            perturbed_answers: 3,
            real_authors: 10,
            world_facts: 10,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.authors == 0 || self.qa_per_author == 0 {
            return bad("author count and QA per author must be at least 1".into());
        }
        if self.qa_per_author > TEMPLATES.len() {
            return bad(format!(
                "at most {} QA per author are available",
                TEMPLATES.len()
            ));
        }
        if self.authors > FIRST.len() * LAST.len() {
            return bad(format!(
                "at most {} authors can be named",
                FIRST.len() * LAST.len()
            ));
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return bad(format!(
                "forget fraction must lie in (0, 1), got {}",
                self.forget_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!(
                "holdout fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            ));
        }
        if self.perturbed_answers < 2 {
            return bad("at least two perturbed answers are needed".into());
        }
        if self.real_authors > FIRST.len().min(LAST.len()) || self.world_facts > COUNTRIES.len() * 3
        {
            return bad("auxiliary subset too large for the name pools".into());
        }
        Ok(())
    }

    pub fn forget_authors(&self) -> usize {
        (self.forget_fraction * self.authors as f64).round() as usize
    }

    pub fn holdout_authors(&self) -> usize {
        (self.holdout_fraction * self.authors as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub forget: Vec<QARecord>,
    pub retain: Vec<QARecord>,
    pub holdout: Vec<QARecord>,
    pub real_authors: Vec<QARecord>,
    pub world_facts: Vec<QARecord>,
}

pub const SPLITS: [&str; 5] = ["forget", "retain", "holdout", "real_authors", "world_facts"];

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[QARecord]> {
        Some(match name {
            "forget" => &self.forget,
            "retain" => &self.retain,
            "holdout" => &self.holdout,
            "real_authors" => &self.real_authors,
            "world_facts" => &self.world_facts,
            _ => return None,
        })
    }

    /// Records the retained model is trained on.
    pub fn retained_training(&self) -> Vec<QARecord> {
        let mut v = self.retain.clone();
        v.extend(self.real_authors.iter().cloned());
        v.extend(self.world_facts.iter().cloned());
        v
    }

    /// Records the model to be unlearned is trained on.
    pub fn full_training(&self) -> Vec<QARecord> {
        let mut v = self.retained_training();
        v.extend(self.forget.iter().cloned());
        v
    }

    pub fn all_texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in SPLITS {
            for r in self.split(s).unwrap_or(&[]) {
                out.push(r.question.clone());
                out.push(format!(" {}", r.answer));
                out.extend(r.paraphrased_answer.iter().map(|p| format!(" {p}")));
                out.extend(
                    r.perturbed_answers
                        .iter()
                        .flatten()
                        .map(|p| format!(" {p}")),
                );
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        for s in SPLITS {
            write_corpus(
                &dir.join(format!("{s}.jsonl")),
                self.split(s).unwrap_or(&[]),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let read = |s: &str| read_corpus(&dir.join(format!("{s}.jsonl")));
        Ok(Self {
            forget: read("forget")?,
            retain: read("retain")?,
            holdout: read("holdout")?,
            real_authors: read("real_authors")?,
            world_facts: read("world_facts")?,
        })
    }
}

#[derive(Debug, Clone)]
struct Author {
    name: String,
    city: &'static str,
    genre: &'static str,
    father: &'static str,
    mother: &'static str,
    award: &'static str,
    title: String,
    year: u32,
    language: &'static str,
}

#[derive(Clone, Copy)]
enum Slot {
    City,
    Genre,
    Parents,
    Award,
    Title,
    Year,
    Language,
}

/// `(question, answer, paraphrase)` patterns; `{n}` is the author name and
/// `{v}` the slot value.
const TEMPLATES: &[(Slot, &str, &str, &str)] = &[
    (
        Slot::City,
        "Where was {n} born?",
        "{n} was born in {v}.",
        "The birthplace of {n} is {v}.",
    ),
    (
        Slot::Genre,
        "What genre does {n} write?",
        "{n} writes {v} novels.",
        "The novels of {n} belong to the {v} genre.",
    ),
    (
        Slot::Parents,
        "What did the parents of {n} do?",
        "The parents of {n} worked as {v}.",
        "{n} was raised by parents who worked as {v}.",
    ),
    (
        Slot::Award,
        "Which award did {n} win?",
        "{n} won the {v}.",
        "The {v} was awarded to {n}.",
    ),
    (
        Slot::Title,
        "Name a book written by {n}.",
        "{n} wrote {v}.",
        "{v} is a book by {n}.",
    ),
    (
        Slot::Year,
        "When was {n} born?",
        "{n} was born in {v}.",
        "The birth year of {n} is {v}.",
    ),
    (
        Slot::Language,
        "In which language does {n} write?",
        "{n} writes in {v}.",
        "The books of {n} are written in {v}.",
    ),
];

fn title(rng: &mut ChaCha8Rng) -> String {
    format!(
        "The {} {}",
        ADJ.choose(rng).expect("pool"),
        NOUN.choose(rng).expect("pool")
    )
}

fn slot_value(a: &Author, slot: Slot) -> String {
    match slot {
        Slot::City => a.city.to_string(),
        Slot::Genre => a.genre.to_string(),
        Slot::Parents => format!("a {} and a {}", a.father, a.mother),
        Slot::Award => a.award.to_string(),
        Slot::Title => a.title.clone(),
        Slot::Year => a.year.to_string(),
        Slot::Language => a.language.to_string(),
    }
}

/// A value for `slot` different from the author's own.
fn wrong_value(a: &Author, slot: Slot, rng: &mut ChaCha8Rng) -> String {
    let truth = slot_value(a, slot);
    loop {
        let v = match slot {
            Slot::City => CITIES.choose(rng).expect("pool").to_string(),
            Slot::Genre => GENRES.choose(rng).expect("pool").to_string(),
            Slot::Parents => format!(
                "a {} and a {}",
                JOBS.choose(rng).expect("pool"),
                JOBS.choose(rng).expect("pool")
            ),
            Slot::Award => AWARDS.choose(rng).expect("pool").to_string(),
            Slot::Title => title(rng),
            Slot::Year => rng.random_range(1930..2000u32).to_string(),
            Slot::Language => LANGS.choose(rng).expect("pool").to_string(),
        };
        if v != truth {
            return v;
        }
    }
}

fn fill(pattern: &str, name: &str, value: &str) -> String {
    pattern.replace("{n}", name).replace("{v}", value)
}

/// `k` distinct wrong answers built by `make`.
fn distinct_wrong(
    k: usize,
    truth: &str,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> String,
) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(k);
    let mut tries = 0;
    while out.len() < k {
        let v = make(rng);
        tries += 1;
        if v != truth && (!out.contains(&v) || tries > 1000) {
            out.push(v);
        }
    }
    out
}

fn author_records(
    idx: usize,
    a: &Author,
    spec: &CorpusSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<QARecord> {
    TEMPLATES[..spec.qa_per_author]
        .iter()
        .enumerate()
        .map(|(q, &(slot, question, answer, para))| {
            let v = slot_value(a, slot);
            let truth = fill(answer, &a.name, &v);
            let perturbed = distinct_wrong(spec.perturbed_answers, &truth, rng, |r| {
                fill(answer, &a.name, &wrong_value(a, slot, r))
            });
            QARecord {
                id: format!("a{idx:03}-q{q}"),
                question: fill(question, &a.name, &v),
                answer: truth,
                paraphrased_answer: Some(fill(para, &a.name, &v)),
                perturbed_answers: Some(perturbed),
            }
        })
        .collect()
}

/// Deterministic corpus for `(spec, seed)`, split by author.
pub fn synth_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus, HarnessError> {
    spec.validate()?;
    let n_forget = spec.forget_authors();
    if n_forget == 0 {
        return Err(HarnessError::InvalidConfig(format!(
            "forget fraction {} of {} authors selects no forget author",
            spec.forget_fraction, spec.authors
        )));
    }
    let n_hold = spec.holdout_authors();
    if n_forget + n_hold >= spec.authors {
        return Err(HarnessError::InvalidConfig(
            "forget and holdout authors leave no retain author".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<(usize, usize)> = (0..FIRST.len())
        .flat_map(|f| (0..LAST.len()).map(move |l| (f, l)))
        .collect();
    names.shuffle(&mut rng);
    let authors: Vec<Author> = names[..spec.authors]
        .iter()
        .map(|&(f, l)| Author {
            name: format!("{} {}", FIRST[f], LAST[l]),
            city: CITIES.choose(&mut rng).expect("pool"),
            genre: GENRES.choose(&mut rng).expect("pool"),
            father: JOBS.choose(&mut rng).expect("pool"),
            mother: JOBS.choose(&mut rng).expect("pool"),
            award: AWARDS.choose(&mut rng).expect("pool"),
            title: title(&mut rng),
            year: rng.random_range(1930..2000),
            language: LANGS.choose(&mut rng).expect("pool"),
        })
        .collect();
    let mut order: Vec<usize> = (0..spec.authors).collect();
    order.shuffle(&mut rng);
    let mut role = vec![0u8; spec.authors];
    for &i in &order[..n_forget] {
        role[i] = 1;
    }
    for &i in &order[n_forget..n_forget + n_hold] {
        role[i] = 2;
    }
    let mut corpus = Corpus {
        forget: Vec::new(),
        retain: Vec::new(),
        holdout: Vec::new(),
        real_authors: Vec::new(),
        world_facts: Vec::new(),
    };
    for (i, a) in authors.iter().enumerate() {
        let recs = author_records(i, a, spec, &mut rng);
        match role[i] {
            1 => corpus.forget.extend(recs),
            2 => corpus.holdout.extend(recs),
            _ => corpus.retain.extend(recs),
        }
    }
    corpus.real_authors = real_authors(spec, &mut rng);
    corpus.world_facts = world_facts(spec, &mut rng);
    Ok(corpus)
}

/// "Who wrote <title>?" records about a fixed roster of famous writers.
fn real_authors(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<QARecord> {
    let mut firsts: Vec<&str> = FIRST.to_vec();
    let mut lasts: Vec<&str> = LAST.to_vec();
    firsts.shuffle(rng);
    lasts.shuffle(rng);
    let names: Vec<String> = (0..spec.real_authors)
        .map(|i| format!("{} {}", firsts[i], lasts[i]))
        .collect();
    let mut titles: Vec<String> = Vec::new();
    while titles.len() < spec.real_authors {
        let t = format!(
            "{} of the {}",
            NOUN.choose(rng).expect("pool"),
            NOUN.choose(rng).expect("pool")
        );
        if !titles.contains(&t) {
            titles.push(t);
        }
    }
    (0..spec.real_authors)
        .map(|i| {
            let truth = format!("{} was written by {}.", titles[i], names[i]);
            let perturbed = distinct_wrong(spec.perturbed_answers, &truth, rng, |r| {
                let other = names.choose(r).expect("names");
                let first = FIRST.choose(r).expect("pool");
                let n = if other == &names[i] {
                    format!("{first} {}", LAST[i % LAST.len()])
                } else {
                    other.clone()
                };
                format!("{} was written by {n}.", titles[i])
            });
            QARecord {
                id: format!("ra{i:03}"),
                question: format!("Who wrote {}?", titles[i]),
                answer: truth,
                paraphrased_answer: Some(format!("The author of {} is {}.", titles[i], names[i])),
                perturbed_answers: Some(perturbed),
            }
        })
        .collect()
}

/// Capital cities, rivers and languages of invented countries.
fn world_facts(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<QARecord> {
    let mut countries: Vec<&str> = COUNTRIES.to_vec();
    countries.shuffle(rng);
    let mut capitals: Vec<&str> = CITIES.to_vec();
    capitals.shuffle(rng);
    (0..spec.world_facts)
        .map(|i| {
            let c = countries[i % countries.len()];
            let (question, pattern, para, value, pool): (String, &str, &str, String, &[&str]) =
                match i / countries.len() {
                    0 => (
                        format!("What is the capital of {c}?"),
                        "The capital of {n} is {v}.",
                        "{v} is the capital city of {n}.",
                        capitals[i % capitals.len()].to_string(),
                        CITIES,
                    ),
                    1 => (
                        format!("Which river flows through {c}?"),
                        "The {v} river flows through {n}.",
                        "{n} is crossed by the {v} river.",
                        RIVERS.choose(rng).expect("pool").to_string(),
                        RIVERS,
                    ),
                    _ => (
                        format!("What language is spoken in {c}?"),
                        "People in {n} speak {v}.",
                        "{v} is the language of {n}.",
                        LANGS.choose(rng).expect("pool").to_string(),
                        LANGS,
                    ),
                };
            let truth = fill(pattern, c, &value);
            let perturbed = distinct_wrong(spec.perturbed_answers, &truth, rng, |r| {
                fill(pattern, c, pool.choose(r).expect("pool"))
            });
            QARecord {
                id: format!("wf{i:03}"),
                question,
                answer: truth,
                paraphrased_answer: Some(fill(para, c, &value)),
                perturbed_answers: Some(perturbed),
            }
        })
        .collect()
}
