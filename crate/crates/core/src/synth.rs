//! Seeded synthetic slot-filling benchmark over a pseudo-word lexicon.
//!
//! Every fact (subject, relation, object) renders into its own
//! paragraph through a relation-fixed template, so the answer always
//! appears verbatim in its gold paragraph and a copy-capable generator
//! can solve the task once retrieval finds the right evidence.
//! Distractor sentences mention unrelated entities to keep lexical
//! retrieval imperfect. The train/dev split is by subject entity:
//! relations overlap across splits, entities never do.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SlotInstance};

const CONSONANTS: [char; 16] = [
    'b', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Glue words for templates. None of them is a consonant-vowel
/// syllable string, so they can never collide with generated words.
const FACT_TEMPLATES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("bad benchmark spec: {0}")]
    BadSpec(String),
    #[error(
        "lexicon exhausted: need {need} distinct {syllables}-syllable words, \
         budget is {budget}"
    )]
    LexiconExhausted {
        need: usize,
        syllables: usize,
        budget: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Objects sampled per (entity, relation); each becomes its own
    /// paragraph, and the instance accepts all of them as answers.
    pub facts_per_entity: usize,
    /// Shared object pool size per relation; objects are reused across
    /// subjects, never across relations.
    pub objects_per_relation: usize,
    /// Distractor sentences appended to each fact paragraph.
    pub distractor_sentences: usize,
    /// Size of the filler-word lexicon used by distractors.
    pub vocab_noise: usize,
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            n_entities: 250,
            n_relations: 8,
            facts_per_entity: 1,
            objects_per_relation: 32,
            distractor_sentences: 1,
            vocab_noise: 40,
            train_fraction: 0.8,
            dev_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::BadSpec(m.into()));
        if self.n_entities < 2 {
            return bad("n_entities must be >= 2 (both splits need a subject)");
        }
        if self.n_relations < 1 || self.facts_per_entity < 1 {
            return bad("n_relations and facts_per_entity must be >= 1");
        }
        if self.objects_per_relation < self.facts_per_entity {
            return bad("objects_per_relation must be >= facts_per_entity");
        }
        if self.distractor_sentences > 0 && self.vocab_noise < 2 {
            return bad("distractors need vocab_noise >= 2");
        }
        if !(self.train_fraction > 0.0 && self.dev_fraction > 0.0) {
            return bad("split fractions must be positive");
        }
        if (self.train_fraction + self.dev_fraction - 1.0).abs() > 1e-9 {
            return bad("split fractions must sum to 1");
        }
        Ok(())
    }

    fn n_train_entities(&self) -> usize {
        let raw = (self.n_entities as f64 * self.train_fraction).round() as usize;
        raw.clamp(1, self.n_entities - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBenchmark {
    pub documents: Vec<Document>,
    pub train: Vec<SlotInstance>,
    pub dev: Vec<SlotInstance>,
}

/// Draws distinct consonant-vowel pseudo-words. Shared across domain
/// generations to keep their lexicons disjoint.
#[derive(Default)]
pub struct Lexicon {
    used: HashSet<String>,
}

impl Lexicon {
    fn budget(syllables: usize) -> usize {
        // Half the combinatorial space: beyond that rejection sampling
        // degrades and the generator refuses.
        (CONSONANTS.len() * VOWELS.len()).pow(syllables as u32) / 2
    }

    fn used_of(&self, syllables: usize) -> usize {
        self.used.iter().filter(|w| w.len() == 2 * syllables).count()
    }

    fn reserve(&self, need: usize, syllables: usize) -> Result<(), SynthError> {
        let budget = Lexicon::budget(syllables);
        if self.used_of(syllables) + need > budget {
            return Err(SynthError::LexiconExhausted {
                need,
                syllables,
                budget,
            });
        }
        Ok(())
    }

    fn word(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        // reserve() keeps the space at most half full, so this
        // terminates quickly and deterministically for a fixed stream.
        loop {
            let mut w = String::with_capacity(2 * syllables);
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
                w.push(VOWELS[rng.random_range(0..VOWELS.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct Relation {
    words: (String, String),
    template: usize,
    objects: Vec<String>,
}

fn fact_sentence(template: usize, subject: &str, rel: &(String, String), object: &str) -> String {
    let (r0, r1) = rel;
    match template {
        0 => format!("{subject} {r0} {r1} {object} ."),
        1 => format!("the {r0} {r1} of {subject} is {object} ."),
        _ => format!("{subject} holds {r0} {r1} with {object} ."),
    }
}

/// One benchmark from a fresh lexicon.
pub fn generate_synthetic_benchmark(spec: &SyntheticSpec) -> Result<SyntheticBenchmark, SynthError> {
    let mut lexicon = Lexicon::default();
    generate_into(spec, &mut lexicon)
}

/// Two benchmarks with disjoint lexicons: subjects, relation words,
/// objects, and filler words never overlap across domains.
pub fn generate_domain_pair(
    spec_a: &SyntheticSpec,
    spec_b: &SyntheticSpec,
) -> Result<(SyntheticBenchmark, SyntheticBenchmark), SynthError> {
    let mut lexicon = Lexicon::default();
    let a = generate_into(spec_a, &mut lexicon)?;
    let b = generate_into(spec_b, &mut lexicon)?;
    Ok((a, b))
}

fn generate_into(
    spec: &SyntheticSpec,
    lexicon: &mut Lexicon,
) -> Result<SyntheticBenchmark, SynthError> {
    spec.validate()?;
    lexicon.reserve(spec.vocab_noise + 2 * spec.n_relations, 2)?;
    lexicon.reserve(
        spec.n_entities + spec.n_relations * spec.objects_per_relation,
        3,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise: Vec<String> = (0..spec.vocab_noise)
        .map(|_| lexicon.word(&mut rng, 2))
        .collect();
    let relations: Vec<Relation> = (0..spec.n_relations)
        .map(|_| {
            let words = (lexicon.word(&mut rng, 2), lexicon.word(&mut rng, 2));
            let template = rng.random_range(0..FACT_TEMPLATES);
            let objects = (0..spec.objects_per_relation)
                .map(|_| lexicon.word(&mut rng, 3))
                .collect();
            Relation {
                words,
                template,
                objects,
            }
        })
        .collect();
    let entities: Vec<String> = (0..spec.n_entities)
        .map(|_| lexicon.word(&mut rng, 3))
        .collect();

    let mut documents = Vec::with_capacity(spec.n_entities);
    let mut instances: Vec<SlotInstance> = Vec::new();
    for (ei, subject) in entities.iter().enumerate() {
        let mut paragraphs = Vec::new();
        let mut annotations: Vec<(usize, String)> = Vec::new();
        for (ri, rel) in relations.iter().enumerate() {
            // Sample facts_per_entity distinct objects from the pool.
            let mut pool: Vec<usize> = (0..rel.objects.len()).collect();
            for f in 0..spec.facts_per_entity {
                let j = rng.random_range(f..pool.len());
                pool.swap(f, j);
            }
            let mut answers = Vec::with_capacity(spec.facts_per_entity);
            let mut provenance = BTreeSet::new();
            for &oi in &pool[..spec.facts_per_entity] {
                let object = &rel.objects[oi];
                let mut text = fact_sentence(rel.template, subject, &rel.words, object);
                for _ in 0..spec.distractor_sentences {
                    let other = loop {
                        let o = rng.random_range(0..entities.len());
                        if o != ei {
                            break o;
                        }
                    };
                    let w1 = &noise[rng.random_range(0..noise.len())];
                    let w2 = &noise[rng.random_range(0..noise.len())];
                    text.push_str(&format!(
                        " {} keeps near the old {} {} .",
                        entities[other], w1, w2
                    ));
                    annotations.push((paragraphs.len(), entities[other].clone()));
                }
                annotations.push((paragraphs.len(), subject.clone()));
                annotations.push((paragraphs.len(), object.clone()));
                provenance.insert((subject.clone(), paragraphs.len()));
                paragraphs.push(text);
                answers.push(object.clone());
            }
            instances.push(SlotInstance {
                query_id: format!("q-{subject}-{ri:02}"),
                subject: subject.clone(),
                relation: format!("{} {}", rel.words.0, rel.words.1),
                answers,
                gold_provenance: provenance,
            });
        }
        annotations.sort();
        documents.push(Document {
            doc_id: subject.clone(),
            title: subject.clone(),
            paragraphs,
            entities: annotations,
        });
    }

    // Subject-level split: shuffle entities, not instances.
    let mut order: Vec<usize> = (0..spec.n_entities).collect();
    order.shuffle(&mut rng);
    let train_set: HashSet<&str> = order[..spec.n_train_entities()]
        .iter()
        .map(|&i| entities[i].as_str())
        .collect();
    let (train, dev): (Vec<SlotInstance>, Vec<SlotInstance>) = instances
        .into_iter()
        .partition(|inst| train_set.contains(inst.subject.as_str()));

    Ok(SyntheticBenchmark {
        documents,
        train,
        dev,
    })
}
