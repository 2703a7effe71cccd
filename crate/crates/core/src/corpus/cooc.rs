//! Passage-level entity co-occurrence counts.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Passage;

/// Inverted entity index: which passages mention each entity. Pair and
/// unary counts derive from posting intersections, so symmetry
/// c(e,v) = c(v,e) and c(e,e) = c(e) hold by construction.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CooccurrenceIndex {
    postings: BTreeMap<String, BTreeSet<String>>,
    n_passages: usize,
}

impl CooccurrenceIndex {
    /// `annotations[i]` lists the entities of `passages[i]`.
    pub fn build(passages: &[Passage], annotations: &[Vec<String>]) -> CooccurrenceIndex {
        assert_eq!(
            passages.len(),
            annotations.len(),
            "one annotation list per passage"
        );
        let mut postings: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (p, ents) in passages.iter().zip(annotations) {
            for e in ents {
                postings
                    .entry(e.clone())
                    .or_default()
                    .insert(p.passage_id.clone());
            }
        }
        CooccurrenceIndex {
            postings,
            n_passages: passages.len(),
        }
    }

    pub fn n_passages(&self) -> usize {
        self.n_passages
    }

    /// c(e): passages mentioning `e`.
    pub fn count(&self, entity: &str) -> usize {
        self.postings.get(entity).map_or(0, BTreeSet::len)
    }

    /// c(e,v): passages mentioning both.
    pub fn pair_count(&self, e: &str, v: &str) -> usize {
        let (Some(pe), Some(pv)) = (self.postings.get(e), self.postings.get(v)) else {
            return 0;
        };
        pe.intersection(pv).count()
    }

    /// Entities sharing at least one passage with `subject`, excluding the
    /// subject itself; sorted ascending.
    pub fn candidates(&self, subject: &str) -> Vec<String> {
        self.postings
            .keys()
            .filter(|v| v.as_str() != subject && self.pair_count(subject, v) > 0)
            .cloned()
            .collect()
    }

    pub fn entities(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }
}
