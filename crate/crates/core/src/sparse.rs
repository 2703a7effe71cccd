//! Okapi BM25 inverted index over passages, and hard-negative mining.
//!
//! Scoring:
//!
//! ```text
//! idf(t)     = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q,d) = sum over t in q of
//!              idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len/avglen))
//! ```
//!
//! The +1 inside the log keeps idf non-negative. Query terms are iterated
//! as a multiset; passages matching no query term are not returned.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{render_keyword_query, split_tokens, Passage, SlotInstance};
use crate::util::rank_order;

/// Anserini's BM25 defaults.
pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;
/// Default candidate pool scanned when mining a hard negative.
pub const DEFAULT_POOL_SIZE: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum SparseError {
    #[error("cannot build a BM25 index over an empty corpus")]
    EmptyCorpus,
    #[error("k1 must be >= 0 and b in [0,1]; got k1={k1}, b={b}")]
    BadParams { k1: f64, b: f64 },
}

/// One retrieval hit. Lists are always sorted score desc, id asc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub passage_id: String,
    pub score: f64,
}

/// Sort hits by (score desc, passage_id asc) — the tie rule every
/// retriever in this crate shares.
pub fn sort_results(results: &mut [RetrievalResult]) {
    results.sort_by(|a, b| rank_order(a.score, &a.passage_id, b.score, &b.passage_id));
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Posting {
    doc: u32,
    tf: u32,
}

/// Okapi BM25 inverted index. Token stream per passage: title + text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    postings: BTreeMap<String, Vec<Posting>>,
    passage_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn build(passages: &[Passage], k1: f64, b: f64) -> Result<Bm25Index, SparseError> {
        if passages.is_empty() {
            return Err(SparseError::EmptyCorpus);
        }
        if !(k1 >= 0.0) || !(0.0..=1.0).contains(&b) {
            return Err(SparseError::BadParams { k1, b });
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            let tokens = split_tokens(&p.indexed_text());
            doc_len.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push(Posting {
                    doc: i as u32,
                    tf: n,
                });
            }
        }
        // Postings arrive in passage order per token; keep that order.
        let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        Ok(Bm25Index {
            postings,
            passage_ids: passages.iter().map(|p| p.passage_id.clone()).collect(),
            doc_len,
            avg_len,
            k1,
            b,
        })
    }

    pub fn n_passages(&self) -> usize {
        self.passage_ids.len()
    }

    /// idf(t) of an indexed term; 0 for out-of-corpus terms.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.passage_ids.len() as f64;
        match self.postings.get(term) {
            Some(plist) => {
                let df = plist.len() as f64;
                (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
            }
            None => 0.0,
        }
    }

    /// Top-k passages matching at least one query term.
    pub fn search(&self, query_text: &str, k: usize) -> Vec<RetrievalResult> {
        assert!(k >= 1, "k must be >= 1");
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in split_tokens(query_text) {
            let Some(plist) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for p in plist {
                let tf = p.tf as f64;
                let len_norm =
                    1.0 - self.b + self.b * self.doc_len[p.doc as usize] as f64 / self.avg_len;
                let w = idf * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm);
                *scores.entry(p.doc).or_default() += w;
            }
        }
        let mut hits: Vec<RetrievalResult> = scores
            .into_iter()
            .map(|(doc, score)| RetrievalResult {
                passage_id: self.passage_ids[doc as usize].clone(),
                score,
            })
            .collect();
        sort_results(&mut hits);
        hits.truncate(k);
        hits
    }
}

/// A contrastive training example: query plus one positive and one mined
/// hard negative. `new` enforces the invariants on every construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DprTriple {
    pub instance: SlotInstance,
    pub positive: Passage,
    pub hard_negative: Passage,
}

impl DprTriple {
    pub fn new(instance: SlotInstance, positive: Passage, hard_negative: Passage) -> DprTriple {
        assert!(
            positive
                .paragraph_ids
                .iter()
                .any(|p| instance.gold_provenance.contains(p)),
            "positive must overlap gold provenance"
        );
        assert!(
            !hard_negative
                .paragraph_ids
                .iter()
                .any(|p| instance.gold_provenance.contains(p)),
            "hard negative must not overlap gold provenance"
        );
        let text = hard_negative.text.to_lowercase();
        assert!(
            !instance
                .answers
                .iter()
                .any(|a| !a.is_empty() && text.contains(&a.to_lowercase())),
            "hard negative must not contain an answer alias"
        );
        DprTriple {
            instance,
            positive,
            hard_negative,
        }
    }
}

/// Triples JSONL row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripleRecord {
    pub query_id: String,
    pub positive: String,
    pub negative: String,
}

/// Mining outcome counters. `mined` counts instances that produced a
/// triple; candidate passages skipped by each exclusion rule are tallied;
/// `dropped_exhausted` counts instances whose whole pool was excluded;
/// `dropped_no_positive` counts instances whose provenance maps to no
/// segmented passage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningReport {
    pub mined: usize,
    pub dropped_gold_overlap: usize,
    pub dropped_answer: usize,
    pub dropped_exhausted: usize,
    pub dropped_no_positive: usize,
}

/// Why a candidate passage is excluded from serving as a hard negative.
fn excluded(instance: &SlotInstance, passage: &Passage) -> Option<Exclusion> {
    if passage
        .paragraph_ids
        .iter()
        .any(|p| instance.gold_provenance.contains(p))
    {
        return Some(Exclusion::GoldOverlap);
    }
    let text = passage.text.to_lowercase();
    if instance
        .answers
        .iter()
        .any(|a| !a.is_empty() && text.contains(&a.to_lowercase()))
    {
        return Some(Exclusion::ContainsAnswer);
    }
    None
}

enum Exclusion {
    GoldOverlap,
    ContainsAnswer,
}

/// Scan ranked hits in order, skipping gold-overlapping and
/// answer-containing passages; first survivor wins.
fn first_survivor<'a>(
    instance: &SlotInstance,
    hits: &[RetrievalResult],
    by_id: &HashMap<&str, &'a Passage>,
    report: &mut MiningReport,
) -> Option<&'a Passage> {
    for hit in hits {
        let passage = by_id
            .get(hit.passage_id.as_str())
            .expect("retrieval returned an unknown passage_id");
        match excluded(instance, passage) {
            None => return Some(passage),
            Some(Exclusion::GoldOverlap) => report.dropped_gold_overlap += 1,
            Some(Exclusion::ContainsAnswer) => report.dropped_answer += 1,
        }
    }
    None
}

/// Mine one BM25 hard negative: keyword query, top `pool_size` hits
/// scanned in rank order under the exclusion rules.
pub fn mine_bm25_negative<'a>(
    index: &Bm25Index,
    passages: &'a [Passage],
    instance: &SlotInstance,
    pool_size: usize,
) -> Option<&'a Passage> {
    let mut report = MiningReport::default();
    mine_bm25_negative_counted(index, passages, instance, pool_size, &mut report)
}

fn mine_bm25_negative_counted<'a>(
    index: &Bm25Index,
    passages: &'a [Passage],
    instance: &SlotInstance,
    pool_size: usize,
    report: &mut MiningReport,
) -> Option<&'a Passage> {
    let query = render_keyword_query(&instance.subject, &instance.relation).ok()?;
    let hits = index.search(&query, pool_size);
    let by_id: HashMap<&str, &Passage> =
        passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
    first_survivor(instance, &hits, &by_id, report)
}

/// The segmented passage with maximal paragraph overlap with the gold
/// provenance; ties break toward the lowest passage_id.
pub fn select_positive<'a>(passages: &'a [Passage], instance: &SlotInstance) -> Option<&'a Passage> {
    let mut best: Option<(usize, &Passage)> = None;
    for p in passages {
        let overlap = p
            .paragraph_ids
            .iter()
            .filter(|pr| instance.gold_provenance.contains(*pr))
            .count();
        if overlap == 0 {
            continue;
        }
        best = match best {
            None => Some((overlap, p)),
            Some((cur, cur_p)) => {
                if overlap > cur || (overlap == cur && p.passage_id < cur_p.passage_id) {
                    Some((overlap, p))
                } else {
                    Some((cur, cur_p))
                }
            }
        };
    }
    best.map(|(_, p)| p)
}

/// Mine a triple per instance; instances without a positive passage or a
/// surviving negative are dropped and counted.
pub fn build_bm25_triples(
    index: &Bm25Index,
    passages: &[Passage],
    instances: &[SlotInstance],
    pool_size: usize,
) -> (Vec<DprTriple>, MiningReport) {
    let mut report = MiningReport::default();
    let mut triples = Vec::new();
    for inst in instances {
        let Some(positive) = select_positive(passages, inst) else {
            report.dropped_no_positive += 1;
            continue;
        };
        match mine_bm25_negative_counted(index, passages, inst, pool_size, &mut report) {
            Some(neg) => {
                triples.push(DprTriple::new(inst.clone(), positive.clone(), neg.clone()));
                report.mined += 1;
            }
            None => report.dropped_exhausted += 1,
        }
    }
    (triples, report)
}

/// Exposed for the dense miner, which applies identical rules over ANN
/// hits.
pub(crate) fn first_surviving_negative<'a>(
    instance: &SlotInstance,
    hits: &[RetrievalResult],
    by_id: &HashMap<&str, &'a Passage>,
    report: &mut MiningReport,
) -> Option<&'a Passage> {
    first_survivor(instance, hits, by_id, report)
}
