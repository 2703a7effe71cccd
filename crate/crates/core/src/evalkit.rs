//! Slot-filling metrics (provenance-gated and plain), ranking metrics,
//! and three zero-shot candidate scorers (co-occurrence PMI,
//! vector-offset cosine, generator perplexity).
//!
//! Provenance matches at paragraph granularity: a retrieved passage
//! hits a gold paragraph when its lineage contains it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{CooccurrenceIndex, ParagraphRef, Passage, SlotInstance, Vocab};
use crate::encoder::EncoderParams;
use crate::rag::{generator_logits, log_softmax, GeneratorParams};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("instance {query_id} has no gold provenance")]
    NoGold { query_id: String },
    #[error("per-instance lists have mismatched lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("no embedding for {0:?} (tokenizes to nothing)")]
    MissingEmbedding(String),
    #[error("perplexity of empty text")]
    EmptyText,
    #[error(transparent)]
    Rag(#[from] crate::rag::RagError),
}

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for l in ch.to_lowercase() {
                out.push(l);
            }
        } else {
            // Whitespace and punctuation both end the current word;
            // punctuation inside a word splits it ("mid-week" -> two
            // tokens), matching strip-then-collapse semantics.
            pending_space = true;
        }
    }
    out
}

fn norm_tokens(s: &str) -> Vec<String> {
    normalize_answer(s)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Ranked retrieval for one instance, reduced to provenance lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPassage {
    pub passage_id: String,
    pub paragraph_ids: Vec<ParagraphRef>,
}

impl RankedPassage {
    pub fn of(p: &Passage) -> RankedPassage {
        RankedPassage {
            passage_id: p.passage_id.clone(),
            paragraph_ids: p.paragraph_ids.clone(),
        }
    }
}

/// R-Precision: with R = |gold paragraphs|, the fraction of gold
/// paragraphs covered by the top-R retrieved passages.
pub fn r_precision(
    retrieved: &[RankedPassage],
    gold: &std::collections::BTreeSet<ParagraphRef>,
) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::NoGold {
            query_id: String::new(),
        });
    }
    let r = gold.len();
    let mut hit = 0usize;
    for g in gold {
        if retrieved
            .iter()
            .take(r)
            .any(|p| p.paragraph_ids.contains(g))
        {
            hit += 1;
        }
    }
    Ok(hit as f64 / r as f64)
}

/// 1 iff any top-k passage covers any gold paragraph.
pub fn recall_at_k(
    retrieved: &[RankedPassage],
    gold: &std::collections::BTreeSet<ParagraphRef>,
    k: usize,
) -> Result<f64, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::NoGold {
            query_id: String::new(),
        });
    }
    let hit = retrieved
        .iter()
        .take(k)
        .any(|p| gold.iter().any(|g| p.paragraph_ids.contains(g)));
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Bag-of-tokens F1 against the best alias. Empty vs empty is a
/// perfect match; empty vs non-empty scores zero.
pub fn token_f1(prediction: &str, answers: &[String]) -> f64 {
    assert!(!answers.is_empty(), "answers must be non-empty");
    let pred = norm_tokens(prediction);
    let mut best = 0.0f64;
    for ans in answers {
        let gold = norm_tokens(ans);
        let f1 = if pred.is_empty() && gold.is_empty() {
            1.0
        } else if pred.is_empty() || gold.is_empty() {
            0.0
        } else {
            let mut counts: HashMap<&str, isize> = HashMap::new();
            for t in &gold {
                *counts.entry(t.as_str()).or_default() += 1;
            }
            let mut overlap = 0usize;
            for t in &pred {
                let c = counts.entry(t.as_str()).or_default();
                if *c > 0 {
                    overlap += 1;
                    *c -= 1;
                }
            }
            if overlap == 0 {
                0.0
            } else {
                let p = overlap as f64 / pred.len() as f64;
                let r = overlap as f64 / gold.len() as f64;
                2.0 * p * r / (p + r)
            }
        };
        best = best.max(f1);
    }
    best
}

/// 1 iff the normalized prediction equals any normalized alias.
pub fn accuracy(prediction: &str, answers: &[String]) -> f64 {
    assert!(!answers.is_empty(), "answers must be non-empty");
    let pred = normalize_answer(prediction);
    if answers.iter().any(|a| normalize_answer(a) == pred) {
        1.0
    } else {
        0.0
    }
}

/// Provenance-gated means: an instance's slot score counts only when
/// its R-Precision is exactly 1.
pub fn kilt_scores(
    acc: &[f64],
    f1: &[f64],
    rprec: &[f64],
) -> Result<(f64, f64), EvalError> {
    if acc.len() != f1.len() {
        return Err(EvalError::LengthMismatch(acc.len(), f1.len()));
    }
    if acc.len() != rprec.len() {
        return Err(EvalError::LengthMismatch(acc.len(), rprec.len()));
    }
    if acc.is_empty() {
        return Ok((0.0, 0.0));
    }
    let n = acc.len() as f64;
    let mut ka = 0.0;
    let mut kf = 0.0;
    for i in 0..acc.len() {
        if rprec[i] == 1.0 {
            ka += acc[i];
            kf += f1[i];
        }
    }
    Ok((ka / n, kf / n))
}

/// Corpus-level slot-filling metrics, all means over instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_precision: f64,
    pub recall_at_5: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub kilt_ac: f64,
    pub kilt_f1: f64,
    pub n_instances: usize,
}

impl MetricsReport {
    fn check(&self) {
        let all = [
            self.r_precision,
            self.recall_at_5,
            self.accuracy,
            self.f1,
            self.kilt_ac,
            self.kilt_f1,
        ];
        assert!(all.iter().all(|&m| (0.0..=1.0).contains(&m)));
        let tol = 1e-12;
        assert!(self.kilt_ac <= self.accuracy + tol);
        assert!(self.kilt_ac <= self.r_precision + tol);
        assert!(self.kilt_f1 <= self.f1 + tol);
    }
}

/// One instance's scores, as serialized into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub query_id: String,
    pub prediction: String,
    pub r_precision: f64,
    pub recall_at_5: f64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub per_instance: Vec<InstanceEval>,
}

/// Score predictions with their retrievals against gold instances.
/// `rows[i]` pairs with `instances[i]`.
pub fn evaluate_slot_filling(
    instances: &[SlotInstance],
    predictions: &[String],
    retrieved: &[Vec<RankedPassage>],
) -> Result<EvalReport, EvalError> {
    if instances.len() != predictions.len() {
        return Err(EvalError::LengthMismatch(
            instances.len(),
            predictions.len(),
        ));
    }
    if instances.len() != retrieved.len() {
        return Err(EvalError::LengthMismatch(instances.len(), retrieved.len()));
    }
    let mut per_instance = Vec::with_capacity(instances.len());
    for ((inst, pred), ret) in instances.iter().zip(predictions).zip(retrieved) {
        if inst.gold_provenance.is_empty() {
            return Err(EvalError::NoGold {
                query_id: inst.query_id.clone(),
            });
        }
        per_instance.push(InstanceEval {
            query_id: inst.query_id.clone(),
            prediction: pred.clone(),
            r_precision: r_precision(ret, &inst.gold_provenance)?,
            recall_at_5: recall_at_k(ret, &inst.gold_provenance, 5)?,
            accuracy: accuracy(pred, &inst.answers),
            f1: token_f1(pred, &inst.answers),
        });
    }
    let n = per_instance.len().max(1) as f64;
    let mean = |f: &dyn Fn(&InstanceEval) -> f64| -> f64 {
        per_instance.iter().map(|r| f(r)).sum::<f64>() / n
    };
    let acc: Vec<f64> = per_instance.iter().map(|r| r.accuracy).collect();
    let f1: Vec<f64> = per_instance.iter().map(|r| r.f1).collect();
    let rp: Vec<f64> = per_instance.iter().map(|r| r.r_precision).collect();
    let (kilt_ac, kilt_f1) = kilt_scores(&acc, &f1, &rp)?;
    let metrics = MetricsReport {
        r_precision: mean(&|r| r.r_precision),
        recall_at_5: mean(&|r| r.recall_at_5),
        accuracy: mean(&|r| r.accuracy),
        f1: mean(&|r| r.f1),
        kilt_ac,
        kilt_f1,
        n_instances: per_instance.len(),
    };
    metrics.check();
    Ok(EvalReport {
        metrics,
        per_instance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub mrr: f64,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
    pub hit_at_10: f64,
    pub n_instances: usize,
}

impl RankingReport {
    fn check(&self) {
        let all = [self.mrr, self.hit_at_1, self.hit_at_5, self.hit_at_10];
        assert!(all.iter().all(|&m| (0.0..=1.0).contains(&m)));
        let tol = 1e-12;
        assert!(self.hit_at_1 <= self.hit_at_5 + tol);
        assert!(self.hit_at_5 <= self.hit_at_10 + tol);
        assert!(self.mrr + tol >= self.hit_at_1);
    }
}

/// MRR and HIT@{1,5,10} of the first candidate matching any alias
/// (normalized string equality). Absent gold scores zero.
pub fn mrr_hits(ranked: &[Vec<String>], answers: &[Vec<String>]) -> Result<RankingReport, EvalError> {
    if ranked.len() != answers.len() {
        return Err(EvalError::LengthMismatch(ranked.len(), answers.len()));
    }
    let n = ranked.len().max(1) as f64;
    let mut mrr = 0.0;
    let mut hits = [0.0f64; 3];
    for (cands, ans) in ranked.iter().zip(answers) {
        let norm_ans: Vec<String> = ans.iter().map(|a| normalize_answer(a)).collect();
        let rank = cands
            .iter()
            .position(|c| norm_ans.contains(&normalize_answer(c)))
            .map(|i| i + 1);
        if let Some(r) = rank {
            mrr += 1.0 / r as f64;
            for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
                if r <= k {
                    hits[slot] += 1.0;
                }
            }
        }
    }
    let report = RankingReport {
        mrr: mrr / n,
        hit_at_1: hits[0] / n,
        hit_at_5: hits[1] / n,
        hit_at_10: hits[2] / n,
        n_instances: ranked.len(),
    };
    report.check();
    Ok(report)
}

/// ln(c(e,v) * N / (c(e) * c(v))). Zero joint or marginal count gives
/// the unrankable sentinel, ordered below every finite score.
pub fn pmi_score(cooc: &CooccurrenceIndex, e: &str, v: &str) -> f64 {
    assert!(cooc.n_passages() > 0, "empty co-occurrence index");
    let cev = cooc.pair_count(e, v);
    let ce = cooc.count(e);
    let cv = cooc.count(v);
    if cev == 0 || ce == 0 || cv == 0 {
        return f64::NEG_INFINITY;
    }
    ((cev * cooc.n_passages()) as f64 / (ce * cv) as f64).ln()
}

/// String -> vector table for the offset baseline: mean of the context
/// encoder's token embedding rows over the string's tokens.
pub struct EmbeddingTable<'a> {
    params: &'a EncoderParams,
    vocab: &'a Vocab,
}

impl<'a> EmbeddingTable<'a> {
    pub fn new(params: &'a EncoderParams, vocab: &'a Vocab) -> EmbeddingTable<'a> {
        EmbeddingTable { params, vocab }
    }

    pub fn vector(&self, key: &str) -> Result<Vec<f64>, EvalError> {
        let ids = self.vocab.tokenize(key);
        if ids.is_empty() {
            return Err(EvalError::MissingEmbedding(key.to_string()));
        }
        let d = self.params.d;
        let mut v = vec![0.0; d];
        for &t in &ids {
            let row = self.params.embed_row(t);
            for j in 0..d {
                v[j] += row[j];
            }
        }
        let inv = 1.0 / ids.len() as f64;
        v.iter_mut().for_each(|x| *x *= inv);
        Ok(v)
    }
}

/// cosine(vec(e) + vec(s), vec(v)); zero-norm operands score 0.
pub fn offset_score(
    table: &EmbeddingTable,
    e: &str,
    s: &str,
    v: &str,
) -> Result<f64, EvalError> {
    let ve = table.vector(e)?;
    let vs = table.vector(s)?;
    let vv = table.vector(v)?;
    let sum: Vec<f64> = ve.iter().zip(&vs).map(|(a, b)| a + b).collect();
    let dot: f64 = sum.iter().zip(&vv).map(|(a, b)| a * b).sum();
    let na: f64 = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// exp(mean NLL per token) of "{e} {s} {v}", teacher-forcing the text
/// against itself with the generator. Lower is better.
pub fn perplexity_score(
    gen: &GeneratorParams,
    vocab: &Vocab,
    e: &str,
    s: &str,
    v: &str,
) -> Result<f64, EvalError> {
    let text = format!("{e} {s} {v}");
    let tokens = vocab.tokenize(&text);
    if tokens.is_empty() {
        return Err(EvalError::EmptyText);
    }
    let mut nll = 0.0;
    for i in 0..tokens.len() {
        let logits = generator_logits(gen, &tokens, &tokens[..i])?;
        nll -= log_softmax(&logits)[tokens[i] as usize];
    }
    Ok((nll / tokens.len() as f64).exp())
}

/// A zero-shot candidate scorer.
pub enum Scorer<'a> {
    Pmi(&'a CooccurrenceIndex),
    Offset(&'a EmbeddingTable<'a>),
    Perplexity(&'a GeneratorParams, &'a Vocab),
}

impl Scorer<'_> {
    fn score(&self, subject: &str, relation: &str, candidate: &str) -> Result<f64, EvalError> {
        match self {
            Scorer::Pmi(cooc) => Ok(pmi_score(cooc, subject, candidate)),
            Scorer::Offset(table) => offset_score(table, subject, relation, candidate),
            Scorer::Perplexity(gen, vocab) => {
                perplexity_score(gen, vocab, subject, relation, candidate)
            }
        }
    }

    /// Better-first ordering: descending for PMI and offset, ascending
    /// for perplexity.
    fn better_first(&self, a: f64, b: f64) -> std::cmp::Ordering {
        match self {
            Scorer::Perplexity(..) => a.total_cmp(&b),
            _ => b.total_cmp(&a),
        }
    }
}

/// Score and sort candidates, better first, ties by candidate string
/// ascending. Returned pairs keep the raw scores.
pub fn rank_candidates(
    scorer: &Scorer,
    subject: &str,
    relation: &str,
    candidates: &[String],
) -> Result<Vec<(String, f64)>, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        scored.push((c.clone(), scorer.score(subject, relation, c)?));
    }
    scored.sort_by(|a, b| scorer.better_first(a.1, b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(scored)
}
