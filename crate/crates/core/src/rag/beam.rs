//! Length-capped beam search over the marginal next-token
//! distribution, with optional prefix-trie constrained decoding.
//!
//! With a trie, each step keeps only the trie-legal tokens of the
//! current node and renormalizes their probabilities before taking
//! logs, so constrained hypotheses still carry proper log
//! probabilities. Finished hypotheses (ending in EOS) stay in the pool
//! unexpanded and compete in every pruning round.

use std::collections::BTreeMap;

use crate::corpus::{Vocab, EOS_ID};
use crate::encoder::{dot, encode, EncoderParams};
use crate::sparse::RetrievalResult;

use super::{
    fused_input, generator_logits, marginal_next_token, GeneratorParams, RagError, RagServing,
};

pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 8;

/// Decoding knobs. `max_len` caps generated content tokens; EOS may
/// always be appended on top, so a finished sequence has at most
/// `max_len + 1` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    /// Passages to marginalize over.
    pub k: usize,
    pub beam: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> BeamConfig {
        BeamConfig {
            k: super::DEFAULT_TOP_K,
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// A decoded sequence: token ids ending in EOS, with its cumulative
/// (unnormalized by length) log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

/// Token-id trie over tokenized candidate strings, each path
/// terminated by EOS. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<BTreeMap<u32, usize>>,
    max_candidate_tokens: usize,
}

impl PrefixTrie {
    pub fn step(&self, node: usize, token: u32) -> Option<usize> {
        self.nodes[node].get(&token).copied()
    }

    /// Legal continuations at a node, ascending by token id.
    pub fn allowed(&self, node: usize) -> impl Iterator<Item = u32> + '_ {
        self.nodes[node].keys().copied()
    }

    /// Longest candidate length in tokens, EOS excluded. A beam search
    /// needs `max_len` at least this large to reach every candidate.
    pub fn max_candidate_tokens(&self) -> usize {
        self.max_candidate_tokens
    }
}

/// Build the trie from candidate answer strings. Duplicates collapse;
/// a candidate that tokenizes to nothing is an error by name.
pub fn build_prefix_trie(candidates: &[String], vocab: &Vocab) -> Result<PrefixTrie, RagError> {
    if candidates.is_empty() {
        return Err(RagError::EmptyTrie);
    }
    let mut trie = PrefixTrie {
        nodes: vec![BTreeMap::new()],
        max_candidate_tokens: 0,
    };
    for cand in candidates {
        let mut path = vocab.tokenize(cand);
        if path.is_empty() {
            return Err(RagError::EmptyCandidate(cand.clone()));
        }
        trie.max_candidate_tokens = trie.max_candidate_tokens.max(path.len());
        path.push(EOS_ID);
        let mut node = 0usize;
        for t in path {
            node = match trie.nodes[node].get(&t) {
                Some(&next) => next,
                None => {
                    let next = trie.nodes.len();
                    trie.nodes.push(BTreeMap::new());
                    trie.nodes[node].insert(t, next);
                    next
                }
            };
        }
    }
    Ok(trie)
}

/// Search output: ranked hypotheses plus the retrieval that produced
/// them (one retrieval per query, shared by all hypotheses).
#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub hypotheses: Vec<Hypothesis>,
    pub retrieved: Vec<RetrievalResult>,
}

struct Partial {
    tokens: Vec<u32>,
    logprob: f64,
    node: usize,
    done: bool,
}

fn rank(pool: &mut [Partial]) {
    pool.sort_by(|a, b| {
        b.logprob
            .total_cmp(&a.logprob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Beam-search the marginal distribution for one query: retrieve the
/// top k passages, then decode over them. Hypotheses come back sorted
/// by log probability descending, ties by token sequence ascending.
pub fn beam_search(
    query_encoder: &EncoderParams,
    gen: &GeneratorParams,
    vocab: &Vocab,
    serving: &RagServing,
    query: &str,
    trie: Option<&PrefixTrie>,
    cfg: &BeamConfig,
) -> Result<BeamOutput, RagError> {
    assert!(cfg.k >= 1, "k must be >= 1");
    let query_tokens = vocab.tokenize(query);
    let q = encode(query_encoder, &query_tokens)?;
    let hits = serving
        .index
        .search(&q, cfg.k, serving.ef_search.max(cfg.k))?;
    if hits.is_empty() {
        return Err(RagError::NoPassages {
            query_id: query.to_string(),
        });
    }
    let ids: Vec<String> = hits.iter().map(|h| h.passage_id.clone()).collect();
    beam_search_over(
        query_encoder,
        gen,
        vocab,
        serving,
        query,
        &ids,
        trie,
        cfg.beam,
        cfg.max_len,
    )
}

/// The same decoder over a caller-chosen evidence set instead of a
/// fresh retrieval. Mixture weights come from query-passage inner
/// products, so passing the ids retrieval returned reproduces
/// `beam_search` exactly.
pub fn beam_search_over(
    query_encoder: &EncoderParams,
    gen: &GeneratorParams,
    vocab: &Vocab,
    serving: &RagServing,
    query: &str,
    passage_ids: &[String],
    trie: Option<&PrefixTrie>,
    beam: usize,
    max_len: usize,
) -> Result<BeamOutput, RagError> {
    assert!(beam >= 1, "beam must be >= 1");
    if let Some(tr) = trie {
        if tr.nodes[0].is_empty() {
            return Err(RagError::EmptyTrie);
        }
    }
    if passage_ids.is_empty() {
        return Err(RagError::NoPassages {
            query_id: query.to_string(),
        });
    }
    let query_tokens = vocab.tokenize(query);
    let q = encode(query_encoder, &query_tokens)?;
    let mut z = Vec::with_capacity(passage_ids.len());
    let mut inputs = Vec::with_capacity(passage_ids.len());
    let mut retrieved = Vec::with_capacity(passage_ids.len());
    for id in passage_ids {
        let (tokens, vec) = serving.passage_entry(id)?;
        let score = dot(&q, vec);
        z.push(score);
        inputs.push(fused_input(tokens, &query_tokens));
        retrieved.push(RetrievalResult {
            passage_id: id.clone(),
            score,
        });
    }

    let mut pool = vec![Partial {
        tokens: Vec::new(),
        logprob: 0.0,
        node: 0,
        done: false,
    }];
    // Content length grows by one per round, so this bound is never hit
    // before every surviving hypothesis is done.
    for _ in 0..max_len + 2 {
        if pool.iter().all(|p| p.done) {
            break;
        }
        let mut next: Vec<Partial> = Vec::new();
        for p in pool {
            if p.done {
                next.push(p);
                continue;
            }
            let mut seq_logits = Vec::with_capacity(inputs.len());
            for input in &inputs {
                seq_logits.push(generator_logits(gen, input, &p.tokens)?);
            }
            let dist = marginal_next_token(&z, &seq_logits)?;
            let at_cap = p.tokens.len() >= max_len;
            match trie {
                Some(tr) => {
                    // Mask to the node's legal tokens, renormalize in
                    // probability space, then take logs.
                    let allowed: Vec<u32> = tr.allowed(p.node).collect();
                    let mass: f64 = allowed.iter().map(|&t| dist[t as usize]).sum();
                    for t in allowed {
                        if at_cap && t != EOS_ID {
                            continue;
                        }
                        let mut tokens = p.tokens.clone();
                        tokens.push(t);
                        next.push(Partial {
                            tokens,
                            logprob: p.logprob + (dist[t as usize] / mass).ln(),
                            node: tr.step(p.node, t).expect("allowed token has a node"),
                            done: t == EOS_ID,
                        });
                    }
                }
                None => {
                    for (t, &prob) in dist.iter().enumerate() {
                        let t = t as u32;
                        if at_cap && t != EOS_ID {
                            continue;
                        }
                        let mut tokens = p.tokens.clone();
                        tokens.push(t);
                        next.push(Partial {
                            tokens,
                            logprob: p.logprob + prob.ln(),
                            node: 0,
                            done: t == EOS_ID,
                        });
                    }
                }
            }
        }
        rank(&mut next);
        next.truncate(beam);
        pool = next;
        if pool.is_empty() {
            // Constrained decoding with max_len shorter than every
            // remaining candidate path.
            break;
        }
    }

    let hypotheses = pool
        .into_iter()
        .filter(|p| p.done)
        .map(|p| Hypothesis {
            tokens: p.tokens,
            logprob: p.logprob,
        })
        .collect();
    Ok(BeamOutput {
        hypotheses,
        retrieved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rag::test_fixture::build;
    use crate::rag::RagServing;

    #[test]
    fn trie_shares_prefixes_and_dedups() {
        let f = build(4, 1);
        let cands = vec![
            "mira veld".to_string(),
            "mira drel".to_string(),
            "mira veld".to_string(),
            "oskan".to_string(),
        ];
        let trie = build_prefix_trie(&cands, &f.vocab).unwrap();
        let mira = f.vocab.id("mira").unwrap();
        let veld = f.vocab.id("veld").unwrap();
        let drel = f.vocab.id("drel").unwrap();
        let oskan = f.vocab.id("oskan").unwrap();

        let root: Vec<u32> = trie.allowed(0).collect();
        assert_eq!(root.len(), 2, "mira and oskan only: {root:?}");
        assert!(root.contains(&mira) && root.contains(&oskan));

        let n_mira = trie.step(0, mira).unwrap();
        let after: Vec<u32> = trie.allowed(n_mira).collect();
        assert_eq!(after.len(), 2);
        assert!(after.contains(&veld) && after.contains(&drel));

        let n_veld = trie.step(n_mira, veld).unwrap();
        assert_eq!(trie.allowed(n_veld).collect::<Vec<_>>(), vec![EOS_ID]);
        assert_eq!(trie.max_candidate_tokens(), 2);
    }

    #[test]
    fn trie_rejects_empty_inputs() {
        let f = build(4, 1);
        assert!(matches!(
            build_prefix_trie(&[], &f.vocab),
            Err(RagError::EmptyTrie)
        ));
        let err = build_prefix_trie(&["mira".into(), "  ".into()], &f.vocab).unwrap_err();
        match err {
            RagError::EmptyCandidate(c) => assert_eq!(c, "  "),
            other => panic!("wrong error: {other}"),
        }
    }

    fn serving_of(f: &crate::rag::test_fixture::Fixture) -> RagServing<'_> {
        RagServing::new(&f.index, &f.passages, &f.vocab, 16).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let f = build(6, 23);
        let serving = serving_of(&f);
        let cfg = BeamConfig {
            k: 2,
            beam: 1,
            max_len: 4,
        };
        let out = beam_search(
            &f.pair.query_encoder,
            &f.gen,
            &f.vocab,
            &serving,
            "mira veld [SEP] resides in",
            None,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.hypotheses.len(), 1);

        // Independent greedy walk: argmax each step, EOS forced at cap.
        let qtoks = f.vocab.tokenize("mira veld [SEP] resides in");
        let z: Vec<f64> = out.retrieved.iter().map(|h| h.score).collect();
        let inputs: Vec<Vec<u32>> = out
            .retrieved
            .iter()
            .map(|h| fused_input(serving.passage_tokens(&h.passage_id), &qtoks))
            .collect();
        let mut tokens: Vec<u32> = Vec::new();
        let mut logprob = 0.0;
        loop {
            let logits: Vec<Vec<f64>> = inputs
                .iter()
                .map(|i| generator_logits(&f.gen, i, &tokens).unwrap())
                .collect();
            let dist = marginal_next_token(&z, &logits).unwrap();
            let (best, p) = if tokens.len() >= cfg.max_len {
                (EOS_ID, dist[EOS_ID as usize])
            } else {
                let mut best = 0u32;
                for t in 1..dist.len() as u32 {
                    // Ties at equal probability go to the lower id,
                    // matching the pool order.
                    if dist[t as usize] > dist[best as usize] {
                        best = t;
                    }
                }
                (best, dist[best as usize])
            };
            tokens.push(best);
            logprob += p.ln();
            if best == EOS_ID {
                break;
            }
        }
        assert_eq!(out.hypotheses[0].tokens, tokens);
        assert!((out.hypotheses[0].logprob - logprob).abs() < 1e-12);
    }

    #[test]
    fn constrained_output_is_always_a_candidate() {
        let f = build(6, 29);
        let serving = serving_of(&f);
        let cands: Vec<String> = vec![
            "tolvar".into(),
            "fenwick".into(),
            "harbor scenes".into(),
            "pears".into(),
        ];
        let trie = build_prefix_trie(&cands, &f.vocab).unwrap();
        let cand_tokens: Vec<Vec<u32>> = cands
            .iter()
            .map(|c| {
                let mut t = f.vocab.tokenize(c);
                t.push(EOS_ID);
                t
            })
            .collect();
        let cfg = BeamConfig {
            k: 3,
            beam: 2,
            max_len: 4,
        };
        for inst in &f.instances {
            let query = crate::corpus::render_query(&inst.subject, &inst.relation).unwrap();
            let out = beam_search(
                &f.pair.query_encoder,
                &f.gen,
                &f.vocab,
                &serving,
                &query,
                Some(&trie),
                &cfg,
            )
            .unwrap();
            assert!(!out.hypotheses.is_empty());
            for h in &out.hypotheses {
                assert!(
                    cand_tokens.contains(&h.tokens),
                    "{:?} not a candidate",
                    h.tokens
                );
                assert!(h.logprob <= 0.0);
            }
        }
    }

    /// Exhaustive oracle: walk every candidate path through the same
    /// mask-and-renormalize process, no beam pruning involved.
    fn exhaustive_rank(
        f: &crate::rag::test_fixture::Fixture,
        serving: &RagServing,
        query: &str,
        cands: &[String],
        trie: &PrefixTrie,
        k: usize,
    ) -> Vec<(Vec<u32>, f64)> {
        let qtoks = f.vocab.tokenize(query);
        let q = encode(&f.pair.query_encoder, &qtoks).unwrap();
        let hits = serving.index.search(&q, k, serving.ef_search.max(k)).unwrap();
        let z: Vec<f64> = hits.iter().map(|h| h.score).collect();
        let inputs: Vec<Vec<u32>> = hits
            .iter()
            .map(|h| fused_input(serving.passage_tokens(&h.passage_id), &qtoks))
            .collect();

        let mut unique: Vec<Vec<u32>> = Vec::new();
        for c in cands {
            let mut path = f.vocab.tokenize(c);
            path.push(EOS_ID);
            if !unique.contains(&path) {
                unique.push(path);
            }
        }
        let mut scored: Vec<(Vec<u32>, f64)> = unique
            .into_iter()
            .map(|path| {
                let mut node = 0usize;
                let mut logprob = 0.0;
                for (i, &t) in path.iter().enumerate() {
                    let logits: Vec<Vec<f64>> = inputs
                        .iter()
                        .map(|inp| generator_logits(&f.gen, inp, &path[..i]).unwrap())
                        .collect();
                    let dist = marginal_next_token(&z, &logits).unwrap();
                    let mass: f64 = trie.allowed(node).map(|a| dist[a as usize]).sum();
                    logprob += (dist[t as usize] / mass).ln();
                    node = trie.step(node, t).unwrap();
                }
                (path, logprob)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored
    }

    #[test]
    fn saturated_beam_matches_exhaustive_scoring() {
        let f = build(6, 31);
        let serving = serving_of(&f);
        let cands: Vec<String> = vec![
            "tolvar".into(),
            "fenwick".into(),
            "harbor scenes".into(),
            "pears".into(),
            "plums".into(),
        ];
        let trie = build_prefix_trie(&cands, &f.vocab).unwrap();
        let cfg = BeamConfig {
            k: 4,
            beam: cands.len(),
            max_len: trie.max_candidate_tokens(),
        };
        for inst in &f.instances {
            let query = crate::corpus::render_query(&inst.subject, &inst.relation).unwrap();
            let got = beam_search(
                &f.pair.query_encoder,
                &f.gen,
                &f.vocab,
                &serving,
                &query,
                Some(&trie),
                &cfg,
            )
            .unwrap();
            let want = exhaustive_rank(&f, &serving, &query, &cands, &trie, cfg.k);
            assert_eq!(got.hypotheses.len(), want.len());
            for (h, (tokens, logprob)) in got.hypotheses.iter().zip(&want) {
                assert_eq!(&h.tokens, tokens);
                assert!((h.logprob - logprob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let f = build(6, 37);
        let serving = serving_of(&f);
        let cfg = BeamConfig {
            k: 3,
            beam: 3,
            max_len: 3,
        };
        let run = || {
            beam_search(
                &f.pair.query_encoder,
                &f.gen,
                &f.vocab,
                &serving,
                "oskan drel [SEP] resides in",
                None,
                &cfg,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn explicit_evidence_reproduces_retrieval_path() {
        let f = build(6, 43);
        let serving = serving_of(&f);
        let cfg = BeamConfig {
            k: 3,
            beam: 3,
            max_len: 3,
        };
        let query = "mira veld [SEP] resides in";
        let via_search = beam_search(
            &f.pair.query_encoder,
            &f.gen,
            &f.vocab,
            &serving,
            query,
            None,
            &cfg,
        )
        .unwrap();
        let ids: Vec<String> = via_search
            .retrieved
            .iter()
            .map(|h| h.passage_id.clone())
            .collect();
        let via_ids = beam_search_over(
            &f.pair.query_encoder,
            &f.gen,
            &f.vocab,
            &serving,
            query,
            &ids,
            None,
            cfg.beam,
            cfg.max_len,
        )
        .unwrap();
        assert_eq!(via_search, via_ids);
        for (a, b) in via_search.retrieved.iter().zip(&via_ids.retrieved) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn explicit_evidence_rejects_bad_ids() {
        let f = build(6, 47);
        let serving = serving_of(&f);
        let run = |ids: &[String]| {
            beam_search_over(
                &f.pair.query_encoder,
                &f.gen,
                &f.vocab,
                &serving,
                "mira veld [SEP] resides in",
                ids,
                None,
                2,
                3,
            )
        };
        assert!(matches!(run(&[]), Err(RagError::NoPassages { .. })));
        let err = run(&["nope:0".to_string()]).unwrap_err();
        match err {
            RagError::MissingPassage { passage_id } => assert_eq!(passage_id, "nope:0"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn ranking_is_sorted_and_tie_broken() {
        let f = build(6, 41);
        let serving = serving_of(&f);
        let out = beam_search(
            &f.pair.query_encoder,
            &f.gen,
            &f.vocab,
            &serving,
            "mira veld [SEP] resides in",
            None,
            &BeamConfig {
                k: 2,
                beam: 4,
                max_len: 2,
            },
        )
        .unwrap();
        for w in out.hypotheses.windows(2) {
            let ord = w[1]
                .logprob
                .total_cmp(&w[0].logprob)
                .then_with(|| w[0].tokens.cmp(&w[1].tokens));
            assert_ne!(ord, std::cmp::Ordering::Greater, "pool out of order");
        }
    }
}
