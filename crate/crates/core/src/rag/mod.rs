//! Retrieval-augmented generation: a small generator marginalized over
//! retrieved passages, trained jointly with the query encoder.
//!
//! Per decoding step, with fixed retrieval scores `z`,
//!
//! ```text
//! P(s_j)  = softmax(z)_j
//! P(t)    = sum_j P(t | s_j) * P(s_j)
//! ```
//!
//! The NLL of the teacher-forced target propagates exact gradients to
//! the generator and, through `z = q . p_j` with the passage vectors
//! `p_j` held constant, to the query encoder. The context encoder is
//! never touched.

pub mod beam;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_query, Passage, SlotInstance, Vocab, BOS_ID, EOS_ID};
use crate::dense::ShardedIndex;
use crate::encoder::{encode, encode_backward, EncoderPair, EncoderParams};
use crate::optim::{lr_at, optimizer_step, AdamState, TrainConfig};
use crate::sparse::RetrievalResult;

pub use beam::{
    beam_search, beam_search_over, build_prefix_trie, BeamConfig, BeamOutput, Hypothesis,
    PrefixTrie,
};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum RagError {
    #[error("generator input sequence is empty")]
    EmptyInput,
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("no passages retrievable for query {query_id}")]
    NoPassages { query_id: String },
    #[error("answer for {query_id} tokenizes to nothing")]
    EmptyTarget { query_id: String },
    #[error("candidate {0:?} tokenizes to nothing")]
    EmptyCandidate(String),
    #[error("constraint list is empty")]
    EmptyTrie,
    #[error("index row {passage_id} has no passage text")]
    MissingPassage { passage_id: String },
    #[error("no training instances")]
    NoInstances,
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Dense(#[from] crate::dense::DenseError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Generator parameters: token embeddings G, context projection W_c,
/// prefix projection W_p, output matrix U, and a scalar copy bonus
/// added to the logit of every token present in the input sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub vocab_size: usize,
    pub d: usize,
    pub g: Vec<f64>,
    pub w_c: Vec<f64>,
    pub w_p: Vec<f64>,
    pub u: Vec<f64>,
    pub beta: f64,
}

impl GeneratorParams {
    pub fn zeros(vocab_size: usize, d: usize) -> GeneratorParams {
        assert!(d >= 1, "d must be >= 1");
        GeneratorParams {
            vocab_size,
            d,
            g: vec![0.0; vocab_size * d],
            w_c: vec![0.0; d * d],
            w_p: vec![0.0; d * d],
            u: vec![0.0; vocab_size * d],
            beta: 0.0,
        }
    }

    pub fn zeros_like(&self) -> GeneratorParams {
        GeneratorParams::zeros(self.vocab_size, self.d)
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.g,
            &self.w_c,
            &self.w_p,
            &self.u,
            std::slice::from_ref(&self.beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.g,
            &mut self.w_c,
            &mut self.w_p,
            &mut self.u,
            std::slice::from_mut(&mut self.beta),
        ]
    }

    fn g_row(&self, t: u32) -> &[f64] {
        &self.g[t as usize * self.d..(t as usize + 1) * self.d]
    }

    fn u_row(&self, t: usize) -> &[f64] {
        &self.u[t * self.d..(t + 1) * self.d]
    }

    pub fn validate(&self) -> Result<(), RagError> {
        let ok = self.g.len() == self.vocab_size * self.d
            && self.u.len() == self.vocab_size * self.d
            && self.w_c.len() == self.d * self.d
            && self.w_p.len() == self.d * self.d;
        assert!(ok, "generator parameter shapes inconsistent");
        for t in self.tensors() {
            for &x in t {
                if !x.is_finite() {
                    panic!("non-finite generator parameter");
                }
            }
        }
        Ok(())
    }
}

/// G and U uniform(-0.1, 0.1) from the seeded RNG, projections
/// identity, copy bonus zero.
pub fn init_generator(vocab_size: usize, d: usize, seed: u64) -> GeneratorParams {
    use rand::Rng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = GeneratorParams::zeros(vocab_size, d);
    for x in p.g.iter_mut() {
        *x = rng.random_range(-0.1..0.1);
    }
    for x in p.u.iter_mut() {
        *x = rng.random_range(-0.1..0.1);
    }
    for i in 0..d {
        p.w_c[i * d + i] = 1.0;
        p.w_p[i * d + i] = 1.0;
    }
    p
}

fn check_tokens(gen: &GeneratorParams, tokens: &[u32]) -> Result<(), RagError> {
    for &t in tokens {
        if t as usize >= gen.vocab_size {
            return Err(RagError::TokenOutOfRange {
                id: t,
                vocab: gen.vocab_size,
            });
        }
    }
    Ok(())
}

fn mean_rows(gen: &GeneratorParams, tokens: &[u32]) -> Vec<f64> {
    let d = gen.d;
    let mut m = vec![0.0; d];
    for &t in tokens {
        let row = gen.g_row(t);
        for j in 0..d {
            m[j] += row[j];
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    m.iter_mut().for_each(|x| *x *= inv);
    m
}

fn mat_vec(w: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for r in 0..d {
        let row = &w[r * d..(r + 1) * d];
        out[r] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
    out
}

/// Forward internals kept for the backward pass.
struct GenForward {
    m_in: Vec<f64>,
    prefix_full: Vec<u32>,
    m_pre: Vec<f64>,
    h: Vec<f64>,
}

fn generator_forward(
    gen: &GeneratorParams,
    input_seq: &[u32],
    prefix: &[u32],
) -> Result<(Vec<f64>, GenForward), RagError> {
    if input_seq.is_empty() {
        return Err(RagError::EmptyInput);
    }
    check_tokens(gen, input_seq)?;
    check_tokens(gen, prefix)?;
    let d = gen.d;
    let m_in = mean_rows(gen, input_seq);
    let c = mat_vec(&gen.w_c, &m_in, d);
    let mut prefix_full = Vec::with_capacity(prefix.len() + 1);
    prefix_full.push(BOS_ID);
    prefix_full.extend_from_slice(prefix);
    let m_pre = mean_rows(gen, &prefix_full);
    let r = mat_vec(&gen.w_p, &m_pre, d);
    let h: Vec<f64> = c.iter().zip(&r).map(|(a, b)| a + b).collect();

    let mut logits = vec![0.0; gen.vocab_size];
    for (t, l) in logits.iter_mut().enumerate() {
        *l = gen.u_row(t).iter().zip(&h).map(|(a, b)| a * b).sum();
    }
    // The indicator is 0/1: one bonus per distinct input token id.
    let mut seen = vec![false; gen.vocab_size];
    for &t in input_seq {
        if !seen[t as usize] {
            seen[t as usize] = true;
            logits[t as usize] += gen.beta;
        }
    }
    Ok((
        logits,
        GenForward {
            m_in,
            prefix_full,
            m_pre,
            h,
        },
    ))
}

/// `c = W_c . mean(G[input]); h = c + W_p . mean(G[BOS ++ prefix]);
/// logits = U . h + beta . [token in input]`.
pub fn generator_logits(
    gen: &GeneratorParams,
    input_seq: &[u32],
    prefix: &[u32],
) -> Result<Vec<f64>, RagError> {
    Ok(generator_forward(gen, input_seq, prefix)?.0)
}

/// Accumulate d(loss)/d(gen params) for one step given
/// `dlogits = d(loss)/d(logits)`.
fn generator_backward(
    gen: &GeneratorParams,
    input_seq: &[u32],
    fwd: &GenForward,
    dlogits: &[f64],
    grads: &mut GeneratorParams,
) {
    let d = gen.d;
    debug_assert_eq!(dlogits.len(), gen.vocab_size);
    // dU[t] += dlogits[t] * h; dh = sum_t dlogits[t] * U[t];
    // dbeta += sum over distinct input tokens of dlogits[t].
    let mut dh = vec![0.0; d];
    for t in 0..gen.vocab_size {
        let dl = dlogits[t];
        if dl == 0.0 {
            continue;
        }
        let urow = gen.u_row(t);
        let gurow = &mut grads.u[t * d..(t + 1) * d];
        for j in 0..d {
            gurow[j] += dl * fwd.h[j];
            dh[j] += dl * urow[j];
        }
    }
    let mut seen = vec![false; gen.vocab_size];
    for &t in input_seq {
        if !seen[t as usize] {
            seen[t as usize] = true;
            grads.beta += dlogits[t as usize];
        }
    }
    // h = W_c m_in + W_p m_pre, so dh feeds both projections.
    for r in 0..d {
        let gwc = &mut grads.w_c[r * d..(r + 1) * d];
        let gwp = &mut grads.w_p[r * d..(r + 1) * d];
        for j in 0..d {
            gwc[j] += dh[r] * fwd.m_in[j];
            gwp[j] += dh[r] * fwd.m_pre[j];
        }
    }
    let mut dm_in = vec![0.0; d];
    let mut dm_pre = vec![0.0; d];
    for r in 0..d {
        let wc = &gen.w_c[r * d..(r + 1) * d];
        let wp = &gen.w_p[r * d..(r + 1) * d];
        for j in 0..d {
            dm_in[j] += wc[j] * dh[r];
            dm_pre[j] += wp[j] * dh[r];
        }
    }
    let inv_in = 1.0 / input_seq.len() as f64;
    for &t in input_seq {
        let row = &mut grads.g[t as usize * d..(t as usize + 1) * d];
        for j in 0..d {
            row[j] += dm_in[j] * inv_in;
        }
    }
    let inv_pre = 1.0 / fwd.prefix_full.len() as f64;
    for &t in &fwd.prefix_full {
        let row = &mut grads.g[t as usize * d..(t as usize + 1) * d];
        for j in 0..d {
            row[j] += dm_pre[j] * inv_pre;
        }
    }
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Mixture of per-passage next-token distributions, weighted by the
/// softmax of the retrieval scores. Valid distribution by construction.
pub fn marginal_next_token(z: &[f64], seq_logits: &[Vec<f64>]) -> Result<Vec<f64>, RagError> {
    if z.is_empty() {
        return Err(RagError::EmptyInput);
    }
    assert_eq!(z.len(), seq_logits.len());
    let lw = log_softmax(z);
    let v = seq_logits[0].len();
    let mut out = vec![0.0; v];
    for (j, logits) in seq_logits.iter().enumerate() {
        assert_eq!(logits.len(), v, "ragged seq_logits");
        let lp = log_softmax(logits);
        for t in 0..v {
            out[t] += (lw[j] + lp[t]).exp();
        }
    }
    debug_assert!({
        let s: f64 = out.iter().sum();
        (s - 1.0).abs() < 1e-9 && out.iter().all(|&p| p >= 0.0)
    });
    Ok(out)
}

/// Read-only serving bundle: the index plus passage texts, token
/// streams, and f64 passage vectors keyed by passage id.
pub struct RagServing<'a> {
    pub index: &'a ShardedIndex,
    pub ef_search: usize,
    tokens_of: HashMap<String, Vec<u32>>,
    vec_of: HashMap<String, Vec<f64>>,
}

impl<'a> RagServing<'a> {
    pub fn new(
        index: &'a ShardedIndex,
        passages: &[Passage],
        vocab: &Vocab,
        ef_search: usize,
    ) -> Result<RagServing<'a>, RagError> {
        let by_id: HashMap<&str, &Passage> =
            passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
        let mut tokens_of = HashMap::new();
        let mut vec_of = HashMap::new();
        for shard in &index.shards {
            for (i, id) in shard.matrix.ids.iter().enumerate() {
                let p = by_id.get(id.as_str()).ok_or_else(|| RagError::MissingPassage {
                    passage_id: id.clone(),
                })?;
                tokens_of.insert(id.clone(), vocab.tokenize(&p.indexed_text()));
                vec_of.insert(
                    id.clone(),
                    shard.matrix.row(i).iter().map(|&x| x as f64).collect(),
                );
            }
        }
        Ok(RagServing {
            index,
            ef_search,
            tokens_of,
            vec_of,
        })
    }

    pub fn passage_tokens(&self, id: &str) -> &[u32] {
        &self.tokens_of[id]
    }

    pub fn passage_vector(&self, id: &str) -> &[f64] {
        &self.vec_of[id]
    }

    /// Checked token/vector pair, for callers passing explicit
    /// evidence ids instead of retrieval output.
    pub fn passage_entry(&self, id: &str) -> Result<(&[u32], &[f64]), RagError> {
        match (self.tokens_of.get(id), self.vec_of.get(id)) {
            (Some(t), Some(v)) => Ok((t.as_slice(), v.as_slice())),
            _ => Err(RagError::MissingPassage {
                passage_id: id.to_string(),
            }),
        }
    }
}

/// The generator's conditioning sequence for one (passage, query)
/// pair: passage tokens, SEP, query tokens.
pub(crate) fn fused_input(passage_tokens: &[u32], query_tokens: &[u32]) -> Vec<u32> {
    let mut s = Vec::with_capacity(passage_tokens.len() + 1 + query_tokens.len());
    s.extend_from_slice(passage_tokens);
    s.push(crate::corpus::SEP_ID);
    s.extend_from_slice(query_tokens);
    s
}

/// Loss plus exact gradients for the query encoder and generator. The
/// context encoder and index contribute constants only.
pub struct RagLossOutput {
    pub loss: f64,
    pub retrieved: Vec<RetrievalResult>,
}

#[allow(clippy::too_many_arguments)]
fn rag_nll_inner(
    query_encoder: &EncoderParams,
    gen: &GeneratorParams,
    vocab: &Vocab,
    instance: &SlotInstance,
    serving: &RagServing,
    k: usize,
    mut grads: Option<(&mut EncoderParams, &mut GeneratorParams)>,
) -> Result<RagLossOutput, RagError> {
    assert!(k >= 1, "k must be >= 1");
    let query_tokens = vocab.tokenize(&render_query(&instance.subject, &instance.relation)?);
    let q = encode(query_encoder, &query_tokens)?;
    let hits = serving.index.search(&q, k, serving.ef_search.max(k))?;
    if hits.is_empty() {
        return Err(RagError::NoPassages {
            query_id: instance.query_id.clone(),
        });
    }

    let mut target = vocab.tokenize(&instance.answers[0]);
    if target.is_empty() {
        return Err(RagError::EmptyTarget {
            query_id: instance.query_id.clone(),
        });
    }
    target.push(EOS_ID);

    // z_j = q . p_j with p_j fixed; identical to the hit scores.
    let z: Vec<f64> = hits.iter().map(|h| h.score).collect();
    let lw = log_softmax(&z);
    let w: Vec<f64> = lw.iter().map(|&x| x.exp()).collect();
    let inputs: Vec<Vec<u32>> = hits
        .iter()
        .map(|h| fused_input(serving.passage_tokens(&h.passage_id), &query_tokens))
        .collect();

    let mut loss = 0.0;
    // dz accumulates over steps; folded into the query grad at the end.
    let mut dz = vec![0.0; hits.len()];

    for i in 0..target.len() {
        let prefix = &target[..i];
        let t_star = target[i] as usize;
        let mut fwd_all = Vec::with_capacity(hits.len());
        let mut lp_all = Vec::with_capacity(hits.len());
        for input in &inputs {
            let (logits, fwd) = generator_forward(gen, input, prefix)?;
            lp_all.push(log_softmax(&logits));
            fwd_all.push(fwd);
        }
        // P(t*) = sum_j w_j p_j[t*], accumulated from logs.
        let p_star: f64 = (0..hits.len()).map(|j| (lw[j] + lp_all[j][t_star]).exp()).sum();
        loss -= p_star.ln();

        if let Some((_, gen_grads)) = grads.as_mut() {
            for j in 0..hits.len() {
                // a_j = posterior weight of passage j for the correct
                // token; dlogits_j = a_j (softmax_j - onehot(t*)).
                let a_j = (lw[j] + lp_all[j][t_star]).exp() / p_star;
                dz[j] += w[j] - a_j;
                let mut dlogits: Vec<f64> =
                    lp_all[j].iter().map(|&lp| a_j * lp.exp()).collect();
                dlogits[t_star] -= a_j;
                generator_backward(gen, &inputs[j], &fwd_all[j], &dlogits, gen_grads);
            }
        }
    }

    if let Some((q_grads, _)) = grads.as_mut() {
        let d = query_encoder.d;
        let mut dq = vec![0.0; d];
        for (j, hit) in hits.iter().enumerate() {
            let p_j = serving.passage_vector(&hit.passage_id);
            for m in 0..d {
                dq[m] += dz[j] * p_j[m];
            }
        }
        encode_backward(query_encoder, &query_tokens, &dq, q_grads)?;
    }

    Ok(RagLossOutput {
        loss,
        retrieved: hits,
    })
}

/// Marginalized NLL of the teacher-forced target over the top-k
/// retrieved passages, with gradients accumulated into `q_grads` and
/// `gen_grads` only.
pub fn rag_nll_loss(
    query_encoder: &EncoderParams,
    gen: &GeneratorParams,
    vocab: &Vocab,
    instance: &SlotInstance,
    serving: &RagServing,
    k: usize,
    q_grads: &mut EncoderParams,
    gen_grads: &mut GeneratorParams,
) -> Result<RagLossOutput, RagError> {
    rag_nll_inner(
        query_encoder,
        gen,
        vocab,
        instance,
        serving,
        k,
        Some((q_grads, gen_grads)),
    )
}

/// Forward-only variant (evaluation, baselines).
pub fn rag_nll_forward(
    query_encoder: &EncoderParams,
    gen: &GeneratorParams,
    vocab: &Vocab,
    instance: &SlotInstance,
    serving: &RagServing,
    k: usize,
) -> Result<RagLossOutput, RagError> {
    rag_nll_inner(query_encoder, gen, vocab, instance, serving, k, None)
}

/// Per-epoch mean per-instance loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagTrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Train the query encoder and generator; the context encoder and the
/// serving index never change. Gradients average over the minibatch.
#[allow(clippy::too_many_arguments)]
pub fn train_rag(
    instances: &[SlotInstance],
    encoders: &EncoderPair,
    gen: &GeneratorParams,
    vocab: &Vocab,
    serving: &RagServing,
    k: usize,
    config: &TrainConfig,
) -> Result<(EncoderPair, GeneratorParams, RagTrainLog), RagError> {
    if instances.is_empty() {
        return Err(RagError::NoInstances);
    }
    config.validate()?;
    encoders.validate()?;
    gen.validate()?;

    let mut query = encoders.query_encoder.clone();
    let mut gen = gen.clone();
    let n = instances.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let shapes: Vec<usize> = query
        .tensors()
        .iter()
        .map(|t| t.len())
        .chain(gen.tensors().iter().map(|t| t.len()))
        .collect();
    let mut state = AdamState::new(&shapes);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut q_grads = query.zeros_like();
            let mut g_grads = gen.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let out = rag_nll_loss(
                    &query,
                    &gen,
                    vocab,
                    &instances[i],
                    serving,
                    k,
                    &mut q_grads,
                    &mut g_grads,
                )?;
                batch_loss += out.loss;
            }
            let inv = 1.0 / chunk.len() as f64;
            for t in q_grads.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= inv);
            }
            for t in g_grads.tensors_mut() {
                t.iter_mut().for_each(|x| *x *= inv);
            }
            epoch_loss += batch_loss * inv;

            let lr = lr_at(step, total_steps, config)?;
            let mut qp = query.tensors_mut();
            let mut gp = gen.tensors_mut();
            let mut all: Vec<&mut [f64]> = qp.iter_mut().map(|t| &mut **t).collect();
            all.extend(gp.iter_mut().map(|t| &mut **t));
            let qg = q_grads.tensors();
            let gg = g_grads.tensors();
            let grads: Vec<&[f64]> = qg.iter().chain(gg.iter()).copied().collect();
            optimizer_step(&mut all, &grads, &mut state, lr, config)?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }

    let pair = EncoderPair {
        query_encoder: query,
        context_encoder: encoders.context_encoder.clone(),
    };
    Ok((pair, gen, RagTrainLog { epoch_losses }))
}
