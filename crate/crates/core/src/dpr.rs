//! Contrastive bi-encoder training with in-batch negatives.
//!
//! For a batch of B triples the candidate pool for every query is all
//! 2B passage vectors: the B positives followed by the B hard
//! negatives. With scores `S[i][j] = q_i · c_j`,
//!
//! ```text
//! loss = -(1/B) * sum_i log softmax(S[i])[i]
//! ```
//!
//! Gradients are exact closed forms, not autodiff.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::corpus::{render_query, Vocab};
use crate::encoder::{encode, encode_backward, dot, EncoderError, EncoderPair};
use crate::optim::{lr_at, optimizer_step, AdamState, OptimError, TrainConfig};
use crate::sparse::DprTriple;

#[derive(Debug, thiserror::Error)]
pub enum DprError {
    #[error("no training triples")]
    NoTriples,
    #[error("non-finite input vector at row {row}")]
    NonFinite { row: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("query rendering failed: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Loss plus exact gradients w.r.t. the three input vector lists.
#[derive(Debug, Clone)]
pub struct DprLossOutput {
    pub loss: f64,
    pub d_q: Vec<Vec<f64>>,
    pub d_pos: Vec<Vec<f64>>,
    pub d_neg: Vec<Vec<f64>>,
}

/// In-batch softmax NLL over 2B candidates. Candidate j of query i is
/// `pos[j]` for j < B and `neg[j-B]` otherwise; the correct candidate
/// for query i is index i.
pub fn dpr_loss(
    q_vecs: &[Vec<f64>],
    pos_vecs: &[Vec<f64>],
    neg_vecs: &[Vec<f64>],
) -> Result<DprLossOutput, DprError> {
    let b = q_vecs.len();
    assert!(b >= 1, "batch must be non-empty");
    assert_eq!(pos_vecs.len(), b);
    assert_eq!(neg_vecs.len(), b);
    let d = q_vecs[0].len();
    for (row, v) in q_vecs.iter().chain(pos_vecs).chain(neg_vecs).enumerate() {
        assert_eq!(v.len(), d, "inconsistent vector width at row {row}");
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DprError::NonFinite { row });
        }
    }

    let cand = |j: usize| -> &[f64] {
        if j < b {
            &pos_vecs[j]
        } else {
            &neg_vecs[j - b]
        }
    };

    let mut loss = 0.0;
    let mut d_q = vec![vec![0.0; d]; b];
    let mut d_pos = vec![vec![0.0; d]; b];
    let mut d_neg = vec![vec![0.0; d]; b];
    let inv_b = 1.0 / b as f64;

    for i in 0..b {
        let scores: Vec<f64> = (0..2 * b).map(|j| dot(&q_vecs[i], cand(j))).collect();
        let jmax = (0..2 * b)
            .max_by(|&x, &y| scores[x].total_cmp(&scores[y]))
            .unwrap();
        let max = scores[jmax];
        // ln_1p over the non-max terms keeps the loss strictly positive
        // even when every margin is large.
        let rest: f64 = (0..2 * b)
            .filter(|&j| j != jmax)
            .map(|j| (scores[j] - max).exp())
            .sum();
        let log_z = max + rest.ln_1p();
        // (max - s_i) + ln1p(rest) rather than log_z - s_i: the tiny
        // ln1p term must not be absorbed into a large max.
        loss += inv_b * ((max - scores[i]) + rest.ln_1p());

        for j in 0..2 * b {
            // dL/dS[i][j] = (softmax_j - delta_ij) / B
            let p = (scores[j] - log_z).exp();
            let ds = inv_b * (p - if j == i { 1.0 } else { 0.0 });
            let c = cand(j);
            let dc = if j < b { &mut d_pos[j] } else { &mut d_neg[j - b] };
            for k in 0..d {
                d_q[i][k] += ds * c[k];
                dc[k] += ds * q_vecs[i][k];
            }
        }
    }

    Ok(DprLossOutput {
        loss,
        d_q,
        d_pos,
        d_neg,
    })
}

/// Pre-tokenized training triple.
struct TokenizedTriple {
    query: Vec<u32>,
    positive: Vec<u32>,
    negative: Vec<u32>,
}

fn tokenize_triples(triples: &[DprTriple], vocab: &Vocab) -> Result<Vec<TokenizedTriple>, DprError> {
    triples
        .iter()
        .map(|t| {
            let q = render_query(&t.instance.subject, &t.instance.relation)?;
            Ok(TokenizedTriple {
                query: vocab.tokenize(&q),
                positive: vocab.tokenize(&t.positive.indexed_text()),
                negative: vocab.tokenize(&t.hard_negative.indexed_text()),
            })
        })
        .collect()
}

/// Train both encoders on mined triples. Shuffles per epoch with the
/// config seed, runs one optimizer step per batch (final batch may be
/// partial), clips the gradient by its global norm over BOTH encoders,
/// and returns the trained pair with per-epoch mean batch loss.
pub fn train_dpr(
    triples: &[DprTriple],
    encoders: &EncoderPair,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<(EncoderPair, Vec<f64>), DprError> {
    if triples.is_empty() {
        return Err(DprError::NoTriples);
    }
    config.validate()?;
    encoders.validate()?;
    let tokenized = tokenize_triples(triples, vocab)?;

    let mut pair = encoders.clone();
    let n = tokenized.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let shapes: Vec<usize> = pair
        .query_encoder
        .tensors()
        .iter()
        .chain(pair.context_encoder.tensors().iter())
        .map(|t| t.len())
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
            let q_vecs: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| encode(&pair.query_encoder, &tokenized[i].query))
                .collect::<Result<_, _>>()?;
            let pos_vecs: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| encode(&pair.context_encoder, &tokenized[i].positive))
                .collect::<Result<_, _>>()?;
            let neg_vecs: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| encode(&pair.context_encoder, &tokenized[i].negative))
                .collect::<Result<_, _>>()?;

            let out = dpr_loss(&q_vecs, &pos_vecs, &neg_vecs)?;
            epoch_loss += out.loss;

            let mut q_grads = pair.query_encoder.zeros_like();
            let mut c_grads = pair.context_encoder.zeros_like();
            for (bi, &i) in chunk.iter().enumerate() {
                encode_backward(&pair.query_encoder, &tokenized[i].query, &out.d_q[bi], &mut q_grads)?;
                encode_backward(
                    &pair.context_encoder,
                    &tokenized[i].positive,
                    &out.d_pos[bi],
                    &mut c_grads,
                )?;
                encode_backward(
                    &pair.context_encoder,
                    &tokenized[i].negative,
                    &out.d_neg[bi],
                    &mut c_grads,
                )?;
            }

            let lr = lr_at(step, total_steps, config)?;
            let mut params = pair.query_encoder.tensors_mut();
            let mut cparams = pair.context_encoder.tensors_mut();
            let mut all: Vec<&mut [f64]> = params.iter_mut().map(|t| &mut **t).collect();
            all.extend(cparams.iter_mut().map(|t| &mut **t));
            let g = q_grads.tensors();
            let cg = c_grads.tensors();
            let grads: Vec<&[f64]> = g.iter().chain(cg.iter()).copied().collect();
            optimizer_step(&mut all, &grads, &mut state, lr, config)?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }

    Ok((pair, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, SlotInstance};
    use crate::corpus::Vocab;
    use rand::Rng;

    fn vecs(rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn two_way_closed_form() {
        // d=1: q=1, pos=2, neg=0 gives scores [2, 0].
        let out = dpr_loss(&vecs(&[&[1.0]]), &vecs(&[&[2.0]]), &vecs(&[&[0.0]])).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((out.loss - want).abs() < 1e-12, "{} vs {want}", out.loss);
    }

    #[test]
    fn symmetric_scores_give_ln2() {
        let out = dpr_loss(&vecs(&[&[1.0]]), &vecs(&[&[0.7]]), &vecs(&[&[0.7]])).unwrap();
        assert!((out.loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_positive_and_vanishing_when_separable() {
        // Margin 10: small but comfortably representable.
        let out = dpr_loss(&vecs(&[&[1.0]]), &vecs(&[&[10.0]]), &vecs(&[&[0.0]])).unwrap();
        assert!(out.loss > 0.0);
        assert!(out.loss < 1e-4);
        // Margin 40: ln1p keeps the loss positive where a naive
        // log-sum-exp would round it to zero.
        let out = dpr_loss(&vecs(&[&[1.0]]), &vecs(&[&[40.0]]), &vecs(&[&[0.0]])).unwrap();
        assert!(out.loss > 0.0);
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences_b2() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(314);
        let d = 3;
        let b = 2;
        let mut draw = |_: usize| -> Vec<Vec<f64>> {
            (0..b)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let q = draw(0);
        let pos = draw(1);
        let neg = draw(2);
        let out = dpr_loss(&q, &pos, &neg).unwrap();

        let eps = 1e-6;
        let check = |which: usize, analytic: &[Vec<f64>]| {
            for i in 0..b {
                for k in 0..d {
                    let mut hi = (q.clone(), pos.clone(), neg.clone());
                    let mut lo = (q.clone(), pos.clone(), neg.clone());
                    let (h, l) = match which {
                        0 => (&mut hi.0, &mut lo.0),
                        1 => (&mut hi.1, &mut lo.1),
                        _ => (&mut hi.2, &mut lo.2),
                    };
                    h[i][k] += eps;
                    l[i][k] -= eps;
                    let fh = dpr_loss(&hi.0, &hi.1, &hi.2).unwrap().loss;
                    let fl = dpr_loss(&lo.0, &lo.1, &lo.2).unwrap().loss;
                    let fd = (fh - fl) / (2.0 * eps);
                    let an = analytic[i][k];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        ((fd - an).abs() / denom) < 1e-6,
                        "which={which} i={i} k={k}: fd={fd} an={an}"
                    );
                }
            }
        };
        check(0, &out.d_q);
        check(1, &out.d_pos);
        check(2, &out.d_neg);
    }

    #[test]
    fn batch_permutation_leaves_loss_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let d = 4;
        let b = 3;
        let mut draw = || -> Vec<Vec<f64>> {
            (0..b)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let (q, pos, neg) = (draw(), draw(), draw());
        let base = dpr_loss(&q, &pos, &neg).unwrap().loss;
        let perm = [2usize, 0, 1];
        let apply = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { perm.iter().map(|&i| v[i].clone()).collect() };
        let permuted = dpr_loss(&apply(&q), &apply(&pos), &apply(&neg)).unwrap().loss;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let q = vecs(&[&[f64::NAN]]);
        assert!(dpr_loss(&q, &vecs(&[&[1.0]]), &vecs(&[&[0.0]])).is_err());
    }

    fn training_fixture() -> (Vec<DprTriple>, Vocab) {
        let pos = Passage {
            passage_id: "a:0".into(),
            doc_id: "a".into(),
            title: String::new(),
            text: "alpha works on retrieval".into(),
            paragraph_ids: vec![("a".into(), 0)],
        };
        let neg = Passage {
            passage_id: "b:0".into(),
            doc_id: "b".into(),
            title: String::new(),
            text: "gamma studies volcanoes".into(),
            paragraph_ids: vec![("b".into(), 0)],
        };
        let vocab = Vocab::build(&[pos.clone(), neg.clone()], 1);
        let inst = SlotInstance {
            query_id: "q0".into(),
            subject: "alpha".into(),
            relation: "field".into(),
            answers: vec!["retrieval".into()],
            gold_provenance: [("a".to_string(), 0usize)].into_iter().collect(),
        };
        (vec![DprTriple::new(inst, pos, neg)], vocab)
    }

    #[test]
    fn lr_zero_is_identity() {
        let (triples, vocab) = training_fixture();
        let pair = EncoderPair::init(vocab.size(), 8, 7);
        let mut cfg = TrainConfig::retriever_default();
        cfg.learn_rate = 0.0;
        cfg.batch_size = 1;
        let (trained, _) = train_dpr(&triples, &pair, &vocab, &cfg).unwrap();
        assert_eq!(trained, pair);
    }

    #[test]
    fn training_is_deterministic() {
        let (triples, vocab) = training_fixture();
        let pair = EncoderPair::init(vocab.size(), 8, 7);
        let mut cfg = TrainConfig::retriever_default();
        cfg.batch_size = 1;
        cfg.epochs = 3;
        cfg.learn_rate = 1e-3;
        let (a, la) = train_dpr(&triples, &pair, &vocab, &cfg).unwrap();
        let (b, lb) = train_dpr(&triples, &pair, &vocab, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn separable_triple_loss_strictly_decreases() {
        let (triples, vocab) = training_fixture();
        let pair = EncoderPair::init(vocab.size(), 8, 7);
        let mut cfg = TrainConfig::retriever_default();
        cfg.batch_size = 1;
        cfg.epochs = 10;
        cfg.learn_rate = 1e-3;
        cfg.schedule = crate::optim::Schedule::Linear;
        let (_, losses) = train_dpr(&triples, &pair, &vocab, &cfg).unwrap();
        assert_eq!(losses.len(), 10);
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "losses not strictly decreasing: {losses:?}");
        }
    }

    #[test]
    fn empty_triples_is_an_error() {
        let (_, vocab) = training_fixture();
        let pair = EncoderPair::init(vocab.size(), 4, 7);
        let cfg = TrainConfig::retriever_default();
        assert!(matches!(
            train_dpr(&[], &pair, &vocab, &cfg),
            Err(DprError::NoTriples)
        ));
    }
}
