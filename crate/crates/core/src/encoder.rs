//! Mean-pooled embedding-bag encoder with one affine projection.
//!
//! Forward: `v = W · mean(E[token_ids]) + bias`. The backward pass is
//! exact; gradients accumulate into a caller-owned buffer of the same
//! shape as the parameters so batches can sum in a fixed order.
//!
//! All tensors are flat row-major `Vec<f64>`.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("cannot encode an empty token sequence")]
    EmptyInput,
    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

/// One encoder: token embeddings E (|V|×d), projection W (d×d), bias (d).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub vocab_size: usize,
    pub d: usize,
    pub embed: Vec<f64>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EncoderParams {
    /// Zeroed parameters of the given shape; also the gradient buffer.
    pub fn zeros(vocab_size: usize, d: usize) -> EncoderParams {
        assert!(d >= 1, "d must be >= 1");
        EncoderParams {
            vocab_size,
            d,
            embed: vec![0.0; vocab_size * d],
            w: vec![0.0; d * d],
            bias: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> EncoderParams {
        EncoderParams::zeros(self.vocab_size, self.d)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed.len() != self.vocab_size * self.d
            || self.w.len() != self.d * self.d
            || self.bias.len() != self.d
        {
            return Err(EncoderError::NonFinite {
                what: "parameter shapes",
            });
        }
        for (what, t) in self.tensors_named() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(EncoderError::NonFinite { what });
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 3] {
        [&self.embed, &self.w, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.embed, &mut self.w, &mut self.bias]
    }

    fn tensors_named(&self) -> [(&'static str, &[f64]); 3] {
        [("embed", &self.embed), ("w", &self.w), ("bias", &self.bias)]
    }

    #[inline]
    pub fn embed_row(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.embed[t * self.d..(t + 1) * self.d]
    }
}

/// E ~ uniform(−0.1, 0.1) per seeded RNG, W = identity, bias = 0.
pub fn init_encoder(vocab_size: usize, d: usize, seed: u64) -> EncoderParams {
    use rand::{Rng, SeedableRng};
    assert!(d >= 1, "d must be >= 1");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = EncoderParams::zeros(vocab_size, d);
    for x in p.embed.iter_mut() {
        *x = rng.random_range(-0.1..0.1);
    }
    for i in 0..d {
        p.w[i * d + i] = 1.0;
    }
    p
}

/// `v = W · mean(E[token_ids]) + bias`.
pub fn encode(params: &EncoderParams, token_ids: &[u32]) -> Result<Vec<f64>, EncoderError> {
    let m = mean_embedding(params, token_ids)?;
    Ok(affine(params, &m))
}

fn mean_embedding(params: &EncoderParams, token_ids: &[u32]) -> Result<Vec<f64>, EncoderError> {
    if token_ids.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    let d = params.d;
    let mut m = vec![0.0; d];
    for &t in token_ids {
        if (t as usize) >= params.vocab_size {
            return Err(EncoderError::TokenOutOfRange {
                id: t,
                vocab: params.vocab_size,
            });
        }
        let row = params.embed_row(t);
        for j in 0..d {
            m[j] += row[j];
        }
    }
    let inv = 1.0 / token_ids.len() as f64;
    for x in m.iter_mut() {
        *x *= inv;
    }
    Ok(m)
}

fn affine(params: &EncoderParams, m: &[f64]) -> Vec<f64> {
    let d = params.d;
    let mut v = params.bias.clone();
    for r in 0..d {
        let row = &params.w[r * d..(r + 1) * d];
        let mut acc = 0.0;
        for c in 0..d {
            acc += row[c] * m[c];
        }
        v[r] += acc;
    }
    v
}

/// Accumulate d(loss)/d(params) into `grads`, given the upstream
/// gradient `g = d(loss)/d(v)` for this sequence. Repeated tokens
/// accumulate once per occurrence.
pub fn encode_backward(
    params: &EncoderParams,
    token_ids: &[u32],
    g: &[f64],
    grads: &mut EncoderParams,
) -> Result<(), EncoderError> {
    let d = params.d;
    assert_eq!(g.len(), d);
    assert_eq!(grads.d, d);
    assert_eq!(grads.vocab_size, params.vocab_size);
    let m = mean_embedding(params, token_ids)?;
    // dW[r][c] += g[r] * m[c]; dbias += g.
    for r in 0..d {
        let row = &mut grads.w[r * d..(r + 1) * d];
        for c in 0..d {
            row[c] += g[r] * m[c];
        }
        grads.bias[r] += g[r];
    }
    // dm = Wᵀ g, then dE[t] += dm / n per occurrence.
    let mut dm = vec![0.0; d];
    for r in 0..d {
        let row = &params.w[r * d..(r + 1) * d];
        for c in 0..d {
            dm[c] += row[c] * g[r];
        }
    }
    let inv = 1.0 / token_ids.len() as f64;
    for &t in token_ids {
        let t = t as usize;
        let row = &mut grads.embed[t * d..(t + 1) * d];
        for c in 0..d {
            row[c] += dm[c] * inv;
        }
    }
    Ok(())
}

/// Query and context encoders. Both initialize from the SAME seed so a
/// token embeds identically on both sides until training moves them;
/// retrieval then works for tokens the trainer never saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub query_encoder: EncoderParams,
    pub context_encoder: EncoderParams,
}

impl EncoderPair {
    pub fn init(vocab_size: usize, d: usize, seed: u64) -> EncoderPair {
        EncoderPair {
            query_encoder: init_encoder(vocab_size, d, seed),
            context_encoder: init_encoder(vocab_size, d, seed),
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        self.query_encoder.validate()?;
        self.context_encoder.validate()?;
        assert_eq!(self.query_encoder.d, self.context_encoder.d);
        assert_eq!(self.query_encoder.vocab_size, self.context_encoder.vocab_size);
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tokenize with `vocab` and encode. Errors if the text yields no
/// tokens.
pub fn encode_text(
    params: &EncoderParams,
    vocab: &crate::corpus::Vocab,
    text: &str,
) -> Result<Vec<f64>, EncoderError> {
    encode(params, &vocab.tokenize(text))
}
