//! Dense passage vectors: storage, exact inner-product search, ANN
//! (HNSW), 8-bit scalar quantization, and sharded serving.
//!
//! Vectors are stored as `f32`; every score is accumulated in `f64`
//! on both the exact and approximate paths so oracle comparisons are
//! exact. `exact_search` is the ground truth all ANN paths are tested
//! against.

pub mod hnsw;
pub mod quant;
pub mod shard;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::corpus::{Passage, Vocab};
use crate::encoder::{encode, EncoderParams};
use crate::sparse::{sort_results, RetrievalResult};

pub use hnsw::{build_hnsw, hnsw_search, HnswIndex};
pub use quant::{dequantize, quantize, SQ8Matrix};
pub use shard::{AnnParams, IndexBuildConfig, Shard, ShardedIndex};

/// Counts every sharded-index build in this process; lets tests prove
/// a stage really constructed (or skipped) an index.
static INDEX_BUILDS: AtomicU64 = AtomicU64::new(0);

pub(crate) fn note_index_build() {
    INDEX_BUILDS.fetch_add(1, Ordering::Relaxed);
}

pub fn index_builds() -> u64 {
    INDEX_BUILDS.load(Ordering::Relaxed)
}

#[derive(Debug, thiserror::Error)]
pub enum DenseError {
    #[error("query has dimension {got}, index has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("matrix is empty")]
    EmptyMatrix,
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("passage {passage_id} tokenizes to nothing")]
    EmptyPassage { passage_id: String },
    #[error("k must be >= 1")]
    ZeroK,
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed index file {path}: {reason}")]
    Format { path: String, reason: String },
}

/// Row-major n×d matrix of passage vectors with aligned passage ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMatrix {
    pub d: usize,
    pub ids: Vec<String>,
    pub data: Vec<f32>,
}

impl VectorMatrix {
    pub fn new(d: usize) -> VectorMatrix {
        assert!(d >= 1, "d must be >= 1");
        VectorMatrix {
            d,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn push_row(&mut self, id: String, row: &[f64]) {
        assert_eq!(row.len(), self.d);
        self.ids.push(id);
        self.data.extend(row.iter().map(|&x| x as f32));
    }

    pub fn validate(&self) -> Result<(), DenseError> {
        if self.data.len() != self.ids.len() * self.d {
            return Err(DenseError::NonFinite {
                what: "matrix shape".into(),
            });
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(DenseError::NonFinite {
                what: "matrix values".into(),
            });
        }
        Ok(())
    }

    /// Inner product of an f64 query with row i, accumulated in f64.
    pub fn score(&self, q: &[f64], i: usize) -> f64 {
        score_row(q, self.row(i))
    }
}

pub(crate) fn score_row(q: &[f64], row: &[f32]) -> f64 {
    debug_assert_eq!(q.len(), row.len());
    q.iter().zip(row).map(|(&a, &b)| a * b as f64).sum()
}

/// Top-k rows by inner product, ties by passage_id asc. The oracle for
/// every approximate path.
pub fn exact_search(
    matrix: &VectorMatrix,
    q: &[f64],
    k: usize,
) -> Result<Vec<RetrievalResult>, DenseError> {
    if k < 1 {
        return Err(DenseError::ZeroK);
    }
    if q.len() != matrix.d {
        return Err(DenseError::DimMismatch {
            expected: matrix.d,
            got: q.len(),
        });
    }
    let mut hits: Vec<RetrievalResult> = (0..matrix.n())
        .map(|i| RetrievalResult {
            passage_id: matrix.ids[i].clone(),
            score: matrix.score(q, i),
        })
        .collect();
    sort_results(&mut hits);
    hits.truncate(k);
    Ok(hits)
}

/// Encode every passage with the context encoder. Rows are independent,
/// so the result is bit-identical for any worker count.
pub fn encode_corpus(
    params: &EncoderParams,
    vocab: &Vocab,
    passages: &[Passage],
    workers: usize,
) -> Result<VectorMatrix, DenseError> {
    assert!(workers >= 1, "workers must be >= 1");
    let d = params.d;
    let n = passages.len();
    let mut data = vec![0.0f32; n * d];
    let chunk_rows = n.div_ceil(workers.min(n.max(1)));

    let errors: Vec<Option<DenseError>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (ci, out_chunk) in data.chunks_mut(chunk_rows * d).enumerate() {
            let start = ci * chunk_rows;
            let slice = &passages[start..(start + chunk_rows).min(n)];
            handles.push(scope.spawn(move || -> Option<DenseError> {
                for (j, p) in slice.iter().enumerate() {
                    let ids = vocab.tokenize(&p.indexed_text());
                    if ids.is_empty() {
                        return Some(DenseError::EmptyPassage {
                            passage_id: p.passage_id.clone(),
                        });
                    }
                    match encode(params, &ids) {
                        Ok(v) => {
                            for (k2, &x) in v.iter().enumerate() {
                                out_chunk[j * d + k2] = x as f32;
                            }
                        }
                        Err(e) => return Some(e.into()),
                    }
                }
                None
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    if let Some(e) = errors.into_iter().flatten().next() {
        return Err(e);
    }

    let m = VectorMatrix {
        d,
        ids: passages.iter().map(|p| p.passage_id.clone()).collect(),
        data,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
pub(crate) fn random_unit_matrix(n: usize, d: usize, seed: u64) -> VectorMatrix {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut m = VectorMatrix::new(d);
    for i in 0..n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        m.push_row(format!("p{i:05}"), &v);
    }
    m
}
