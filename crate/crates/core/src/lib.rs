//! Desk-scale slot filling over a passage corpus.
//!
//! Given a corpus of documents and a set of `(subject, relation)` queries,
//! this crate builds the full retrieve-and-generate stack needed to predict
//! the missing object of each triple and to ground every prediction in
//! corpus provenance:
//!
//! * [`corpus`] segments documents into passages, builds the token
//!   vocabulary, and maintains an entity co-occurrence index.
//! * [`sparse`] is a keyword (BM25) index used both as a first-stage
//!   retriever and to mine hard negatives for contrastive training.
//! * [`encoder`], [`optim`], and [`dpr`] implement the bi-encoder: a pair of
//!   mean-pooling text encoders trained with an in-batch softmax
//!   contrastive loss and exact, finite-difference-checkable gradients.
//! * [`dense`] stores encoded passages, serves exact and graph-based
//!   approximate nearest neighbor search, 8-bit scalar quantization, and
//!   sharded query fan-out.
//! * [`dns`] re-mines negatives from the model's own dense index and
//!   continues contrastive training on them.
//! * [`rag`] marginalizes a small generator over retrieved passages,
//!   trains it jointly with the query encoder, and decodes answers with
//!   (optionally trie-constrained) beam search.
//! * [`evalkit`] scores predictions: provenance-gated slot-filling metrics
//!   and ranking metrics, plus co-occurrence, vector-offset, and
//!   perplexity baselines.
//! * [`synth`] generates seeded synthetic benchmarks, and [`pipeline`]
//!   chains everything into manifest-checked stages behind the CLI.
//!
//! All training paths use `f64`; index storage uses `f32`. Every stage is
//! deterministic given its seed.

pub mod ckpt;
pub mod corpus;
pub mod dense;
pub mod dns;
pub mod dpr;
pub mod encoder;
pub mod evalkit;
pub mod optim;
pub mod pipeline;
pub mod rag;
pub mod sparse;
pub mod synth;
pub mod util;
