//! Dense negative sampling: re-mine hard negatives from a temporary
//! dense index built with the current context encoder, then continue
//! contrastive training on them.
//!
//! Each round encodes the corpus, builds a throwaway index (never
//! quantized), mines one negative per instance under the same
//! exclusion rules as the keyword miner, trains for `extra_epochs`
//! with the original positives, and drops the index. The caller
//! re-encodes and re-indexes with the final context encoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_query, Passage, SlotInstance, Vocab};
use crate::dense::{encode_corpus, AnnParams, DenseError, IndexBuildConfig, ShardedIndex};
use crate::dpr::{train_dpr, DprError};
use crate::encoder::{encode_text, EncoderPair, EncoderParams};
use crate::optim::TrainConfig;
use crate::sparse::{first_surviving_negative, select_positive, DprTriple, MiningReport};

pub const DEFAULT_EXTRA_EPOCHS: usize = 2;
pub const DEFAULT_ROUNDS: usize = 1;
pub const DEFAULT_DNS_SHARDS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DnsError {
    #[error("invalid dns config: {0}")]
    BadConfig(String),
    #[error("no instance yielded a dense-negative triple")]
    NothingMined,
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error(transparent)]
    Train(#[from] DprError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnsConfig {
    pub extra_epochs: usize,
    pub pool_size: usize,
    pub rounds: usize,
    /// Temporary-index fan-out; the index itself is discarded.
    pub shards: usize,
    pub ef_search: usize,
    pub workers: usize,
    pub train: TrainConfig,
}

impl Default for DnsConfig {
    fn default() -> DnsConfig {
        DnsConfig {
            extra_epochs: DEFAULT_EXTRA_EPOCHS,
            pool_size: crate::sparse::DEFAULT_POOL_SIZE,
            rounds: DEFAULT_ROUNDS,
            shards: DEFAULT_DNS_SHARDS,
            ef_search: crate::dense::hnsw::DEFAULT_EF_SEARCH,
            workers: 4,
            train: TrainConfig::retriever_default(),
        }
    }
}

impl DnsConfig {
    pub fn validate(&self) -> Result<(), DnsError> {
        if self.extra_epochs < 1 {
            return Err(DnsError::BadConfig("extra_epochs must be >= 1".into()));
        }
        if self.rounds < 1 {
            return Err(DnsError::BadConfig("rounds must be >= 1".into()));
        }
        if self.pool_size < 1 {
            return Err(DnsError::BadConfig("pool_size must be >= 1".into()));
        }
        if self.shards < 1 {
            return Err(DnsError::BadConfig("shards must be >= 1".into()));
        }
        if self.workers < 1 {
            return Err(DnsError::BadConfig("workers must be >= 1".into()));
        }
        self.train
            .validate()
            .map_err(|e| DnsError::BadConfig(e.to_string()))
    }
}

/// Mine one dense negative: encode the query, take the top `pool_size`
/// index hits, and return the first hit that neither overlaps the gold
/// provenance nor contains an answer alias.
pub fn mine_dense_negative<'a>(
    index: &ShardedIndex,
    query_encoder: &EncoderParams,
    vocab: &Vocab,
    passages: &'a [Passage],
    instance: &SlotInstance,
    pool_size: usize,
    ef_search: usize,
) -> Result<Option<&'a Passage>, DnsError> {
    let mut report = MiningReport::default();
    mine_dense_negative_counted(
        index,
        query_encoder,
        vocab,
        passages,
        instance,
        pool_size,
        ef_search,
        &mut report,
    )
}

#[allow(clippy::too_many_arguments)]
fn mine_dense_negative_counted<'a>(
    index: &ShardedIndex,
    query_encoder: &EncoderParams,
    vocab: &Vocab,
    passages: &'a [Passage],
    instance: &SlotInstance,
    pool_size: usize,
    ef_search: usize,
    report: &mut MiningReport,
) -> Result<Option<&'a Passage>, DnsError> {
    let query = render_query(&instance.subject, &instance.relation)?;
    let q = encode_text(query_encoder, vocab, &query)?;
    let hits = index.search(&q, pool_size, ef_search.max(pool_size))?;
    let by_id: HashMap<&str, &Passage> =
        passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
    Ok(first_surviving_negative(instance, &hits, &by_id, report))
}

/// Per-round mining and training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsRoundReport {
    pub round: usize,
    #[serde(flatten)]
    pub mining: MiningReport,
    pub epoch_losses: Vec<f64>,
}

/// What `run_dns` hands back: the trained encoders, the last round's
/// triples for inspection, and per-round reports. The temporary index
/// never escapes this module.
#[derive(Debug, Clone)]
pub struct DnsOutcome {
    pub encoders: EncoderPair,
    pub triples: Vec<DprTriple>,
    pub rounds: Vec<DnsRoundReport>,
}

pub fn run_dns(
    passages: &[Passage],
    instances: &[SlotInstance],
    encoders: &EncoderPair,
    vocab: &Vocab,
    config: &DnsConfig,
) -> Result<DnsOutcome, DnsError> {
    config.validate()?;
    let mut pair = encoders.clone();
    let mut last_triples = Vec::new();
    let mut rounds = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        let matrix = encode_corpus(&pair.context_encoder, vocab, passages, config.workers)?;
        let temp_index = ShardedIndex::build(
            &matrix,
            &vocab.fingerprint(),
            &IndexBuildConfig {
                shards: config.shards,
                quantize: false,
                ann: Some(AnnParams::default()),
                seed: config.train.seed.wrapping_add(round as u64),
            },
        )?;

        let mut mining = MiningReport::default();
        let mut triples = Vec::new();
        for inst in instances {
            let Some(positive) = select_positive(passages, inst) else {
                mining.dropped_no_positive += 1;
                continue;
            };
            let negative = mine_dense_negative_counted(
                &temp_index,
                &pair.query_encoder,
                vocab,
                passages,
                inst,
                config.pool_size,
                config.ef_search,
                &mut mining,
            )?;
            match negative {
                Some(neg) => {
                    triples.push(DprTriple::new(inst.clone(), positive.clone(), neg.clone()));
                    mining.mined += 1;
                }
                None => mining.dropped_exhausted += 1,
            }
        }
        drop(temp_index);
        if triples.is_empty() {
            return Err(DnsError::NothingMined);
        }

        let mut train_cfg = config.train.clone();
        train_cfg.epochs = config.extra_epochs;
        train_cfg.seed = config.train.seed.wrapping_add(round as u64);
        let (trained, epoch_losses) = train_dpr(&triples, &pair, vocab, &train_cfg)?;
        pair = trained;

        rounds.push(DnsRoundReport {
            round,
            mining,
            epoch_losses,
        });
        last_triples = triples;
    }

    Ok(DnsOutcome {
        encoders: pair,
        triples: last_triples,
        rounds,
    })
}
