//! Stage-oriented pipeline over a single run directory.
//!
//! Every stage reads artifacts, writes artifacts, and records a
//! manifest (input hashes, output hashes, config hash, timings) under
//! `manifests/`. Staleness is content-addressed: before running, a
//! stage re-hashes its dependencies and walks their manifests, so a
//! changed upstream file is reported as "rerun stage X" instead of
//! silently producing garbage. Same config + same seed + same inputs
//! reproduce every artifact byte for byte.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ckpt::{load_checkpoint, save_checkpoint, CkptError};
use crate::corpus::{
    read_jsonl, read_jsonl_corpus, read_jsonl_instances, render_query, segment_documents,
    write_jsonl, CooccurrenceIndex, CorpusError, Passage, PassageRecord, SlotInstance, Vocab,
};
use crate::dense::{
    encode_corpus, AnnParams, DenseError, IndexBuildConfig, ShardedIndex, VectorMatrix,
};
use crate::dns::{run_dns, DnsConfig, DnsError};
use crate::dpr::{train_dpr, DprError};
use crate::encoder::EncoderPair;
use crate::evalkit::{
    evaluate_slot_filling, mrr_hits, rank_candidates, EmbeddingTable, EvalError, MetricsReport,
    RankedPassage, RankingReport, Scorer,
};
use crate::optim::TrainConfig;
use crate::rag::{
    beam_search, beam_search_over, build_prefix_trie, init_generator, train_rag, BeamConfig,
    BeamOutput, GeneratorParams, RagError, RagServing,
};
use crate::sparse::{
    build_bm25_triples, select_positive, Bm25Index, DprTriple, MiningReport, SparseError,
    TripleRecord, DEFAULT_B, DEFAULT_K1,
};
use crate::synth::{generate_domain_pair, generate_synthetic_benchmark, SynthError, SyntheticSpec};
use crate::util::fnv1a_hex;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: String, stage: String },
    #[error("stale artifact {path}; rerun `{stage}`")]
    StaleArtifact { path: String, stage: String },
    #[error("invalid run config: {0}")]
    BadConfig(String),
    #[error("missing input file {path}: {source}")]
    MissingInput {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Dense(#[from] DenseError),
    #[error(transparent)]
    Dpr(#[from] DprError),
    #[error(transparent)]
    Dns(#[from] DnsError),
    #[error(transparent)]
    Rag(#[from] RagError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
}

impl PipelineError {
    /// Process exit code: 3 for broken stage dependencies, 2 for
    /// everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingArtifact { .. } | PipelineError::StaleArtifact { .. } => 3,
            _ => 2,
        }
    }
}

/// Whole-run configuration. Serialized as the CLI's JSON config file;
/// every field has a desk-scale default so an empty file is valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub corpus: PathBuf,
    pub train_instances: PathBuf,
    pub dev_instances: PathBuf,
    pub max_passage_tokens: usize,
    pub min_freq: usize,
    /// Encoder embedding width.
    pub d: usize,
    /// Generator hidden width.
    pub d_g: usize,
    pub dpr: TrainConfig,
    pub rag: TrainConfig,
    pub few_shot: TrainConfig,
    pub dns: DnsConfig,
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub shards: usize,
    pub quantize: bool,
    /// Passages marginalized over at train and predict time.
    pub k: usize,
    pub beam: usize,
    pub max_len: usize,
    /// Candidate pool inspected per query when mining negatives.
    pub pool_size: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        // Desk-scale rates. Contrastive stages stay tiny so rows of
        // tokens unseen in training keep their shared-init alignment,
        // which is what ranks passages for unseen subjects. Likelihood
        // stages run hot but with a large adam_epsilon: near-zero
        // gradient coordinates then get proportional (SGD-like) steps
        // instead of being sign-amplified to the full rate.
        let mut dpr = TrainConfig::retriever_default();
        dpr.batch_size = 16;
        dpr.learn_rate = 1e-5;
        dpr.epochs = 3;
        let mut rag = TrainConfig::generator_default();
        rag.batch_size = 16;
        rag.learn_rate = 2e-2;
        rag.adam_epsilon = 1e-3;
        rag.warmup_instances = 64;
        rag.epochs = 2;
        let mut few_shot = TrainConfig::few_shot_default();
        few_shot.learn_rate = 2e-2;
        few_shot.adam_epsilon = 1e-3;
        let mut dns = DnsConfig::default();
        dns.train.batch_size = 16;
        dns.train.learn_rate = 1e-5;
        dns.rounds = 2;
        dns.workers = 1;
        RunConfig {
            run_dir: PathBuf::from("run"),
            corpus: PathBuf::from("corpus.jsonl"),
            train_instances: PathBuf::from("train.jsonl"),
            dev_instances: PathBuf::from("dev.jsonl"),
            max_passage_tokens: 100,
            min_freq: 1,
            d: 64,
            d_g: 64,
            dpr,
            rag,
            few_shot,
            dns,
            m: 16,
            ef_construction: 200,
            ef_search: 128,
            shards: 2,
            quantize: false,
            k: 5,
            beam: 4,
            max_len: 8,
            pool_size: 20,
            workers: 1,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::BadConfig(m.into()));
        if self.max_passage_tokens == 0 {
            return bad("max_passage_tokens must be >= 1");
        }
        if self.d == 0 || self.d_g == 0 {
            return bad("d and d_g must be >= 1");
        }
        if self.m == 0 || self.ef_construction == 0 || self.ef_search == 0 {
            return bad("m, ef_construction, ef_search must be >= 1");
        }
        if self.shards == 0 || self.workers == 0 {
            return bad("shards and workers must be >= 1");
        }
        if self.k == 0 || self.beam == 0 || self.max_len == 0 || self.pool_size == 0 {
            return bad("k, beam, max_len, pool_size must be >= 1");
        }
        for (name, tc) in [
            ("dpr", &self.dpr),
            ("rag", &self.rag),
            ("few_shot", &self.few_shot),
            ("dns.train", &self.dns.train),
        ] {
            tc.validate()
                .map_err(|e| PipelineError::BadConfig(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    fn hash(&self) -> String {
        fnv1a_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Load a config file, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, PipelineError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let body = std::fs::read_to_string(path).map_err(|source| PipelineError::MissingInput {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|source| PipelineError::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// Fixed artifact layout under one run directory.
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> RunPaths {
        RunPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn join(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.join(&format!("manifests/{stage}.json"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.join(&format!("reports/{name}"))
    }
}

// Artifact keys: paths relative to the run directory, also used as
// manifest map keys.
const PASSAGES: &str = "passages.jsonl";
const VOCAB: &str = "vocab.json";
const SPARSE: &str = "sparse.json";
const VECTORS: &str = "index/vectors.bin";
const DENSE_IDX: &str = "index/dense.idx";
const ADAPT_PASSAGES: &str = "adapt/passages.jsonl";
const ADAPT_VECTORS: &str = "adapt/vectors.bin";
const ADAPT_IDX: &str = "index/adapt.idx";
const PREDICTIONS: &str = "reports/predictions.jsonl";
const METRICS: &str = "reports/metrics.json";

fn triples_key(mode: MineMode) -> &'static str {
    match mode {
        MineMode::Bm25 => "triples_bm25.jsonl",
        MineMode::Dense => "triples_dense.jsonl",
    }
}

fn encoders_key(name: &str) -> String {
    format!("checkpoints/encoders_{name}.ckpt")
}

fn generator_key(name: &str) -> String {
    format!("checkpoints/generator_{name}.ckpt")
}

/// Which stage writes an artifact key. `None` marks external inputs
/// (corpus, instance files, candidate lists), which have no manifest.
fn producer(key: &str) -> Option<String> {
    let fixed = match key {
        PASSAGES | VOCAB => "segment",
        SPARSE => "build-sparse",
        "triples_bm25.jsonl" => "mine-negatives-bm25",
        "triples_dense.jsonl" => "mine-negatives-dense",
        VECTORS => "encode-corpus",
        DENSE_IDX => "build-index",
        PREDICTIONS => "predict",
        METRICS => "evaluate",
        "checkpoints/encoders_init.ckpt"
        | "checkpoints/generator_init.ckpt"
        | "checkpoints/encoders_dpr.ckpt" => "train-dpr",
        "checkpoints/encoders_dns.ckpt" => "run-dns",
        "checkpoints/encoders_dpr_rag.ckpt" | "checkpoints/generator_dpr_rag.ckpt" => {
            "train-rag-dpr"
        }
        "checkpoints/encoders_dns_rag.ckpt" | "checkpoints/generator_dns_rag.ckpt" => {
            "train-rag-dns"
        }
        _ => return None,
    };
    Some(fixed.to_string())
}

/// One stage's provenance record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Dependency path -> content hash at stage start.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path -> content hash at stage end.
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u64>,
}

fn hash_file(path: &Path) -> Result<String, std::io::Error> {
    Ok(fnv1a_hex(&std::fs::read(path)?))
}

fn read_manifest(path: &Path) -> Result<Manifest, PipelineError> {
    let body = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|source| PipelineError::Parse {
        path: path.display().to_string(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let body = serde_json::to_string(value).expect("report serializes");
    std::fs::write(path, body).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let body = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|source| PipelineError::Parse {
        path: path.display().to_string(),
        source,
    })
}

/// Dependency verifier: hashes each requirement and, for pipeline
/// artifacts, re-checks the producing stage's recorded hashes all the
/// way up the chain.
struct DepCheck<'a> {
    paths: &'a RunPaths,
    verified_stages: BTreeSet<String>,
    /// Everything required so far, recorded into this stage's manifest.
    inputs: BTreeMap<String, String>,
}

impl<'a> DepCheck<'a> {
    fn new(paths: &'a RunPaths) -> DepCheck<'a> {
        DepCheck {
            paths,
            verified_stages: BTreeSet::new(),
            inputs: BTreeMap::new(),
        }
    }

    /// An input file outside the run directory. Keyed by its display
    /// path.
    fn external(&mut self, path: &Path) -> Result<(), PipelineError> {
        let key = path.display().to_string();
        let hash = hash_file(path).map_err(|source| PipelineError::MissingInput {
            path: key.clone(),
            source,
        })?;
        self.inputs.insert(key, hash);
        Ok(())
    }

    /// A run-directory artifact. Verifies content against the producing
    /// manifest, then the manifest's own inputs, recursively.
    fn artifact(&mut self, key: &str) -> Result<String, PipelineError> {
        let hash = self.check(key)?;
        self.inputs.insert(key.to_string(), hash.clone());
        Ok(hash)
    }

    fn check(&mut self, key: &str) -> Result<String, PipelineError> {
        let stage = producer(key);
        let full = match &stage {
            Some(_) => self.paths.join(key),
            None => PathBuf::from(key),
        };
        let Some(stage) = stage else {
            // Untracked input recorded by an upstream manifest.
            return hash_file(&full).map_err(|source| PipelineError::MissingInput {
                path: key.to_string(),
                source,
            });
        };
        let hash = hash_file(&full).map_err(|_| PipelineError::MissingArtifact {
            path: key.to_string(),
            stage: stage.clone(),
        })?;
        if self.verified_stages.insert(stage.clone()) {
            let manifest = read_manifest(&self.paths.manifest(&stage)).map_err(|_| {
                PipelineError::MissingArtifact {
                    path: key.to_string(),
                    stage: stage.clone(),
                }
            })?;
            match manifest.outputs.get(key) {
                Some(recorded) if *recorded == hash => {}
                _ => {
                    return Err(PipelineError::StaleArtifact {
                        path: key.to_string(),
                        stage,
                    })
                }
            }
            for (in_key, in_hash) in &manifest.inputs {
                if in_key.starts_with('<') {
                    continue;
                }
                let current = self.check(in_key)?;
                if current != *in_hash {
                    return Err(PipelineError::StaleArtifact {
                        path: in_key.clone(),
                        stage: stage.clone(),
                    });
                }
            }
        }
        Ok(hash)
    }
}

/// Writes the manifest once the stage's outputs are on disk.
struct StageRun<'a> {
    paths: &'a RunPaths,
    stage: String,
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl<'a> StageRun<'a> {
    fn begin(
        paths: &'a RunPaths,
        stage: &str,
        config: &RunConfig,
        deps: DepCheck,
    ) -> StageRun<'a> {
        StageRun {
            paths,
            stage: stage.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            inputs: deps.inputs,
            started: Instant::now(),
        }
    }

    fn finish(self, output_keys: &[String]) -> Result<(), PipelineError> {
        let mut outputs = BTreeMap::new();
        for key in output_keys {
            let full = self.paths.join(key);
            let hash = hash_file(&full).map_err(|source| PipelineError::Io {
                path: full.display().to_string(),
                source,
            })?;
            outputs.insert(key.clone(), hash);
        }
        let mut timings_ms = BTreeMap::new();
        timings_ms.insert("total".to_string(), self.started.elapsed().as_millis() as u64);
        let manifest = Manifest {
            stage: self.stage.clone(),
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            timings_ms,
        };
        write_json(&self.paths.manifest(&self.stage), &manifest)
    }
}

fn ensure_layout(paths: &RunPaths) -> Result<(), PipelineError> {
    for dir in ["checkpoints", "index", "reports", "manifests", "adapt"] {
        let full = paths.join(dir);
        std::fs::create_dir_all(&full).map_err(|source| PipelineError::Io {
            path: full.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

fn read_passage_records(paths: &RunPaths) -> Result<Vec<PassageRecord>, PipelineError> {
    Ok(read_jsonl(paths.join(PASSAGES))?)
}

fn split_records(records: Vec<PassageRecord>) -> (Vec<Passage>, Vec<Vec<String>>) {
    let mut passages = Vec::with_capacity(records.len());
    let mut annotations = Vec::with_capacity(records.len());
    for r in records {
        passages.push(r.passage);
        annotations.push(r.entities);
    }
    (passages, annotations)
}

fn read_vocab(paths: &RunPaths) -> Result<Vocab, PipelineError> {
    read_json(&paths.join(VOCAB))
}

fn load_encoders(
    paths: &RunPaths,
    vocab: &Vocab,
    name: &str,
) -> Result<EncoderPair, PipelineError> {
    Ok(load_checkpoint(
        &paths.join(&encoders_key(name)),
        &vocab.fingerprint(),
    )?)
}

fn load_generator(
    paths: &RunPaths,
    vocab: &Vocab,
    name: &str,
) -> Result<GeneratorParams, PipelineError> {
    Ok(load_checkpoint(
        &paths.join(&generator_key(name)),
        &vocab.fingerprint(),
    )?)
}

/// Sibling path with `_b` appended to the file stem, for the second
/// synthetic domain.
pub fn domain_b_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|s| format!(".{}", s.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_b{ext}"))
}

/// Candidate list path next to an instance file.
pub fn candidates_path(dev_instances: &Path, domain_b: bool) -> PathBuf {
    let name = if domain_b {
        "candidates_b.txt"
    } else {
        "candidates.txt"
    };
    dev_instances.with_file_name(name)
}

fn write_candidates(path: &Path, instances: &[&[SlotInstance]]) -> Result<(), PipelineError> {
    let mut all: BTreeSet<String> = BTreeSet::new();
    for set in instances {
        for inst in *set {
            all.extend(inst.answers.iter().cloned());
        }
    }
    let mut body = String::new();
    for c in all {
        body.push_str(&c);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_candidates(path: &Path) -> Result<Vec<String>, PipelineError> {
    let body = std::fs::read_to_string(path).map_err(|source| PipelineError::MissingInput {
        path: path.display().to_string(),
        source,
    })?;
    let cands: Vec<String> = body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if cands.is_empty() {
        return Err(PipelineError::BadConfig(format!(
            "candidate file {} is empty",
            path.display()
        )));
    }
    Ok(cands)
}

/// Generate the synthetic benchmark files named in the config, plus a
/// candidate list per domain. With `spec_b`, a second domain with a
/// fully disjoint lexicon lands next to the first ("_b" suffix).
pub fn stage_synth(
    config: &RunConfig,
    spec: &SyntheticSpec,
    spec_b: Option<&SyntheticSpec>,
) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let started = Instant::now();
    let mut summaries = Vec::new();
    let write_domain = |bench: &crate::synth::SyntheticBenchmark,
                        b: bool|
     -> Result<String, PipelineError> {
        let corpus = if b {
            domain_b_path(&config.corpus)
        } else {
            config.corpus.clone()
        };
        let train = if b {
            domain_b_path(&config.train_instances)
        } else {
            config.train_instances.clone()
        };
        let dev = if b {
            domain_b_path(&config.dev_instances)
        } else {
            config.dev_instances.clone()
        };
        write_jsonl(&corpus, &bench.documents)?;
        write_jsonl(&train, &bench.train)?;
        write_jsonl(&dev, &bench.dev)?;
        write_candidates(
            &candidates_path(&config.dev_instances, b),
            &[&bench.train, &bench.dev],
        )?;
        Ok(format!(
            "{}: {} documents, {} train, {} dev",
            corpus.display(),
            bench.documents.len(),
            bench.train.len(),
            bench.dev.len()
        ))
    };

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "<synthetic-spec>".to_string(),
        fnv1a_hex(serde_json::to_string(spec).expect("spec serializes").as_bytes()),
    );
    match spec_b {
        Some(sb) => {
            let (a, b) = generate_domain_pair(spec, sb)?;
            summaries.push(write_domain(&a, false)?);
            summaries.push(write_domain(&b, true)?);
            inputs.insert(
                "<synthetic-spec-b>".to_string(),
                fnv1a_hex(serde_json::to_string(sb).expect("spec serializes").as_bytes()),
            );
        }
        None => {
            let bench = generate_synthetic_benchmark(spec)?;
            summaries.push(write_domain(&bench, false)?);
        }
    }

    let mut timings_ms = BTreeMap::new();
    timings_ms.insert("total".to_string(), started.elapsed().as_millis() as u64);
    let manifest = Manifest {
        stage: "synth".to_string(),
        config_hash: config.hash(),
        seed: spec.seed,
        inputs,
        outputs: BTreeMap::new(),
        timings_ms,
    };
    write_json(&paths.manifest("synth"), &manifest)?;
    Ok(summaries.join("; "))
}

/// Segment the corpus into passages and build the vocabulary. An
/// `extra_vocab` corpus contributes tokens to the vocabulary without
/// contributing passages, so checkpoints trained here stay loadable
/// when the run later adapts to that corpus.
pub fn stage_segment(
    config: &RunConfig,
    extra_vocab: Option<&Path>,
) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.external(&config.corpus)?;
    if let Some(extra) = extra_vocab {
        deps.external(extra)?;
    }
    let run = StageRun::begin(&paths, "segment", config, deps);

    let docs = read_jsonl_corpus(&config.corpus)?;
    let passages = segment_documents(&docs, config.max_passage_tokens)?;
    let annotations = crate::corpus::passage_entities(&docs, &passages);
    let records: Vec<PassageRecord> = passages
        .iter()
        .zip(&annotations)
        .map(|(p, e)| PassageRecord {
            passage: p.clone(),
            entities: e.clone(),
        })
        .collect();
    write_jsonl(&paths.join(PASSAGES), &records)?;

    let vocab = match extra_vocab {
        Some(extra) => {
            let extra_docs = read_jsonl_corpus(extra)?;
            let extra_passages = segment_documents(&extra_docs, config.max_passage_tokens)?;
            let mut all = passages.clone();
            all.extend(extra_passages);
            Vocab::build(&all, config.min_freq)
        }
        None => Vocab::build(&passages, config.min_freq),
    };
    write_json(&paths.join(VOCAB), &vocab)?;

    run.finish(&[PASSAGES.to_string(), VOCAB.to_string()])?;
    Ok(format!(
        "{} passages, vocabulary of {} tokens",
        records.len(),
        vocab.size()
    ))
}

/// Build the BM25 inverted index over the segmented passages.
pub fn stage_build_sparse(config: &RunConfig) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    let run = StageRun::begin(&paths, "build-sparse", config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let index = Bm25Index::build(&passages, DEFAULT_K1, DEFAULT_B)?;
    write_json(&paths.join(SPARSE), &index)?;

    run.finish(&[SPARSE.to_string()])?;
    Ok(format!("indexed {} passages", index.n_passages()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MineMode {
    Bm25,
    Dense,
}

impl MineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MineMode::Bm25 => "bm25",
            MineMode::Dense => "dense",
        }
    }
}

fn triple_records(triples: &[DprTriple]) -> Vec<TripleRecord> {
    triples
        .iter()
        .map(|t| TripleRecord {
            query_id: t.instance.query_id.clone(),
            positive: t.positive.passage_id.clone(),
            negative: t.hard_negative.passage_id.clone(),
        })
        .collect()
}

/// Mine one hard negative per training instance, from BM25 rankings or
/// from a dense index freshly encoded with the trained retriever.
pub fn stage_mine_negatives(config: &RunConfig, mode: MineMode) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;
    let stage = format!("mine-negatives-{}", mode.as_str());

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    deps.external(&config.train_instances)?;
    match mode {
        MineMode::Bm25 => {
            deps.artifact(SPARSE)?;
        }
        MineMode::Dense => {
            deps.artifact(VOCAB)?;
            deps.artifact(&encoders_key("dpr"))?;
        }
    }
    let run = StageRun::begin(&paths, &stage, config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let instances = read_jsonl_instances(&config.train_instances)?;

    let (triples, report) = match mode {
        MineMode::Bm25 => {
            let index: Bm25Index = read_json(&paths.join(SPARSE))?;
            build_bm25_triples(&index, &passages, &instances, config.pool_size)
        }
        MineMode::Dense => {
            let vocab = read_vocab(&paths)?;
            let pair = load_encoders(&paths, &vocab, "dpr")?;
            let matrix = encode_corpus(&pair.context_encoder, &vocab, &passages, config.workers)?;
            let index = ShardedIndex::build(
                &matrix,
                &vocab.fingerprint(),
                &IndexBuildConfig {
                    shards: config.shards,
                    quantize: false,
                    ann: Some(AnnParams {
                        m: config.m,
                        ef_construction: config.ef_construction,
                    }),
                    seed: config.seed,
                },
            )?;
            let mut report = MiningReport::default();
            let mut triples = Vec::new();
            for inst in &instances {
                let Some(positive) = select_positive(&passages, inst) else {
                    report.dropped_no_positive += 1;
                    continue;
                };
                let negative = crate::dns::mine_dense_negative(
                    &index,
                    &pair.query_encoder,
                    &vocab,
                    &passages,
                    inst,
                    config.pool_size,
                    config.ef_search,
                )?;
                match negative {
                    Some(neg) => {
                        triples.push(DprTriple::new(inst.clone(), positive.clone(), neg.clone()));
                        report.mined += 1;
                    }
                    None => report.dropped_exhausted += 1,
                }
            }
            (triples, report)
        }
    };

    let key = triples_key(mode);
    write_jsonl(&paths.join(key), &triple_records(&triples))?;
    let report_key = format!("reports/mining_{}.json", mode.as_str());
    write_json(&paths.join(&report_key), &report)?;

    run.finish(&[key.to_string(), report_key])?;
    Ok(format!(
        "mined {} triples ({} instances dropped)",
        report.mined,
        instances.len() - report.mined
    ))
}

/// Rebuild full triples from the id-level records a mining stage wrote.
fn resolve_triples(
    records: &[TripleRecord],
    passages: &[Passage],
    instances: &[SlotInstance],
) -> Result<Vec<DprTriple>, PipelineError> {
    let by_id: HashMap<&str, &Passage> =
        passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
    let by_query: HashMap<&str, &SlotInstance> =
        instances.iter().map(|i| (i.query_id.as_str(), i)).collect();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let complain = |what: &str| {
            PipelineError::BadConfig(format!("triple for {} references {what}", r.query_id))
        };
        let inst = *by_query
            .get(r.query_id.as_str())
            .ok_or_else(|| complain("an unknown query id"))?;
        let pos = *by_id
            .get(r.positive.as_str())
            .ok_or_else(|| complain("an unknown positive passage"))?;
        let neg = *by_id
            .get(r.negative.as_str())
            .ok_or_else(|| complain("an unknown negative passage"))?;
        let pos_ok = pos
            .paragraph_ids
            .iter()
            .any(|p| inst.gold_provenance.contains(p));
        let neg_gold = neg
            .paragraph_ids
            .iter()
            .any(|p| inst.gold_provenance.contains(p));
        let neg_text = neg.text.to_lowercase();
        let neg_answer = inst
            .answers
            .iter()
            .any(|a| !a.is_empty() && neg_text.contains(&a.to_lowercase()));
        if !pos_ok || neg_gold || neg_answer {
            return Err(complain("a passage violating the triple invariants"));
        }
        out.push(DprTriple::new(inst.clone(), pos.clone(), neg.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Initialize both encoders and the generator (recorded as the `init`
/// checkpoints every chain shares), then train the retriever on the
/// BM25-mined triples.
pub fn stage_train_dpr(config: &RunConfig) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    deps.artifact(VOCAB)?;
    deps.artifact(triples_key(MineMode::Bm25))?;
    deps.external(&config.train_instances)?;
    let run = StageRun::begin(&paths, "train-dpr", config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let vocab = read_vocab(&paths)?;
    let instances = read_jsonl_instances(&config.train_instances)?;
    let records: Vec<TripleRecord> = read_jsonl(paths.join(triples_key(MineMode::Bm25)))?;
    let triples = resolve_triples(&records, &passages, &instances)?;

    let fingerprint = vocab.fingerprint();
    let init_pair = EncoderPair::init(vocab.size(), config.d, config.seed);
    save_checkpoint(&paths.join(&encoders_key("init")), &fingerprint, &init_pair)?;
    let init_gen = init_generator(vocab.size(), config.d_g, config.seed.wrapping_add(1));
    save_checkpoint(&paths.join(&generator_key("init")), &fingerprint, &init_gen)?;

    let (trained, epoch_losses) = train_dpr(&triples, &init_pair, &vocab, &config.dpr)?;
    save_checkpoint(&paths.join(&encoders_key("dpr")), &fingerprint, &trained)?;
    let report = TrainReport {
        epoch_losses: epoch_losses.clone(),
    };
    write_json(&paths.join("reports/train_dpr.json"), &report)?;

    run.finish(&[
        encoders_key("init"),
        generator_key("init"),
        encoders_key("dpr"),
        "reports/train_dpr.json".to_string(),
    ])?;
    Ok(format!(
        "trained on {} triples, epoch losses {:?}",
        triples.len(),
        epoch_losses
    ))
}

/// Dense negative sampling: starting from the BM25-trained retriever,
/// alternately rebuild a scratch index, mine negatives from it, and
/// train further.
pub fn stage_run_dns(config: &RunConfig) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    deps.artifact(VOCAB)?;
    deps.artifact(&encoders_key("dpr"))?;
    deps.external(&config.train_instances)?;
    let run = StageRun::begin(&paths, "run-dns", config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let vocab = read_vocab(&paths)?;
    let pair = load_encoders(&paths, &vocab, "dpr")?;
    let instances = read_jsonl_instances(&config.train_instances)?;

    let outcome = run_dns(&passages, &instances, &pair, &vocab, &config.dns)?;
    save_checkpoint(
        &paths.join(&encoders_key("dns")),
        &vocab.fingerprint(),
        &outcome.encoders,
    )?;
    write_json(&paths.join("reports/train_dns.json"), &outcome.rounds)?;

    run.finish(&[
        encoders_key("dns"),
        "reports/train_dns.json".to_string(),
    ])?;
    let last = outcome.rounds.last();
    Ok(format!(
        "{} rounds, last mined {}",
        outcome.rounds.len(),
        last.map(|r| r.mining.mined).unwrap_or(0)
    ))
}

/// Encode every passage with the named checkpoint's context encoder.
pub fn stage_encode_corpus(config: &RunConfig, encoders: &str) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    deps.artifact(VOCAB)?;
    deps.artifact(&encoders_key(encoders))?;
    let run = StageRun::begin(&paths, "encode-corpus", config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let vocab = read_vocab(&paths)?;
    let pair = load_encoders(&paths, &vocab, encoders)?;
    let matrix = encode_corpus(&pair.context_encoder, &vocab, &passages, config.workers)?;
    matrix.write_to(&paths.join(VECTORS))?;

    run.finish(&[VECTORS.to_string()])?;
    Ok(format!(
        "encoded {} passages at d={} with `{encoders}`",
        matrix.n(),
        matrix.d
    ))
}

/// Build the serving index over the encoded corpus.
pub fn stage_build_index(config: &RunConfig) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(VECTORS)?;
    deps.artifact(VOCAB)?;
    let run = StageRun::begin(&paths, "build-index", config, deps);

    let matrix = VectorMatrix::read_from(&paths.join(VECTORS))?;
    let vocab = read_vocab(&paths)?;
    let index = ShardedIndex::build(
        &matrix,
        &vocab.fingerprint(),
        &IndexBuildConfig {
            shards: config.shards,
            quantize: config.quantize,
            ann: Some(AnnParams {
                m: config.m,
                ef_construction: config.ef_construction,
            }),
            seed: config.seed,
        },
    )?;
    index.write_to(&paths.join(DENSE_IDX))?;

    run.finish(&[DENSE_IDX.to_string()])?;
    Ok(format!(
        "{} vectors in {} shards{}",
        matrix.n(),
        config.shards,
        if config.quantize { ", quantized" } else { "" }
    ))
}

/// Which checkpoint the last encode ran with, so stages that assume
/// index/encoder agreement can verify it.
fn encode_source(paths: &RunPaths) -> Result<String, PipelineError> {
    let manifest = read_manifest(&paths.manifest("encode-corpus"))?;
    manifest
        .inputs
        .keys()
        .find(|k| k.starts_with("checkpoints/encoders_"))
        .cloned()
        .ok_or_else(|| PipelineError::StaleArtifact {
            path: VECTORS.to_string(),
            stage: "encode-corpus".to_string(),
        })
}

/// The encoder set whose context encoder must have produced the index
/// for `name`'s frozen-context assumptions to hold.
fn base_of(name: &str) -> &str {
    name.strip_suffix("_rag").unwrap_or(name)
}

fn require_index_from(paths: &RunPaths, name: &str) -> Result<(), PipelineError> {
    let source = encode_source(paths)?;
    let ok = [encoders_key(base_of(name)), encoders_key(name)];
    if !ok.contains(&source) {
        return Err(PipelineError::StaleArtifact {
            path: VECTORS.to_string(),
            stage: "encode-corpus".to_string(),
        });
    }
    Ok(())
}

/// Train the generator and query encoder against the frozen corpus
/// index. `encoders` names the starting retriever (dpr or dns); outputs
/// get the `_rag` suffix.
pub fn stage_train_rag(config: &RunConfig, encoders: &str) -> Result<String, PipelineError> {
    config.validate()?;
    if encoders != "dpr" && encoders != "dns" {
        return Err(PipelineError::BadConfig(format!(
            "train-rag starts from `dpr` or `dns`, not `{encoders}`"
        )));
    }
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    deps.artifact(VOCAB)?;
    deps.artifact(&encoders_key(encoders))?;
    deps.artifact(&generator_key("init"))?;
    deps.artifact(VECTORS)?;
    deps.artifact(DENSE_IDX)?;
    deps.external(&config.train_instances)?;
    require_index_from(&paths, encoders)?;
    let run = StageRun::begin(&paths, &format!("train-rag-{encoders}"), config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let vocab = read_vocab(&paths)?;
    let pair = load_encoders(&paths, &vocab, encoders)?;
    let gen = load_generator(&paths, &vocab, "init")?;
    let instances = read_jsonl_instances(&config.train_instances)?;
    let index = ShardedIndex::read_from(&paths.join(DENSE_IDX))?;
    let serving = RagServing::new(&index, &passages, &vocab, config.ef_search)?;

    let (trained_pair, trained_gen, log) = train_rag(
        &instances,
        &pair,
        &gen,
        &vocab,
        &serving,
        config.k,
        &config.rag,
    )?;
    assert_eq!(
        trained_pair.context_encoder, pair.context_encoder,
        "context encoder must stay frozen"
    );

    let name = format!("{encoders}_rag");
    let fingerprint = vocab.fingerprint();
    save_checkpoint(&paths.join(&encoders_key(&name)), &fingerprint, &trained_pair)?;
    save_checkpoint(&paths.join(&generator_key(&name)), &fingerprint, &trained_gen)?;
    let report_key = format!("reports/train_rag_{encoders}.json");
    let report = TrainReport {
        epoch_losses: log.epoch_losses.clone(),
    };
    write_json(&paths.join(&report_key), &report)?;

    run.finish(&[encoders_key(&name), generator_key(&name), report_key])?;
    Ok(format!(
        "trained `{name}` on {} instances, epoch losses {:?}",
        instances.len(),
        log.epoch_losses
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvidenceMode {
    Retrieved,
    Gold,
    Random,
}

impl EvidenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceMode::Retrieved => "retrieved",
            EvidenceMode::Gold => "gold",
            EvidenceMode::Random => "random",
        }
    }
}

/// One decoded hypothesis. Rows for one query share the retrieval;
/// rank 0 is the system answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub query_id: String,
    pub rank: usize,
    pub answer: String,
    pub logprob: Option<f64>,
    pub provenance: Vec<String>,
    pub scores: Vec<f64>,
}

fn rows_for(query_id: &str, out: &BeamOutput, vocab: &Vocab) -> Vec<PredictionRow> {
    let provenance: Vec<String> = out.retrieved.iter().map(|h| h.passage_id.clone()).collect();
    let scores: Vec<f64> = out.retrieved.iter().map(|h| h.score).collect();
    if out.hypotheses.is_empty() {
        return vec![PredictionRow {
            query_id: query_id.to_string(),
            rank: 0,
            answer: String::new(),
            logprob: None,
            provenance,
            scores,
        }];
    }
    out.hypotheses
        .iter()
        .enumerate()
        .map(|(rank, h)| PredictionRow {
            query_id: query_id.to_string(),
            rank,
            answer: vocab.decode(&h.tokens),
            logprob: Some(h.logprob),
            provenance: provenance.clone(),
            scores: scores.clone(),
        })
        .collect()
}

/// Decode an answer for every dev instance. Evidence comes from
/// retrieval, from the gold provenance, or from a seeded random draw;
/// an optional candidate file constrains decoding to its lines.
pub fn stage_predict(
    config: &RunConfig,
    encoders: &str,
    generator: &str,
    candidates: Option<&Path>,
    evidence: EvidenceMode,
) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    deps.artifact(VOCAB)?;
    deps.artifact(DENSE_IDX)?;
    deps.artifact(&encoders_key(encoders))?;
    deps.artifact(&generator_key(generator))?;
    deps.external(&config.dev_instances)?;
    if let Some(c) = candidates {
        deps.external(c)?;
    }
    require_index_from(&paths, encoders)?;
    let run = StageRun::begin(&paths, "predict", config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let vocab = read_vocab(&paths)?;
    let pair = load_encoders(&paths, &vocab, encoders)?;
    let gen = load_generator(&paths, &vocab, generator)?;
    let instances = read_jsonl_instances(&config.dev_instances)?;
    let index = ShardedIndex::read_from(&paths.join(DENSE_IDX))?;
    let serving = RagServing::new(&index, &passages, &vocab, config.ef_search)?;

    let trie = match candidates {
        Some(path) => Some(build_prefix_trie(&read_candidates(path)?, &vocab)?),
        None => None,
    };
    let beam_cfg = BeamConfig {
        k: config.k,
        beam: config.beam,
        max_len: config.max_len,
    };
    let all_ids: Vec<String> = passages.iter().map(|p| p.passage_id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut rows: Vec<PredictionRow> = Vec::new();
    for inst in &instances {
        let query = render_query(&inst.subject, &inst.relation)?;
        let out = match evidence {
            EvidenceMode::Retrieved => beam_search(
                &pair.query_encoder,
                &gen,
                &vocab,
                &serving,
                &query,
                trie.as_ref(),
                &beam_cfg,
            )?,
            EvidenceMode::Gold => {
                let ids: Vec<String> = passages
                    .iter()
                    .filter(|p| inst.gold_provenance.iter().any(|g| p.covers(g)))
                    .map(|p| p.passage_id.clone())
                    .collect();
                if ids.is_empty() {
                    return Err(PipelineError::BadConfig(format!(
                        "no gold passage segmented for {}",
                        inst.query_id
                    )));
                }
                beam_search_over(
                    &pair.query_encoder,
                    &gen,
                    &vocab,
                    &serving,
                    &query,
                    &ids,
                    trie.as_ref(),
                    config.beam,
                    config.max_len,
                )?
            }
            EvidenceMode::Random => {
                let ids: Vec<String> = all_ids
                    .choose_multiple(&mut rng, config.k.min(all_ids.len()))
                    .cloned()
                    .collect();
                beam_search_over(
                    &pair.query_encoder,
                    &gen,
                    &vocab,
                    &serving,
                    &query,
                    &ids,
                    trie.as_ref(),
                    config.beam,
                    config.max_len,
                )?
            }
        };
        rows.extend(rows_for(&inst.query_id, &out, &vocab));
    }
    write_jsonl(&paths.join(PREDICTIONS), &rows)?;

    run.finish(&[PREDICTIONS.to_string()])?;
    Ok(format!(
        "{} rows for {} queries ({} evidence)",
        rows.len(),
        instances.len(),
        evidence.as_str()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStyle {
    Kilt,
    Ranking,
}

impl EvalStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalStyle::Kilt => "kilt",
            EvalStyle::Ranking => "ranking",
        }
    }
}

/// The final metrics artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "kebab-case")]
pub enum MetricsFile {
    Kilt { metrics: MetricsReport },
    Ranking { ranking: RankingReport },
}

/// Score predictions against the dev instances and write
/// `reports/metrics.json`.
pub fn stage_evaluate(config: &RunConfig, style: EvalStyle) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PREDICTIONS)?;
    deps.artifact(PASSAGES)?;
    deps.external(&config.dev_instances)?;
    let run = StageRun::begin(&paths, "evaluate", config, deps);

    let (passages, _) = split_records(read_passage_records(&paths)?);
    let instances = read_jsonl_instances(&config.dev_instances)?;
    let rows: Vec<PredictionRow> = read_jsonl(paths.join(PREDICTIONS))?;
    let mut by_query: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for row in &rows {
        by_query.entry(&row.query_id).or_default().push(row);
    }
    for rows in by_query.values_mut() {
        rows.sort_by_key(|r| r.rank);
    }

    let report = match style {
        EvalStyle::Kilt => {
            let by_id: HashMap<&str, &Passage> =
                passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
            let mut predictions = Vec::with_capacity(instances.len());
            let mut retrieved = Vec::with_capacity(instances.len());
            for inst in &instances {
                let first = by_query
                    .get(inst.query_id.as_str())
                    .and_then(|rows| rows.first().copied());
                predictions.push(first.map(|r| r.answer.clone()).unwrap_or_default());
                let mut ranked = Vec::new();
                for pid in first.map(|r| r.provenance.as_slice()).unwrap_or_default() {
                    let p = by_id.get(pid.as_str()).ok_or_else(|| {
                        PipelineError::BadConfig(format!(
                            "prediction provenance {pid} is not a corpus passage"
                        ))
                    })?;
                    ranked.push(RankedPassage::of(p));
                }
                retrieved.push(ranked);
            }
            let eval = evaluate_slot_filling(&instances, &predictions, &retrieved)?;
            MetricsFile::Kilt {
                metrics: eval.metrics,
            }
        }
        EvalStyle::Ranking => {
            let mut ranked = Vec::with_capacity(instances.len());
            let mut answers = Vec::with_capacity(instances.len());
            for inst in &instances {
                let list: Vec<String> = by_query
                    .get(inst.query_id.as_str())
                    .map(|rows| rows.iter().map(|r| r.answer.clone()).collect())
                    .unwrap_or_default();
                ranked.push(list);
                answers.push(inst.answers.clone());
            }
            MetricsFile::Ranking {
                ranking: mrr_hits(&ranked, &answers)?,
            }
        }
    };
    write_json(&paths.join(METRICS), &report)?;

    run.finish(&[METRICS.to_string()])?;
    Ok(match &report {
        MetricsFile::Kilt { metrics } => format!(
            "r_precision {:.4}, accuracy {:.4}, kilt_ac {:.4} over {} instances",
            metrics.r_precision, metrics.accuracy, metrics.kilt_ac, metrics.n_instances
        ),
        MetricsFile::Ranking { ranking } => format!(
            "mrr {:.4}, hit@1 {:.4} over {} instances",
            ranking.mrr, ranking.hit_at_1, ranking.n_instances
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineScorer {
    Pmi,
    Offset,
    Perplexity,
}

impl BaselineScorer {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineScorer::Pmi => "pmi",
            BaselineScorer::Offset => "offset",
            BaselineScorer::Perplexity => "perplexity",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub scorer: String,
    pub ranking: RankingReport,
    pub skipped_no_candidates: usize,
}

/// Rank co-occurring entities for each dev query with a training-free
/// scorer. Instances whose subject co-occurs with nothing score zero.
pub fn stage_baseline(
    config: &RunConfig,
    scorer: BaselineScorer,
    encoders: &str,
    generator: &str,
) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(PASSAGES)?;
    deps.external(&config.dev_instances)?;
    match scorer {
        BaselineScorer::Pmi => {}
        BaselineScorer::Offset => {
            deps.artifact(VOCAB)?;
            deps.artifact(&encoders_key(encoders))?;
        }
        BaselineScorer::Perplexity => {
            deps.artifact(VOCAB)?;
            deps.artifact(&generator_key(generator))?;
        }
    }
    let stage = format!("baseline-{}", scorer.as_str());
    let run = StageRun::begin(&paths, &stage, config, deps);

    let (passages, annotations) = split_records(read_passage_records(&paths)?);
    let instances = read_jsonl_instances(&config.dev_instances)?;
    let cooc = CooccurrenceIndex::build(&passages, &annotations);

    // Loaded lazily per scorer; the table borrows them.
    let vocab;
    let pair;
    let gen;
    let table;
    let scorer_impl = match scorer {
        BaselineScorer::Pmi => Scorer::Pmi(&cooc),
        BaselineScorer::Offset => {
            vocab = read_vocab(&paths)?;
            pair = load_encoders(&paths, &vocab, encoders)?;
            table = EmbeddingTable::new(&pair.context_encoder, &vocab);
            Scorer::Offset(&table)
        }
        BaselineScorer::Perplexity => {
            vocab = read_vocab(&paths)?;
            gen = load_generator(&paths, &vocab, generator)?;
            Scorer::Perplexity(&gen, &vocab)
        }
    };

    let mut ranked = Vec::with_capacity(instances.len());
    let mut answers = Vec::with_capacity(instances.len());
    let mut skipped = 0usize;
    for inst in &instances {
        let candidates = cooc.candidates(&inst.subject);
        if candidates.is_empty() {
            skipped += 1;
            ranked.push(Vec::new());
        } else {
            let scored = rank_candidates(&scorer_impl, &inst.subject, &inst.relation, &candidates)?;
            ranked.push(scored.into_iter().map(|(c, _)| c).collect());
        }
        answers.push(inst.answers.clone());
    }
    let report = BaselineReport {
        scorer: scorer.as_str().to_string(),
        ranking: mrr_hits(&ranked, &answers)?,
        skipped_no_candidates: skipped,
    };
    let report_key = format!("reports/baseline_{}.json", scorer.as_str());
    write_json(&paths.join(&report_key), &report)?;

    run.finish(&[report_key])?;
    Ok(format!(
        "{}: mrr {:.4}, hit@1 {:.4} ({} skipped)",
        scorer.as_str(),
        report.ranking.mrr,
        report.ranking.hit_at_1,
        skipped
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptReport {
    pub few_shot: usize,
    pub encoders: String,
    pub ranking: RankingReport,
}

/// Take `n` instances per relation, in file order per relation, chosen
/// by a seeded shuffle of each relation's indices.
fn sample_per_relation(
    instances: &[SlotInstance],
    n: usize,
    seed: u64,
) -> Vec<SlotInstance> {
    let mut by_relation: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_relation.entry(&inst.relation).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for idxs in by_relation.values() {
        let mut pool = idxs.clone();
        pool.shuffle(&mut rng);
        pool.truncate(n);
        pool.sort_unstable();
        out.extend(pool.into_iter().map(|i| instances[i].clone()));
    }
    out
}

/// Serve a new corpus with an already-trained system: segment and
/// encode it, build `index/adapt.idx`, optionally fine-tune on `n`
/// examples per relation, then rank the candidate list for every dev
/// query and report MRR/HIT@k.
#[allow(clippy::too_many_arguments)]
pub fn stage_adapt(
    config: &RunConfig,
    corpus: &Path,
    train: &Path,
    dev: &Path,
    candidates: &Path,
    encoders: &str,
    few_shot: usize,
) -> Result<String, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.run_dir);
    ensure_layout(&paths)?;

    let mut deps = DepCheck::new(&paths);
    deps.artifact(VOCAB)?;
    deps.artifact(&encoders_key(encoders))?;
    deps.artifact(&generator_key(encoders))?;
    deps.external(corpus)?;
    if few_shot > 0 {
        deps.external(train)?;
    }
    deps.external(dev)?;
    deps.external(candidates)?;
    let stage = format!("adapt-{few_shot}shot");
    let run = StageRun::begin(&paths, &stage, config, deps);

    let vocab = read_vocab(&paths)?;
    let mut pair = load_encoders(&paths, &vocab, encoders)?;
    let mut gen = load_generator(&paths, &vocab, encoders)?;

    let docs = read_jsonl_corpus(corpus)?;
    let passages = segment_documents(&docs, config.max_passage_tokens)?;
    let annotations = crate::corpus::passage_entities(&docs, &passages);
    let records: Vec<PassageRecord> = passages
        .iter()
        .zip(&annotations)
        .map(|(p, e)| PassageRecord {
            passage: p.clone(),
            entities: e.clone(),
        })
        .collect();
    write_jsonl(&paths.join(ADAPT_PASSAGES), &records)?;

    let matrix = encode_corpus(&pair.context_encoder, &vocab, &passages, config.workers)?;
    matrix.write_to(&paths.join(ADAPT_VECTORS))?;
    let index = ShardedIndex::build(
        &matrix,
        &vocab.fingerprint(),
        &IndexBuildConfig {
            shards: config.shards,
            quantize: config.quantize,
            ann: Some(AnnParams {
                m: config.m,
                ef_construction: config.ef_construction,
            }),
            seed: config.seed,
        },
    )?;
    index.write_to(&paths.join(ADAPT_IDX))?;
    let serving = RagServing::new(&index, &passages, &vocab, config.ef_search)?;

    let mut outputs = vec![
        ADAPT_PASSAGES.to_string(),
        ADAPT_VECTORS.to_string(),
        ADAPT_IDX.to_string(),
    ];
    if few_shot > 0 {
        let train_instances = read_jsonl_instances(train)?;
        let sample = sample_per_relation(&train_instances, few_shot, config.seed);
        if sample.is_empty() {
            return Err(PipelineError::BadConfig(
                "few-shot sample is empty".to_string(),
            ));
        }
        let (p2, g2, _log) = train_rag(
            &sample,
            &pair,
            &gen,
            &vocab,
            &serving,
            config.k,
            &config.few_shot,
        )?;
        pair = p2;
        gen = g2;
        let name = format!("adapt{few_shot}");
        let fingerprint = vocab.fingerprint();
        save_checkpoint(&paths.join(&encoders_key(&name)), &fingerprint, &pair)?;
        save_checkpoint(&paths.join(&generator_key(&name)), &fingerprint, &gen)?;
        outputs.push(encoders_key(&name));
        outputs.push(generator_key(&name));
    }

    let dev_instances = read_jsonl_instances(dev)?;
    let trie = build_prefix_trie(&read_candidates(candidates)?, &vocab)?;
    let beam_cfg = BeamConfig {
        k: config.k,
        beam: config.beam,
        max_len: config.max_len,
    };
    let mut rows: Vec<PredictionRow> = Vec::new();
    let mut ranked = Vec::with_capacity(dev_instances.len());
    let mut answers = Vec::with_capacity(dev_instances.len());
    for inst in &dev_instances {
        let query = render_query(&inst.subject, &inst.relation)?;
        let out = beam_search(
            &pair.query_encoder,
            &gen,
            &vocab,
            &serving,
            &query,
            Some(&trie),
            &beam_cfg,
        )?;
        let instance_rows = rows_for(&inst.query_id, &out, &vocab);
        ranked.push(
            out.hypotheses
                .iter()
                .map(|h| vocab.decode(&h.tokens))
                .collect(),
        );
        answers.push(inst.answers.clone());
        rows.extend(instance_rows);
    }
    let predictions_key = format!("reports/predictions_adapt_{few_shot}shot.jsonl");
    write_jsonl(&paths.join(&predictions_key), &rows)?;
    outputs.push(predictions_key);

    let report = AdaptReport {
        few_shot,
        encoders: encoders.to_string(),
        ranking: mrr_hits(&ranked, &answers)?,
    };
    let report_key = format!("reports/adapt_{few_shot}shot.json");
    write_json(&paths.join(&report_key), &report)?;
    outputs.push(report_key);

    run.finish(&outputs)?;
    Ok(format!(
        "{few_shot}-shot on {} queries: mrr {:.4}, hit@1 {:.4}",
        dev_instances.len(),
        report.ranking.mrr,
        report.ranking.hit_at_1
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.run_dir = dir.join("run");
        c.corpus = dir.join("corpus.jsonl");
        c.train_instances = dir.join("train.jsonl");
        c.dev_instances = dir.join("dev.jsonl");
        c.d = 12;
        c.d_g = 12;
        c.shards = 2;
        c.m = 6;
        c.ef_construction = 24;
        c.ef_search = 32;
        c.k = 3;
        c.beam = 3;
        c.max_len = 3;
        c.dpr.epochs = 1;
        c.dpr.batch_size = 4;
        c.rag.epochs = 1;
        c.rag.batch_size = 4;
        c.rag.warmup_instances = 0;
        c.dns.rounds = 1;
        c.dns.extra_epochs = 1;
        c.dns.train.batch_size = 4;
        c.dns.workers = 1;
        c
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_entities: 12,
            n_relations: 2,
            facts_per_entity: 1,
            objects_per_relation: 6,
            distractor_sentences: 1,
            vocab_noise: 8,
            train_fraction: 0.75,
            dev_fraction: 0.25,
            seed: 5,
        }
    }

    /// The whole standard chain on a tiny benchmark. Checks wiring, not
    /// quality.
    #[test]
    fn standard_chain_runs_end_to_end() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        stage_synth(&config, &tiny_spec(), None).unwrap();
        stage_segment(&config, None).unwrap();
        stage_build_sparse(&config).unwrap();
        stage_mine_negatives(&config, MineMode::Bm25).unwrap();
        stage_train_dpr(&config).unwrap();
        stage_run_dns(&config).unwrap();
        stage_mine_negatives(&config, MineMode::Dense).unwrap();
        stage_encode_corpus(&config, "dpr").unwrap();
        stage_build_index(&config).unwrap();
        stage_train_rag(&config, "dpr").unwrap();
        let cands = candidates_path(&config.dev_instances, false);
        stage_predict(&config, "dpr_rag", "dpr_rag", Some(&cands), EvidenceMode::Retrieved)
            .unwrap();
        stage_evaluate(&config, EvalStyle::Kilt).unwrap();

        let paths = RunPaths::new(&config.run_dir);
        let dev = read_jsonl_instances(&config.dev_instances).unwrap();
        let metrics: MetricsFile = read_json(&paths.join(METRICS)).unwrap();
        match metrics {
            MetricsFile::Kilt { metrics } => assert_eq!(metrics.n_instances, dev.len()),
            other => panic!("wrong style: {other:?}"),
        }

        // Constraint soundness: every decoded answer is a candidate line.
        let cand_set: BTreeSet<String> = read_candidates(&cands).unwrap().into_iter().collect();
        let rows: Vec<PredictionRow> = read_jsonl(paths.join(PREDICTIONS)).unwrap();
        assert!(!rows.is_empty());
        for row in &rows {
            assert!(
                cand_set.contains(&row.answer),
                "{} not in candidate file",
                row.answer
            );
        }

        stage_baseline(&config, BaselineScorer::Pmi, "dpr", "init").unwrap();
        let report: BaselineReport =
            read_json(&paths.report("baseline_pmi.json")).unwrap();
        assert_eq!(report.scorer, "pmi");
    }

    #[test]
    fn stages_demand_their_dependencies_in_order() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        stage_synth(&config, &tiny_spec(), None).unwrap();

        let err = stage_build_sparse(&config).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        match err {
            PipelineError::MissingArtifact { stage, .. } => assert_eq!(stage, "segment"),
            other => panic!("wrong error: {other}"),
        }

        stage_segment(&config, None).unwrap();
        let err = stage_train_dpr(&config).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        match err {
            PipelineError::MissingArtifact { stage, .. } => {
                assert_eq!(stage, "mine-negatives-bm25")
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn edited_upstream_artifact_reads_as_stale() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        stage_synth(&config, &tiny_spec(), None).unwrap();
        stage_segment(&config, None).unwrap();
        stage_build_sparse(&config).unwrap();

        // Tamper with passages.jsonl after build-sparse consumed it.
        let paths = RunPaths::new(&config.run_dir);
        let passages_path = paths.join(PASSAGES);
        let mut body = std::fs::read_to_string(&passages_path).unwrap();
        body.push('\n');
        std::fs::write(&passages_path, body).unwrap();

        let err = stage_mine_negatives(&config, MineMode::Bm25).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        match err {
            // The tampered file no longer matches segment's manifest.
            PipelineError::StaleArtifact { stage, .. } => assert_eq!(stage, "segment"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn rerunning_a_stage_reproduces_artifacts_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        stage_synth(&config, &tiny_spec(), None).unwrap();
        stage_segment(&config, None).unwrap();
        stage_build_sparse(&config).unwrap();
        stage_mine_negatives(&config, MineMode::Bm25).unwrap();
        stage_train_dpr(&config).unwrap();

        let paths = RunPaths::new(&config.run_dir);
        let ckpt = paths.join(&encoders_key("dpr"));
        let sparse = paths.join(SPARSE);
        let first_ckpt = std::fs::read(&ckpt).unwrap();
        let first_sparse = std::fs::read(&sparse).unwrap();
        std::fs::remove_file(&sparse).unwrap();

        stage_build_sparse(&config).unwrap();
        stage_train_dpr(&config).unwrap();
        assert_eq!(std::fs::read(&sparse).unwrap(), first_sparse);
        assert_eq!(std::fs::read(&ckpt).unwrap(), first_ckpt);
    }

    #[test]
    fn index_encoder_agreement_is_enforced() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        stage_synth(&config, &tiny_spec(), None).unwrap();
        stage_segment(&config, None).unwrap();
        stage_build_sparse(&config).unwrap();
        stage_mine_negatives(&config, MineMode::Bm25).unwrap();
        stage_train_dpr(&config).unwrap();
        stage_encode_corpus(&config, "init").unwrap();
        stage_build_index(&config).unwrap();

        // The index was encoded with `init`, so RAG training from `dpr`
        // must refuse to run.
        let err = stage_train_rag(&config, "dpr").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        match err {
            PipelineError::StaleArtifact { stage, .. } => assert_eq!(stage, "encode-corpus"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn gold_and_random_evidence_modes_run() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        stage_synth(&config, &tiny_spec(), None).unwrap();
        stage_segment(&config, None).unwrap();
        stage_build_sparse(&config).unwrap();
        stage_mine_negatives(&config, MineMode::Bm25).unwrap();
        stage_train_dpr(&config).unwrap();
        stage_encode_corpus(&config, "dpr").unwrap();
        stage_build_index(&config).unwrap();

        let cands = candidates_path(&config.dev_instances, false);
        for mode in [EvidenceMode::Gold, EvidenceMode::Random] {
            stage_predict(&config, "dpr", "init", Some(&cands), mode).unwrap();
            stage_evaluate(&config, EvalStyle::Ranking).unwrap();
        }
    }

    #[test]
    fn adapt_runs_zero_and_few_shot_on_a_second_domain() {
        let dir = TempDir::new().unwrap();
        let config = tiny_config(dir.path());
        let spec_b = SyntheticSpec {
            seed: 6,
            ..tiny_spec()
        };
        stage_synth(&config, &tiny_spec(), Some(&spec_b)).unwrap();
        stage_segment(&config, Some(&domain_b_path(&config.corpus))).unwrap();
        stage_build_sparse(&config).unwrap();
        stage_mine_negatives(&config, MineMode::Bm25).unwrap();
        stage_train_dpr(&config).unwrap();
        stage_encode_corpus(&config, "dpr").unwrap();
        stage_build_index(&config).unwrap();
        stage_train_rag(&config, "dpr").unwrap();

        let corpus_b = domain_b_path(&config.corpus);
        let train_b = domain_b_path(&config.train_instances);
        let dev_b = domain_b_path(&config.dev_instances);
        let cands_b = candidates_path(&config.dev_instances, true);
        for n in [0usize, 1] {
            stage_adapt(&config, &corpus_b, &train_b, &dev_b, &cands_b, "dpr_rag", n).unwrap();
        }
        let paths = RunPaths::new(&config.run_dir);
        let zero: AdaptReport = read_json(&paths.report("adapt_0shot.json")).unwrap();
        let one: AdaptReport = read_json(&paths.report("adapt_1shot.json")).unwrap();
        assert_eq!(zero.few_shot, 0);
        assert_eq!(one.few_shot, 1);
        assert!(zero.ranking.n_instances > 0);
    }

    #[test]
    fn config_round_trips_and_rejects_zeroes() {
        let config = RunConfig::default();
        let body = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&body).unwrap();
        assert_eq!(config, back);
        let empty: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(empty, config);

        let mut bad = config;
        bad.k = 0;
        assert!(matches!(bad.validate(), Err(PipelineError::BadConfig(_))));
    }

    #[test]
    fn domain_b_paths_keep_directories() {
        assert_eq!(
            domain_b_path(Path::new("/tmp/x/corpus.jsonl")),
            Path::new("/tmp/x/corpus_b.jsonl")
        );
        assert_eq!(
            candidates_path(Path::new("/tmp/x/dev.jsonl"), true),
            Path::new("/tmp/x/candidates_b.txt")
        );
    }
}
