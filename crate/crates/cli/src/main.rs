//! Pipeline driver. One subcommand per stage; every stage writes its
//! artifacts plus a manifest under the run directory, and refuses to
//! run when an upstream artifact is missing or stale.
//!
//! Exit codes: 0 success, 2 validation or usage error, 3 broken stage
//! dependency.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use slotfill::pipeline::{
    self, load_config, BaselineScorer, EvalStyle, EvidenceMode, MineMode, PipelineError, RunConfig,
};
use slotfill::synth::SyntheticSpec;

#[derive(Parser)]
#[command(
    name = "slotfill",
    about = "Slot-filling pipeline: sparse/dense retrieval, generation, evaluation",
    version
)]
struct Cli {
    /// JSON config file mirroring the run configuration; flags override
    /// its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact and manifest.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Master seed; overrides the config seed and every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MineModeArg {
    Bm25,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvidenceArg {
    Retrieved,
    Gold,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Kilt,
    Ranking,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Pmi,
    Offset,
    Perplexity,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark files named in the config.
    Synth {
        /// JSON spec for the benchmark; defaults to the desk profile.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also generate a second domain with a disjoint lexicon
        /// ("_b"-suffixed files).
        #[arg(long)]
        pair: bool,
        /// Spec for the second domain; defaults to the first spec with
        /// seed+1.
        #[arg(long)]
        spec_b: Option<PathBuf>,
    },
    /// Split the corpus into passages and build the vocabulary.
    Segment {
        /// Extra corpus whose tokens join the vocabulary (for later
        /// adaptation) without contributing passages.
        #[arg(long)]
        extra_vocab: Option<PathBuf>,
    },
    /// Build the BM25 inverted index.
    BuildSparse,
    /// Mine one hard negative per training instance.
    MineNegatives {
        #[arg(long, value_enum, default_value_t = MineModeArg::Bm25)]
        mode: MineModeArg,
    },
    /// Train the bi-encoder retriever on mined triples.
    TrainDpr,
    /// Encode every passage with a checkpoint's context encoder.
    EncodeCorpus {
        #[arg(long, default_value = "dpr")]
        encoders: String,
    },
    /// Build the dense serving index over the encoded corpus.
    BuildIndex,
    /// Dense negative sampling: re-mine from the model's own index and
    /// train further.
    RunDns,
    /// Train the generator and query encoder against the frozen index.
    TrainRag {
        /// Starting retriever checkpoint: dpr or dns.
        #[arg(long, default_value = "dpr")]
        encoders: String,
    },
    /// Decode an answer for every dev instance.
    Predict {
        #[arg(long, default_value = "dpr_rag")]
        encoders: String,
        /// Generator checkpoint; defaults to the encoders name.
        #[arg(long)]
        generator: Option<String>,
        /// Candidate file (one answer per line) constraining decoding.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvidenceArg::Retrieved)]
        evidence: EvidenceArg,
    },
    /// Score predictions and write reports/metrics.json.
    Evaluate {
        #[arg(long, value_enum, default_value_t = StyleArg::Kilt)]
        style: StyleArg,
    },
    /// Training-free candidate ranking over co-occurring entities.
    Baseline {
        #[arg(long, value_enum)]
        scorer: ScorerArg,
        /// Embeddings for the offset scorer.
        #[arg(long, default_value = "dpr")]
        encoders: String,
        /// Generator for the perplexity scorer.
        #[arg(long, default_value = "init")]
        generator: String,
    },
    /// Serve a new corpus with the trained system, optionally after
    /// few-shot fine-tuning.
    Adapt {
        /// New-domain corpus to index.
        #[arg(long)]
        corpus: PathBuf,
        /// New-domain training instances (required when --few-shot > 0).
        #[arg(long)]
        train: Option<PathBuf>,
        /// New-domain dev instances to rank candidates for.
        #[arg(long)]
        dev: PathBuf,
        /// Candidate file for constrained ranking.
        #[arg(long)]
        candidates: PathBuf,
        /// Trained chain to adapt.
        #[arg(long, default_value = "dpr_rag")]
        encoders: String,
        /// Examples sampled per relation; 0 is a pure index swap.
        #[arg(long, default_value_t = 0)]
        few_shot: usize,
    },
}

fn read_spec(path: &Path) -> Result<SyntheticSpec, PipelineError> {
    let body = std::fs::read_to_string(path).map_err(|source| PipelineError::MissingInput {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|source| PipelineError::Parse {
        path: path.display().to_string(),
        source,
    })
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    let mut config: RunConfig = load_config(cli.config.as_deref())?;
    if let Some(dir) = cli.run_dir {
        config.run_dir = dir;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.dpr.seed = seed;
        config.rag.seed = seed;
        config.few_shot.seed = seed;
        config.dns.train.seed = seed;
    }

    match cli.command {
        Command::Synth { spec, pair, spec_b } => {
            let mut spec = match spec {
                Some(p) => read_spec(&p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let spec_b = match (pair, spec_b) {
                (_, Some(p)) => Some(read_spec(&p)?),
                (true, None) => Some(SyntheticSpec {
                    seed: spec.seed.wrapping_add(1),
                    ..spec.clone()
                }),
                (false, None) => None,
            };
            pipeline::stage_synth(&config, &spec, spec_b.as_ref())
        }
        Command::Segment { extra_vocab } => {
            pipeline::stage_segment(&config, extra_vocab.as_deref())
        }
        Command::BuildSparse => pipeline::stage_build_sparse(&config),
        Command::MineNegatives { mode } => {
            let mode = match mode {
                MineModeArg::Bm25 => MineMode::Bm25,
                MineModeArg::Dense => MineMode::Dense,
            };
            pipeline::stage_mine_negatives(&config, mode)
        }
        Command::TrainDpr => pipeline::stage_train_dpr(&config),
        Command::EncodeCorpus { encoders } => pipeline::stage_encode_corpus(&config, &encoders),
        Command::BuildIndex => pipeline::stage_build_index(&config),
        Command::RunDns => pipeline::stage_run_dns(&config),
        Command::TrainRag { encoders } => pipeline::stage_train_rag(&config, &encoders),
        Command::Predict {
            encoders,
            generator,
            candidates,
            evidence,
        } => {
            let generator = generator.unwrap_or_else(|| encoders.clone());
            let evidence = match evidence {
                EvidenceArg::Retrieved => EvidenceMode::Retrieved,
                EvidenceArg::Gold => EvidenceMode::Gold,
                EvidenceArg::Random => EvidenceMode::Random,
            };
            pipeline::stage_predict(
                &config,
                &encoders,
                &generator,
                candidates.as_deref(),
                evidence,
            )
        }
        Command::Evaluate { style } => {
            let style = match style {
                StyleArg::Kilt => EvalStyle::Kilt,
                StyleArg::Ranking => EvalStyle::Ranking,
            };
            pipeline::stage_evaluate(&config, style)
        }
        Command::Baseline {
            scorer,
            encoders,
            generator,
        } => {
            let scorer = match scorer {
                ScorerArg::Pmi => BaselineScorer::Pmi,
                ScorerArg::Offset => BaselineScorer::Offset,
                ScorerArg::Perplexity => BaselineScorer::Perplexity,
            };
            pipeline::stage_baseline(&config, scorer, &encoders, &generator)
        }
        Command::Adapt {
            corpus,
            train,
            dev,
            candidates,
            encoders,
            few_shot,
        } => {
            // The train path is only read when few_shot > 0.
            let train = match (few_shot, train) {
                (0, t) => t.unwrap_or_default(),
                (_, Some(t)) => t,
                (_, None) => {
                    return Err(PipelineError::BadConfig(
                        "--few-shot > 0 requires --train".to_string(),
                    ))
                }
            };
            pipeline::stage_adapt(
                &config,
                &corpus,
                &train,
                &dev,
                &candidates,
                &encoders,
                few_shot,
            )
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
