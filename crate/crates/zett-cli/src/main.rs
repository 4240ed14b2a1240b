mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use commands::*;
use config::{RunConfig, RunContext};

/// Zero-shot triplet extraction by template infilling: data preparation,
/// training, constrained decoding, evaluation, and calibration.
#[derive(Debug, Parser)]
#[command(name = "zett", version)]
struct Cli {
    /// JSON config file with flat dotted keys (e.g. {"train.epochs": 10});
    /// command-line flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory receiving resolved_config.json and manifest.json.
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,

    /// Worker thread cap (fallback: the ZETT_THREADS environment variable).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Master seed; every randomized step draws from named substreams of it.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Single,
    Multi,
    Entity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CliAveraging {
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Segment {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationToggle {
    NoVocabConstraint,
    Greedy,
    NoFilter,
}

impl AblationToggle {
    pub fn row_name(self) -> &'static str {
        match self {
            AblationToggle::NoVocabConstraint => "no_vocab_constraint",
            AblationToggle::Greedy => "greedy",
            AblationToggle::NoFilter => "no_filter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Top1,
    Random,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a relation inventory into disjoint train/validation/test folds.
    Split {
        /// Relation registry JSON.
        #[arg(long)]
        relations: PathBuf,
        /// Number of unseen test relations.
        #[arg(long)]
        m: usize,
        /// Number of validation relations.
        #[arg(long)]
        v: usize,
        /// Output fold file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the micro seq2seq on template-infilling pairs.
    Train {
        /// Training dataset JSONL.
        #[arg(long)]
        data: PathBuf,
        /// Relation registry JSON.
        #[arg(long)]
        relations: PathBuf,
        /// Checkpoint output path; the vocabulary lands at <out>.vocab.json.
        #[arg(long)]
        out: PathBuf,
        /// Optional fold file restricting training to its train relations.
        #[arg(long)]
        fold: Option<PathBuf>,
        /// How many of each relation's templates to expand per triplet.
        #[arg(long, default_value_t = 1)]
        templates_per_triplet: usize,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Minibatch size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Peak learning rate.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Extract triplets from contexts with a trained checkpoint.
    Extract {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Contexts to extract from (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Relation registry JSON.
        #[arg(long)]
        relations: PathBuf,
        /// Predictions output JSONL.
        #[arg(long)]
        out: PathBuf,
        /// Optional fold file restricting candidate relations.
        #[arg(long)]
        fold: Option<PathBuf>,
        /// Which fold segment supplies the candidates.
        #[arg(long, value_enum, default_value_t = Segment::Test)]
        segment: Segment,
        /// Prediction mode.
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        /// Beam width (conflicts with --greedy).
        #[arg(long, conflicts_with = "greedy")]
        beam: Option<usize>,
        /// Greedy decoding: follow the argmax token each step.
        #[arg(long)]
        greedy: bool,
        /// Relation-filter similarity threshold.
        #[arg(long)]
        delta: Option<f64>,
        /// Log-probability cutoff for multi-triplet prediction.
        #[arg(long)]
        multi_threshold: Option<f64>,
        /// Precomputed embedding table (JSON) instead of hashed bag of words.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score a prediction file (or a checkpoint, for entity mode) against gold.
    Eval {
        /// Gold dataset JSONL.
        #[arg(long)]
        gold: PathBuf,
        /// Relation registry JSON.
        #[arg(long)]
        relations: PathBuf,
        /// Predictions JSONL (single and multi modes).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// What to score.
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Averaging for multi mode.
        #[arg(long, value_enum, default_value_t = CliAveraging::Micro)]
        averaging: CliAveraging,
        /// Checkpoint (entity mode decodes with the gold relation's template).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Calibrate decision thresholds on validation data.
    #[command(subcommand)]
    Calibrate(CalibrateCmd),
    /// Evaluate ablated configurations against the full pipeline.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Single-triplet evaluation data JSONL.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        relations: PathBuf,
        #[arg(long)]
        fold: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Segment::Test)]
        segment: Segment,
        /// Toggle only the decoding vocabulary constraint off.
        #[arg(long, group = "toggle")]
        no_vocab_constraint: bool,
        /// Toggle only greedy decoding on.
        #[arg(long, group = "toggle")]
        greedy: bool,
        /// Toggle only the relation filter off.
        #[arg(long, group = "toggle")]
        no_filter: bool,
        /// Evaluate at most this many examples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Mine, select, or autogenerate relation templates.
    #[command(subcommand)]
    Templates(TemplatesCmd),
    /// Export annotation sheets, compute agreement, or fold labels back in.
    #[command(subcommand)]
    Humaneval(HumanevalCmd),
    /// Generate the synthetic corpus or run the zero-shot benchmark.
    #[command(subcommand)]
    Synthetic(SyntheticCmd),
}

#[derive(Debug, Subcommand)]
enum CalibrateCmd {
    /// Pick the relation-filter threshold maximizing single accuracy.
    Delta {
        #[arg(long)]
        ckpt: PathBuf,
        /// Validation data JSONL (single-triplet examples).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        relations: PathBuf,
        #[arg(long)]
        fold: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Segment::Validation)]
        segment: Segment,
        /// Candidate thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = vec![-1.0, 0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5])]
        grid: Vec<f64>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Pick the multi-triplet score cutoff maximizing validation F1.
    MultiThreshold {
        #[arg(long)]
        ckpt: PathBuf,
        /// Validation data JSONL (multi-triplet examples allowed).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        relations: PathBuf,
        #[arg(long)]
        fold: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Segment::Validation)]
        segment: Segment,
        /// Candidate cutoffs; defaults to the standard grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum TemplatesCmd {
    /// Mine templates from labeled contexts by splicing out entity spans.
    Mine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        relations: PathBuf,
        /// Relation to mine for.
        #[arg(long)]
        relation: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Optional template-set JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select one template from a candidate list.
    ParaphraseSelect {
        /// JSON array of candidate template strings.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::Top1)]
        policy: PolicyArg,
    },
    /// Generate templates with the model by infilling between entities.
    Autogen {
        #[arg(long)]
        ckpt: PathBuf,
        /// Labeled single-triplet examples JSONL.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        relations: PathBuf,
        #[arg(long)]
        relation: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// Longest generated connector span, in tokens.
        #[arg(long, default_value_t = 8)]
        max_span_tokens: usize,
        /// Training data to verify the labeled examples leaked nowhere.
        #[arg(long)]
        training: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum HumanevalCmd {
    /// Sample prediction records into an annotation CSV.
    Export {
        #[arg(long)]
        pred: PathBuf,
        /// Ranked rows exported per sampled context.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Number of contexts to sample.
        #[arg(long, default_value_t = 200)]
        contexts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cohen's kappa between the two annotator columns.
    Kappa {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Fold annotator agreement back into top-1 accuracy.
    Rescore {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        relations: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum SyntheticCmd {
    /// Generate the seeded synthetic corpus and its relation registry.
    Generate {
        /// Single-triplet examples per relation.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Fraction of single-triplet labels to corrupt.
        #[arg(long, default_value_t = 0.0)]
        mislabel: f64,
        #[arg(long)]
        out_data: PathBuf,
        #[arg(long)]
        out_relations: PathBuf,
    },
    /// Run the full zero-shot benchmark: generate, split, train, evaluate.
    Benchmark {
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Unseen test relations per fold.
        #[arg(long, default_value_t = 5)]
        m: usize,
        /// Validation relations per fold.
        #[arg(long, default_value_t = 5)]
        v: usize,
        /// One fold per seed.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.0)]
        mislabel: f64,
        /// Also run the 4-row ablation table per fold.
        #[arg(long)]
        ablations: bool,
        /// Full report JSON output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .or_else(|| std::env::var("ZETT_THREADS").ok().and_then(|s| s.parse().ok()));
    if let Some(n) = threads {
        if n > 0 {
            // Ignore the error when a pool already exists (e.g. under tests).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let name = command_name(&cli.command);
    let mut ctx = RunContext::new(name, cli.run_dir.clone())?;
    if let Some(path) = &cli.config {
        ctx.record_input(path)?;
    }

    match cli.command {
        Command::Split { relations, m, v, out } => {
            cmd_split(&SplitArgs { relations, m, v, out }, &cfg, &mut ctx)?
        }
        Command::Train {
            data,
            relations,
            out,
            fold,
            templates_per_triplet,
            epochs,
            batch_size,
            lr,
        } => {
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            if let Some(batch_size) = batch_size {
                cfg.train.batch_size = batch_size;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            cmd_train(
                &TrainArgs { data, relations, out, fold, templates_per_triplet },
                &cfg,
                &mut ctx,
            )?
        }
        Command::Extract {
            ckpt,
            data,
            relations,
            out,
            fold,
            segment,
            mode,
            beam,
            greedy,
            delta,
            multi_threshold,
            embeddings,
        } => cmd_extract(
            &ExtractArgs {
                ckpt,
                data,
                relations,
                out,
                fold,
                segment,
                mode,
                beam,
                greedy,
                delta,
                multi_threshold,
                embeddings,
            },
            &mut cfg,
            &mut ctx,
        )?,
        Command::Eval { gold, relations, pred, mode, averaging, ckpt } => cmd_eval(
            &EvalArgs { gold, relations, pred, mode, averaging, ckpt },
            &mut cfg,
            &mut ctx,
        )?,
        Command::Calibrate(CalibrateCmd::Delta {
            ckpt,
            data,
            relations,
            fold,
            segment,
            grid,
            embeddings,
        }) => cmd_calibrate_delta(
            &CalibrateDeltaArgs { ckpt, data, relations, fold, segment, grid, embeddings },
            &mut cfg,
            &mut ctx,
        )?,
        Command::Calibrate(CalibrateCmd::MultiThreshold {
            ckpt,
            data,
            relations,
            fold,
            segment,
            grid,
            embeddings,
        }) => cmd_calibrate_multi_threshold(
            &CalibrateMultiThresholdArgs { ckpt, data, relations, fold, segment, grid, embeddings },
            &mut cfg,
            &mut ctx,
        )?,
        Command::Ablate {
            ckpt,
            data,
            relations,
            fold,
            segment,
            no_vocab_constraint,
            greedy,
            no_filter,
            limit,
            embeddings,
        } => {
            let toggle = if no_vocab_constraint {
                Some(AblationToggle::NoVocabConstraint)
            } else if greedy {
                Some(AblationToggle::Greedy)
            } else if no_filter {
                Some(AblationToggle::NoFilter)
            } else {
                None
            };
            cmd_ablate(
                &AblateArgs { ckpt, data, relations, fold, segment, toggle, limit, embeddings },
                &mut cfg,
                &mut ctx,
            )?
        }
        Command::Templates(TemplatesCmd::Mine { data, relations, relation, top_k, out }) => {
            cmd_templates_mine(&TemplatesMineArgs { data, relations, relation, top_k, out }, &mut ctx)?
        }
        Command::Templates(TemplatesCmd::ParaphraseSelect { candidates, policy }) => {
            cmd_templates_paraphrase_select(
                &ParaphraseSelectArgs { candidates, policy },
                &cfg,
                &mut ctx,
            )?
        }
        Command::Templates(TemplatesCmd::Autogen {
            ckpt,
            data,
            relations,
            relation,
            beam,
            top_k,
            max_span_tokens,
            training,
            out,
        }) => cmd_templates_autogen(
            &TemplatesAutogenArgs {
                ckpt,
                data,
                relations,
                relation,
                beam,
                top_k,
                max_span_tokens,
                training,
                out,
            },
            &mut ctx,
        )?,
        Command::Humaneval(HumanevalCmd::Export { pred, k, contexts, out }) => {
            cmd_humaneval_export(&HumanevalExportArgs { pred, k, contexts, out }, &cfg, &mut ctx)?
        }
        Command::Humaneval(HumanevalCmd::Kappa { annotations }) => {
            cmd_humaneval_kappa(&HumanevalKappaArgs { annotations }, &mut ctx)?
        }
        Command::Humaneval(HumanevalCmd::Rescore { gold, relations, annotations }) => {
            cmd_humaneval_rescore(&HumanevalRescoreArgs { gold, relations, annotations }, &mut ctx)?
        }
        Command::Synthetic(SyntheticCmd::Generate { n, mislabel, out_data, out_relations }) => {
            cmd_synthetic_generate(
                &SyntheticGenerateArgs { n, mislabel, out_data, out_relations },
                &cfg,
                &mut ctx,
            )?
        }
        Command::Synthetic(SyntheticCmd::Benchmark { n, m, v, seeds, mislabel, ablations, out }) => {
            cmd_synthetic_benchmark(
                &SyntheticBenchmarkArgs { n, m, v, seeds, mislabel, ablations, out },
                &mut ctx,
            )?
        }
    }

    ctx.finish(&cfg)
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Split { .. } => "split",
        Command::Train { .. } => "train",
        Command::Extract { .. } => "extract",
        Command::Eval { .. } => "eval",
        Command::Calibrate(CalibrateCmd::Delta { .. }) => "calibrate delta",
        Command::Calibrate(CalibrateCmd::MultiThreshold { .. }) => "calibrate multi-threshold",
        Command::Ablate { .. } => "ablate",
        Command::Templates(TemplatesCmd::Mine { .. }) => "templates mine",
        Command::Templates(TemplatesCmd::ParaphraseSelect { .. }) => "templates paraphrase-select",
        Command::Templates(TemplatesCmd::Autogen { .. }) => "templates autogen",
        Command::Humaneval(HumanevalCmd::Export { .. }) => "humaneval export",
        Command::Humaneval(HumanevalCmd::Kappa { .. }) => "humaneval kappa",
        Command::Humaneval(HumanevalCmd::Rescore { .. }) => "humaneval rescore",
        Command::Synthetic(SyntheticCmd::Generate { .. }) => "synthetic generate",
        Command::Synthetic(SyntheticCmd::Benchmark { .. }) => "synthetic benchmark",
    }
}
