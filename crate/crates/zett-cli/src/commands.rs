use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde_json::{json, Value};
use zett_core::backend::{MicroBackend, ScoringBackend};
use zett_core::data::{load_dataset, save_dataset, split_folds, Dataset, FoldSpec, Registry, RelationSpec};
use zett_core::eval::{
    cohen_kappa_from_records, eval_entity, eval_multi, eval_single, export_human_eval,
    read_annotation_records, rescore_with_annotations, run_ablations, triplets_match, Averaging,
};
use zett_core::filter::{Embedder, HashedBowEmbedder, PrecomputedEmbedder, select_delta};
use zett_core::model::{
    load_checkpoint, save_checkpoint, train, CheckpointMeta, Seq2Seq, TrainReport,
};
use zett_core::pipeline::{
    calibrate_multi_threshold, default_threshold_grid, extract, predict_multi, predict_single,
    read_predictions, write_predictions, Mode, PredictionConfig, PredictionEntry,
    PredictionRecord,
};
use zett_core::synthetic::{
    benchmark, build_training_pairs, corpus_vocabulary, generate, BenchmarkConfig,
    SyntheticGrammar,
};
use zett_core::tgen::{
    autogen_templates, check_zero_leak, mine_templates, save_template_sets, select_paraphrase,
    LabeledExample, ParaphrasePolicy, TemplateSource,
};
use zett_core::tokenizer::Vocabulary;

use crate::config::{RunConfig, RunContext};
use crate::{AblationToggle, CliAveraging, CliMode, EvalMode, PolicyArg, Segment};

fn load_registry(path: &Path, ctx: &mut RunContext) -> Result<Registry> {
    ctx.record_input(path)?;
    Ok(Registry::load(path)?)
}

fn load_data(path: &Path, registry: &Registry, ctx: &mut RunContext) -> Result<Dataset> {
    ctx.record_input(path)?;
    Ok(load_dataset(path, registry)?)
}

fn vocab_path_for(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.vocab.json", ckpt.display()))
}

/// Loads a checkpoint together with its sibling vocabulary and refuses to
/// proceed when the vocabulary no longer matches the hash baked into the
/// checkpoint.
fn load_model(ckpt: &Path, ctx: &mut RunContext) -> Result<(Seq2Seq, CheckpointMeta, Vocabulary)> {
    ctx.record_input(ckpt)?;
    let (model, meta) = load_checkpoint(ckpt)?;
    let vpath = vocab_path_for(ckpt);
    ctx.record_input(&vpath)?;
    let vocab = Vocabulary::load(&vpath)?;
    ensure!(
        vocab.content_hash() == meta.vocab_hash,
        "vocabulary {} does not match the checkpoint (hash {} vs {})",
        vpath.display(),
        vocab.content_hash(),
        meta.vocab_hash
    );
    Ok((model, meta, vocab))
}

/// The decoder may emit at most one token fewer than the model's output
/// window; a larger requested budget would overflow the positional table
/// mid-search, so clamp it to what the checkpoint supports.
fn clamp_decode_budget(cfg: &mut RunConfig, model: &Seq2Seq) {
    let limit = model.config().max_output_len.saturating_sub(1);
    if cfg.predict.decode.max_output_len > limit {
        eprintln!(
            "warning: decode.max_output_len {} exceeds the checkpoint's output window; using {limit}",
            cfg.predict.decode.max_output_len
        );
        cfg.predict.decode.max_output_len = limit;
    }
}

/// Candidate relations for a run: the whole registry, or one fold segment.
fn candidate_relations(
    registry: &Registry,
    fold: Option<&Path>,
    segment: Segment,
    ctx: &mut RunContext,
) -> Result<Vec<RelationSpec>> {
    let specs: Vec<RelationSpec> = match fold {
        None => registry.relations().to_vec(),
        Some(path) => {
            ctx.record_input(path)?;
            let fold = FoldSpec::load(path)?;
            fold.validate()?;
            let keep = match segment {
                Segment::Train => fold.train_set(),
                Segment::Validation => fold.validation_set(),
                Segment::Test => fold.test_set(),
            };
            registry.relations().iter().filter(|r| keep.contains(&r.id)).cloned().collect()
        }
    };
    ensure!(!specs.is_empty(), "no candidate relations after fold restriction");
    Ok(specs)
}

fn make_embedder(dim: usize, precomputed: Option<&Path>, ctx: &mut RunContext) -> Result<Box<dyn Embedder>> {
    match precomputed {
        Some(path) => {
            ctx.record_input(path)?;
            Ok(Box::new(PrecomputedEmbedder::load(path)?))
        }
        None => Ok(Box::new(HashedBowEmbedder::new(dim)?)),
    }
}

fn print_json(value: &Value) {
    println!("{value:#}");
}

/// Top-1 accuracy of the full pipeline over single-triplet examples.
fn single_accuracy(
    backend: &dyn ScoringBackend,
    embedder: &dyn Embedder,
    vocab: &Vocabulary,
    ds: &Dataset,
    relations: &[RelationSpec],
    cfg: &PredictionConfig,
) -> Result<f64> {
    ensure!(!ds.examples.is_empty(), "empty evaluation set");
    let mut hits = 0usize;
    for ex in &ds.examples {
        ensure!(
            ex.triplets.len() == 1,
            "example {} must carry exactly one gold triplet for single-mode scoring",
            ex.id
        );
        let ranked = extract(backend, embedder, vocab, &ex.text, relations, cfg)?;
        if let Some(t) = predict_single(&ranked) {
            if triplets_match(t, &ex.triplets[0]) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / ds.examples.len() as f64)
}

pub struct SplitArgs {
    pub relations: PathBuf,
    pub m: usize,
    pub v: usize,
    pub out: PathBuf,
}

pub fn cmd_split(args: &SplitArgs, cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    let fold = split_folds(&registry.ids(), args.m, args.v, cfg.seed)?;
    fold.save(&args.out)?;
    ctx.record_output(&args.out)?;
    ctx.record_result("train_relations", json!(fold.train.len()));
    ctx.record_result("validation_relations", json!(fold.validation.len()));
    ctx.record_result("test_relations", json!(fold.test.len()));
    print_json(&json!({
        "out": args.out.display().to_string(),
        "train": fold.train.len(),
        "validation": fold.validation.len(),
        "test": fold.test.len(),
    }));
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub relations: PathBuf,
    pub out: PathBuf,
    pub fold: Option<PathBuf>,
    pub templates_per_triplet: usize,
}

pub fn cmd_train(args: &TrainArgs, cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    let dataset = load_data(&args.data, &registry, ctx)?;
    let dataset = match &args.fold {
        None => dataset,
        Some(path) => {
            ctx.record_input(path)?;
            let fold = FoldSpec::load(path)?;
            fold.validate()?;
            zett_core::data::project(&dataset, &fold.train_set())
        }
    };
    ensure!(!dataset.examples.is_empty(), "no training examples after fold restriction");

    let vocab = corpus_vocabulary(&dataset, &registry)?;
    let built = build_training_pairs(&dataset, &registry, &vocab, args.templates_per_triplet)?;
    if !built.skipped.is_empty() {
        eprintln!(
            "warning: skipped {} example(s) whose entities are not verbatim in the context",
            built.skipped.len()
        );
    }
    ensure!(!built.pairs.is_empty(), "no usable training pairs");

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.size();
    let mut model = Seq2Seq::new(model_cfg, cfg.seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let report: TrainReport = train(&mut model, &built.pairs, &train_cfg)?;

    let vpath = vocab_path_for(&args.out);
    vocab.save(&vpath)?;
    let meta = CheckpointMeta {
        vocab_hash: vocab.content_hash(),
        step: report.steps as u64,
        seed: cfg.seed,
    };
    save_checkpoint(&model, &meta, &args.out)?;
    ctx.record_output(&args.out)?;
    ctx.record_output(&vpath)?;
    ctx.record_result("steps", json!(report.steps));
    ctx.record_result("final_loss", json!(report.final_loss));
    print_json(&json!({
        "ckpt": args.out.display().to_string(),
        "vocab": vpath.display().to_string(),
        "pairs": built.pairs.len(),
        "steps": report.steps,
        "final_loss": report.final_loss,
    }));
    Ok(())
}

pub struct ExtractArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub relations: PathBuf,
    pub out: PathBuf,
    pub fold: Option<PathBuf>,
    pub segment: Segment,
    pub mode: Option<CliMode>,
    pub beam: Option<usize>,
    pub greedy: bool,
    pub delta: Option<f64>,
    pub multi_threshold: Option<f64>,
    pub embeddings: Option<PathBuf>,
}

/// Folds extract-specific flags into the prediction config.
fn apply_prediction_flags(
    cfg: &mut RunConfig,
    mode: Option<CliMode>,
    beam: Option<usize>,
    greedy: bool,
    delta: Option<f64>,
    multi_threshold: Option<f64>,
) {
    if let Some(mode) = mode {
        cfg.predict.mode = match mode {
            CliMode::Single => Mode::Single,
            CliMode::Multi => Mode::Multi,
        };
    }
    if let Some(beam) = beam {
        cfg.predict.decode.beam_size = beam;
        cfg.predict.decode.max_candidates = cfg.predict.decode.max_candidates.min(beam);
    }
    if greedy {
        cfg.predict.decode.greedy = true;
    }
    if let Some(delta) = delta {
        cfg.predict.filter.delta = delta;
    }
    if let Some(t) = multi_threshold {
        cfg.predict.multi_threshold = t;
    }
}

pub fn cmd_extract(args: &ExtractArgs, cfg: &mut RunConfig, ctx: &mut RunContext) -> Result<()> {
    apply_prediction_flags(cfg, args.mode, args.beam, args.greedy, args.delta, args.multi_threshold);
    cfg.predict.validate()?;

    let registry = load_registry(&args.relations, ctx)?;
    let dataset = load_data(&args.data, &registry, ctx)?;
    let relations = candidate_relations(&registry, args.fold.as_deref(), args.segment, ctx)?;
    let (model, _meta, vocab) = load_model(&args.ckpt, ctx)?;
    clamp_decode_budget(cfg, &model);
    let backend = MicroBackend::new(model);
    let embedder = make_embedder(cfg.embed_dim, args.embeddings.as_deref(), ctx)?;

    let mut records = Vec::with_capacity(dataset.len());
    for ex in &dataset.examples {
        let ranked = extract(&backend, embedder.as_ref(), &vocab, &ex.text, &relations, &cfg.predict)?;
        let record = match cfg.predict.mode {
            Mode::Single => PredictionRecord::from_ranked(&ex.id, &ranked),
            Mode::Multi => {
                let chosen = predict_multi(&ranked, cfg.predict.multi_threshold);
                let predictions = chosen
                    .iter()
                    .map(|t| {
                        let score = ranked
                            .iter()
                            .find(|c| &c.triplet == t)
                            .map(|c| c.score)
                            .unwrap_or(f64::NEG_INFINITY);
                        PredictionEntry {
                            head: t.head.clone(),
                            relation: t.relation.clone(),
                            tail: t.tail.clone(),
                            score,
                        }
                    })
                    .collect();
                PredictionRecord { id: ex.id.clone(), predictions }
            }
        };
        records.push(record);
    }

    let file = File::create(&args.out)
        .with_context(|| format!("creating prediction file {}", args.out.display()))?;
    write_predictions(BufWriter::new(file), &records)?;
    ctx.record_output(&args.out)?;
    ctx.record_result("examples", json!(records.len()));
    print_json(&json!({
        "out": args.out.display().to_string(),
        "examples": records.len(),
        "relations": relations.len(),
    }));
    Ok(())
}

pub struct EvalArgs {
    pub gold: PathBuf,
    pub relations: PathBuf,
    pub pred: Option<PathBuf>,
    pub mode: EvalMode,
    pub averaging: CliAveraging,
    pub ckpt: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs, cfg: &mut RunConfig, ctx: &mut RunContext) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    let gold = load_data(&args.gold, &registry, ctx)?;

    let report = match args.mode {
        EvalMode::Single | EvalMode::Multi => {
            let pred_path = args.pred.as_ref().context("--pred is required for this mode")?;
            ctx.record_input(pred_path)?;
            let predictions = read_predictions(pred_path)?;
            match args.mode {
                EvalMode::Single => {
                    let accuracy = eval_single(&gold, &predictions)?;
                    json!({ "mode": "single", "accuracy": accuracy })
                }
                _ => {
                    let averaging = match args.averaging {
                        CliAveraging::Micro => Averaging::Micro,
                        CliAveraging::Macro => Averaging::Macro,
                    };
                    let prf1 = eval_multi(&gold, &predictions, averaging)?;
                    json!({
                        "mode": "multi",
                        "averaging": match args.averaging { CliAveraging::Micro => "micro", CliAveraging::Macro => "macro" },
                        "precision": prf1.precision,
                        "recall": prf1.recall,
                        "f1": prf1.f1,
                    })
                }
            }
        }
        EvalMode::Entity => {
            let ckpt = args.ckpt.as_ref().context("--ckpt is required for entity mode")?;
            let (model, _meta, vocab) = load_model(ckpt, ctx)?;
            clamp_decode_budget(cfg, &model);
            let backend = MicroBackend::new(model);
            let accuracy =
                eval_entity(&backend, &vocab, &gold, registry.relations(), &cfg.predict.decode)?;
            json!({ "mode": "entity", "accuracy": accuracy })
        }
    };
    for (key, value) in report.as_object().into_iter().flatten() {
        ctx.record_result(key, value.clone());
    }
    print_json(&report);
    Ok(())
}

pub struct CalibrateDeltaArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub relations: PathBuf,
    pub fold: Option<PathBuf>,
    pub segment: Segment,
    pub grid: Vec<f64>,
    pub embeddings: Option<PathBuf>,
}

pub fn cmd_calibrate_delta(
    args: &CalibrateDeltaArgs,
    cfg: &mut RunConfig,
    ctx: &mut RunContext,
) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    let dataset = load_data(&args.data, &registry, ctx)?;
    let relations = candidate_relations(&registry, args.fold.as_deref(), args.segment, ctx)?;
    let (model, _meta, vocab) = load_model(&args.ckpt, ctx)?;
    clamp_decode_budget(cfg, &model);
    let backend = MicroBackend::new(model);
    let embedder = make_embedder(cfg.embed_dim, args.embeddings.as_deref(), ctx)?;

    let mut probe = cfg.predict.clone();
    probe.mode = Mode::Single;
    let (delta, accuracy) = select_delta(&args.grid, |d| {
        probe.filter.delta = d;
        single_accuracy(&backend, embedder.as_ref(), &vocab, &dataset, &relations, &probe)
            .map_err(|e| zett_core::ZettError::validation(e.to_string()))
    })?;
    ctx.record_result("delta", json!(delta));
    ctx.record_result("accuracy", json!(accuracy));
    print_json(&json!({ "delta": delta, "accuracy": accuracy }));
    Ok(())
}

pub struct CalibrateMultiThresholdArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub relations: PathBuf,
    pub fold: Option<PathBuf>,
    pub segment: Segment,
    pub grid: Option<Vec<f64>>,
    pub embeddings: Option<PathBuf>,
}

pub fn cmd_calibrate_multi_threshold(
    args: &CalibrateMultiThresholdArgs,
    cfg: &mut RunConfig,
    ctx: &mut RunContext,
) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    let dataset = load_data(&args.data, &registry, ctx)?;
    let relations = candidate_relations(&registry, args.fold.as_deref(), args.segment, ctx)?;
    let (model, _meta, vocab) = load_model(&args.ckpt, ctx)?;
    clamp_decode_budget(cfg, &model);
    let backend = MicroBackend::new(model);
    let embedder = make_embedder(cfg.embed_dim, args.embeddings.as_deref(), ctx)?;

    let grid = args.grid.clone().unwrap_or_else(default_threshold_grid);
    let (threshold, f1) = calibrate_multi_threshold(
        &backend,
        embedder.as_ref(),
        &vocab,
        &dataset,
        &relations,
        &cfg.predict,
        &grid,
    )?;
    ctx.record_result("multi_threshold", json!(threshold));
    ctx.record_result("f1", json!(f1));
    print_json(&json!({ "multi_threshold": threshold, "f1": f1 }));
    Ok(())
}

pub struct AblateArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub relations: PathBuf,
    pub fold: Option<PathBuf>,
    pub segment: Segment,
    pub toggle: Option<AblationToggle>,
    pub limit: Option<usize>,
    pub embeddings: Option<PathBuf>,
}

pub fn cmd_ablate(args: &AblateArgs, cfg: &mut RunConfig, ctx: &mut RunContext) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    let mut gold = load_data(&args.data, &registry, ctx)?;
    if let Some(limit) = args.limit {
        gold.examples.truncate(limit);
    }
    let relations = candidate_relations(&registry, args.fold.as_deref(), args.segment, ctx)?;
    let (model, _meta, vocab) = load_model(&args.ckpt, ctx)?;
    clamp_decode_budget(cfg, &model);
    let backend = MicroBackend::new(model);
    let embedder = make_embedder(cfg.embed_dim, args.embeddings.as_deref(), ctx)?;

    let mut base = cfg.predict.clone();
    base.mode = Mode::Single;
    let rows = match args.toggle {
        // One flag flips exactly one setting relative to the base config.
        Some(toggle) => {
            let (name, mut ablated) = (toggle.row_name(), base.clone());
            match toggle {
                AblationToggle::NoVocabConstraint => ablated.decode.constrain_vocab = false,
                AblationToggle::Greedy => ablated.decode.greedy = true,
                AblationToggle::NoFilter => {
                    ablated.filter.delta = -1.0;
                    ablated.filter.fallback_top1 = false;
                }
            }
            let accuracy =
                single_accuracy(&backend, embedder.as_ref(), &vocab, &gold, &relations, &ablated)?;
            vec![zett_core::eval::AblationRow { name: name.to_string(), accuracy }]
        }
        None => run_ablations(&backend, embedder.as_ref(), &vocab, &gold, &relations, &base)?,
    };
    ctx.record_result("rows", serde_json::to_value(&rows)?);
    print_json(&serde_json::to_value(&rows)?);
    Ok(())
}

pub struct TemplatesMineArgs {
    pub data: PathBuf,
    pub relations: PathBuf,
    pub relation: String,
    pub top_k: usize,
    pub out: Option<PathBuf>,
}

fn source_name(source: TemplateSource) -> &'static str {
    match source {
        TemplateSource::Mined => "mined",
        TemplateSource::Paraphrased => "paraphrased",
        TemplateSource::Autogen => "autogen",
    }
}

pub fn cmd_templates_mine(args: &TemplatesMineArgs, ctx: &mut RunContext) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    ensure!(registry.contains(&args.relation), "unknown relation {}", args.relation);
    let corpus = load_data(&args.data, &registry, ctx)?;
    let outcome = mine_templates(&corpus, &args.relation, args.top_k);
    ensure!(
        !outcome.candidates.is_empty(),
        "no template could be mined for relation {}",
        args.relation
    );
    if let Some(out) = &args.out {
        let mut sets = BTreeMap::new();
        sets.insert(
            args.relation.clone(),
            outcome.candidates.iter().map(|c| c.pattern.clone()).collect(),
        );
        save_template_sets(out, &sets)?;
        ctx.record_output(out)?;
    }
    let report = json!({
        "relation": args.relation,
        "candidates": outcome.candidates.iter().map(|c| json!({
            "pattern": c.pattern,
            "support": c.support,
            "source": source_name(c.source),
        })).collect::<Vec<_>>(),
        "skipped": outcome.skipped.iter().map(|(id, reason)| json!({
            "id": id, "reason": reason,
        })).collect::<Vec<_>>(),
    });
    ctx.record_result("candidates", json!(outcome.candidates.len()));
    print_json(&report);
    Ok(())
}

pub struct ParaphraseSelectArgs {
    pub candidates: PathBuf,
    pub policy: PolicyArg,
}

pub fn cmd_templates_paraphrase_select(
    args: &ParaphraseSelectArgs,
    cfg: &RunConfig,
    ctx: &mut RunContext,
) -> Result<()> {
    ctx.record_input(&args.candidates)?;
    let text = std::fs::read_to_string(&args.candidates)
        .with_context(|| format!("reading candidate file {}", args.candidates.display()))?;
    let candidates: Vec<String> = serde_json::from_str(&text)
        .with_context(|| "candidate file must be a JSON array of template strings")?;
    let policy = match args.policy {
        PolicyArg::Top1 => ParaphrasePolicy::Top1,
        PolicyArg::Random => ParaphrasePolicy::Random,
    };
    let selected = select_paraphrase(&candidates, policy, cfg.seed)?;
    ctx.record_result("selected", json!(selected));
    print_json(&json!({ "selected": selected, "candidates": candidates.len() }));
    Ok(())
}

pub struct TemplatesAutogenArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub relations: PathBuf,
    pub relation: String,
    pub beam: usize,
    pub top_k: usize,
    pub max_span_tokens: usize,
    pub training: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn cmd_templates_autogen(args: &TemplatesAutogenArgs, ctx: &mut RunContext) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    ensure!(registry.contains(&args.relation), "unknown relation {}", args.relation);
    let labeled = load_data(&args.data, &registry, ctx)?;
    if let Some(training) = &args.training {
        let training = load_data(training, &registry, ctx)?;
        check_zero_leak(&labeled, &training)?;
    }
    let examples: Vec<LabeledExample> = labeled
        .examples
        .iter()
        .filter(|ex| ex.triplets.len() == 1 && ex.triplets[0].relation == args.relation)
        .map(|ex| LabeledExample {
            context: ex.text.clone(),
            head: ex.triplets[0].head.clone(),
            tail: ex.triplets[0].tail.clone(),
        })
        .collect();
    ensure!(
        !examples.is_empty(),
        "no single-triplet examples labeled {} in {}",
        args.relation,
        args.data.display()
    );

    let (model, _meta, vocab) = load_model(&args.ckpt, ctx)?;
    let backend = MicroBackend::new(model);
    let candidates = autogen_templates(
        &backend,
        &vocab,
        &args.relation,
        &examples,
        args.beam,
        args.top_k,
        args.max_span_tokens,
    )?;
    ensure!(!candidates.is_empty(), "autogeneration produced no valid template");
    if let Some(out) = &args.out {
        let mut sets = BTreeMap::new();
        sets.insert(
            args.relation.clone(),
            candidates.iter().map(|c| c.pattern.clone()).collect(),
        );
        save_template_sets(out, &sets)?;
        ctx.record_output(out)?;
    }
    let report = json!({
        "relation": args.relation,
        "examples": examples.len(),
        "candidates": candidates.iter().map(|c| json!({
            "pattern": c.pattern,
            "lm_score": c.lm_score,
            "source": source_name(c.source),
        })).collect::<Vec<_>>(),
    });
    ctx.record_result("candidates", json!(candidates.len()));
    print_json(&report);
    Ok(())
}

pub struct HumanevalExportArgs {
    pub pred: PathBuf,
    pub k: usize,
    pub contexts: usize,
    pub out: PathBuf,
}

pub fn cmd_humaneval_export(
    args: &HumanevalExportArgs,
    cfg: &RunConfig,
    ctx: &mut RunContext,
) -> Result<()> {
    ctx.record_input(&args.pred)?;
    let predictions = read_predictions(&args.pred)?;
    let export = export_human_eval(&predictions, args.k, args.contexts, cfg.seed)?;
    let file = File::create(&args.out)
        .with_context(|| format!("creating annotation file {}", args.out.display()))?;
    zett_core::eval::write_annotation_records(BufWriter::new(file), &export.records)?;
    ctx.record_output(&args.out)?;
    ctx.record_result("records", json!(export.records.len()));
    print_json(&json!({
        "out": args.out.display().to_string(),
        "records": export.records.len(),
        "short_contexts": export.short_contexts,
    }));
    Ok(())
}

pub struct HumanevalKappaArgs {
    pub annotations: PathBuf,
}

pub fn cmd_humaneval_kappa(args: &HumanevalKappaArgs, ctx: &mut RunContext) -> Result<()> {
    ctx.record_input(&args.annotations)?;
    let records = read_annotation_records(&args.annotations)?;
    let kappa = cohen_kappa_from_records(&records)?;
    ctx.record_result("kappa", json!(kappa));
    print_json(&json!({ "kappa": kappa, "records": records.len() }));
    Ok(())
}

pub struct HumanevalRescoreArgs {
    pub gold: PathBuf,
    pub relations: PathBuf,
    pub annotations: PathBuf,
}

pub fn cmd_humaneval_rescore(args: &HumanevalRescoreArgs, ctx: &mut RunContext) -> Result<()> {
    let registry = load_registry(&args.relations, ctx)?;
    let gold = load_data(&args.gold, &registry, ctx)?;
    ctx.record_input(&args.annotations)?;
    let records = read_annotation_records(&args.annotations)?;
    let report = rescore_with_annotations(&gold, &records)?;
    let value = serde_json::to_value(&report)?;
    for (key, v) in value.as_object().into_iter().flatten() {
        ctx.record_result(key, v.clone());
    }
    print_json(&value);
    Ok(())
}

pub struct SyntheticGenerateArgs {
    pub n: usize,
    pub mislabel: f64,
    pub out_data: PathBuf,
    pub out_relations: PathBuf,
}

pub fn cmd_synthetic_generate(
    args: &SyntheticGenerateArgs,
    cfg: &RunConfig,
    ctx: &mut RunContext,
) -> Result<()> {
    let grammar = SyntheticGrammar::standard();
    let (dataset, registry) = generate(&grammar, args.n, cfg.seed, args.mislabel)?;
    save_dataset(&dataset, &args.out_data)?;
    registry.save(&args.out_relations)?;
    ctx.record_output(&args.out_data)?;
    ctx.record_output(&args.out_relations)?;
    ctx.record_result("examples", json!(dataset.len()));
    ctx.record_result("relations", json!(registry.len()));
    print_json(&json!({
        "data": args.out_data.display().to_string(),
        "relations_file": args.out_relations.display().to_string(),
        "examples": dataset.len(),
        "relations": registry.len(),
    }));
    Ok(())
}

pub struct SyntheticBenchmarkArgs {
    pub n: usize,
    pub m: usize,
    pub v: usize,
    pub seeds: Vec<u64>,
    pub mislabel: f64,
    pub ablations: bool,
    pub out: Option<PathBuf>,
}

pub fn cmd_synthetic_benchmark(args: &SyntheticBenchmarkArgs, ctx: &mut RunContext) -> Result<()> {
    let grammar = SyntheticGrammar::standard();
    // The benchmark is self-calibrated: model and schedule come from its
    // own defaults, not the generic run config.
    let bcfg = BenchmarkConfig {
        n_per_relation: args.n,
        m: args.m,
        v: args.v,
        seeds: args.seeds.clone(),
        mislabel_fraction: args.mislabel,
        with_ablations: args.ablations,
        ..BenchmarkConfig::default()
    };

    let t0 = std::time::Instant::now();
    let report = benchmark(&grammar, &bcfg)?;
    let runtime = t0.elapsed().as_secs_f64();

    for fold in &report.folds {
        println!(
            "fold seed={} delta={:.2} seen={:.3} unseen={:.3} majority={:.3} entity={:.3} oracle={:.3}",
            fold.seed,
            fold.delta,
            fold.seen_single,
            fold.unseen_single,
            fold.majority_baseline,
            fold.unseen_entity,
            fold.oracle_single,
        );
    }
    let seen_mean = report.folds.iter().map(|f| f.seen_single).sum::<f64>()
        / report.folds.len() as f64;
    let majority_mean = report.folds.iter().map(|f| f.majority_baseline).sum::<f64>()
        / report.folds.len() as f64;
    println!(
        "unseen single {:.4} (sd {:.4}); entity {:.4} (sd {:.4}); seen {:.4}; majority {:.4}; {:.1}s",
        report.single.mean, report.single.stddev, report.entity.mean, report.entity.stddev,
        seen_mean, majority_mean, runtime,
    );

    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing report {}", out.display()))?;
        ctx.record_output(out)?;
    }
    ctx.record_result("seen_single_mean", json!(seen_mean));
    ctx.record_result("unseen_single_mean", json!(report.single.mean));
    ctx.record_result("unseen_single_stddev", json!(report.single.stddev));
    ctx.record_result("majority_baseline_mean", json!(majority_mean));
    ctx.record_result("entity_mean", json!(report.entity.mean));
    if let Some(multi) = &report.multi {
        ctx.record_result("multi_f1_mean", json!(multi.mean));
    }
    ctx.record_result("runtime_seconds", json!(runtime));
    Ok(())
}
