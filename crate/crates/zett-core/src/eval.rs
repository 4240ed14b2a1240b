//! Metrics, ablations, fold variance, and the human-annotation workflow.
//!
//! Matching rule used everywhere: relation ids compare exactly; head and
//! tail spans compare after whitespace collapse and trim, case-sensitive.
//! Multi-triplet scores are micro-averaged by default (a macro switch is
//! provided) and predictions are deduplicated before counting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::ScoringBackend;
use crate::data::{Dataset, Example, RelationSpec, Triplet};
use crate::decoder::decode_relation;
use crate::filter::Embedder;
use crate::pipeline::{extract, predict_single, PredictionConfig, PredictionRecord};
use crate::rng::substream;
use crate::templates::Template;
use crate::tokenizer::Vocabulary;
use crate::{Result, ZettError};

/// Collapses internal whitespace runs to single spaces and trims the ends.
/// Case is preserved: matching is deliberately case-sensitive.
pub fn normalize_span(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact-match comparison under the documented normalization.
pub fn triplets_match(a: &Triplet, b: &Triplet) -> bool {
    a.relation == b.relation
        && normalize_span(&a.head) == normalize_span(&b.head)
        && normalize_span(&a.tail) == normalize_span(&b.tail)
}

/// Normalized key for set-style counting.
fn triplet_key(t: &Triplet) -> (String, String, String) {
    (normalize_span(&t.head), t.relation.clone(), normalize_span(&t.tail))
}

fn predictions_by_id(records: &[PredictionRecord]) -> HashMap<&str, &PredictionRecord> {
    records.iter().map(|r| (r.id.as_str(), r)).collect()
}

fn entry_triplet(e: &crate::pipeline::PredictionEntry) -> Triplet {
    Triplet { head: e.head.clone(), relation: e.relation.clone(), tail: e.tail.clone() }
}

fn single_gold(ex: &Example) -> Result<&Triplet> {
    if ex.triplets.len() == 1 {
        Ok(&ex.triplets[0])
    } else {
        Err(ZettError::validation(format!(
            "example {} has {} gold triplets; single/entity evaluation requires exactly one",
            ex.id,
            ex.triplets.len()
        )))
    }
}

/// Top-1 accuracy for single-triplet data. An example without a prediction
/// counts as incorrect.
pub fn eval_single(gold: &Dataset, predictions: &[PredictionRecord]) -> Result<f64> {
    if gold.examples.is_empty() {
        return Err(ZettError::validation("empty evaluation set"));
    }
    let by_id = predictions_by_id(predictions);
    let mut hits = 0usize;
    for ex in &gold.examples {
        let want = single_gold(ex)?;
        let got = by_id.get(ex.id.as_str()).and_then(|r| r.predictions.first());
        if let Some(entry) = got {
            if triplets_match(&entry_triplet(entry), want) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / gold.examples.len() as f64)
}

/// Micro or macro averaging for multi-triplet precision/recall/F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Micro,
    Macro,
}

/// Precision/recall/F1 triple with the zero-denominator conventions:
/// a score is 0 when its denominator is 0, and F1 is 0 when P + R = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf1(tp: f64, n_pred: f64, n_gold: f64) -> PrF1 {
    let precision = if n_pred > 0.0 { tp / n_pred } else { 0.0 };
    let recall = if n_gold > 0.0 { tp / n_gold } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrF1 { precision, recall, f1 }
}

/// Multi-triplet evaluation. Gold and predicted sets are deduplicated per
/// example (exact-triplet keys); micro averaging pools counts over the
/// split, macro averages per-example scores.
pub fn eval_multi(
    gold: &Dataset,
    predictions: &[PredictionRecord],
    averaging: Averaging,
) -> Result<PrF1> {
    if gold.examples.is_empty() {
        return Err(ZettError::validation("empty evaluation set"));
    }
    let by_id = predictions_by_id(predictions);
    let mut tp_total = 0usize;
    let mut pred_total = 0usize;
    let mut gold_total = 0usize;
    let mut per_example = Vec::with_capacity(gold.examples.len());
    for ex in &gold.examples {
        let gold_set: BTreeSet<_> = ex.triplets.iter().map(triplet_key).collect();
        let pred_set: BTreeSet<_> = by_id
            .get(ex.id.as_str())
            .map(|r| r.predictions.iter().map(|e| triplet_key(&entry_triplet(e))).collect())
            .unwrap_or_default();
        let tp = pred_set.intersection(&gold_set).count();
        tp_total += tp;
        pred_total += pred_set.len();
        gold_total += gold_set.len();
        per_example.push(prf1(tp as f64, pred_set.len() as f64, gold_set.len() as f64));
    }
    Ok(match averaging {
        Averaging::Micro => prf1(tp_total as f64, pred_total as f64, gold_total as f64),
        Averaging::Macro => {
            let n = per_example.len() as f64;
            PrF1 {
                precision: per_example.iter().map(|m| m.precision).sum::<f64>() / n,
                recall: per_example.iter().map(|m| m.recall).sum::<f64>() / n,
                f1: per_example.iter().map(|m| m.f1).sum::<f64>() / n,
            }
        }
    })
}

/// Entity-extraction accuracy: decode with the gold relation's first
/// template only and require both head and tail to match exactly. An empty
/// decode is a miss.
pub fn eval_entity(
    backend: &dyn ScoringBackend,
    vocab: &Vocabulary,
    gold: &Dataset,
    relations: &[RelationSpec],
    cfg: &crate::decoder::DecodeConfig,
) -> Result<f64> {
    if gold.examples.is_empty() {
        return Err(ZettError::validation("empty evaluation set"));
    }
    let specs: HashMap<&str, &RelationSpec> =
        relations.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut hits = 0usize;
    for ex in &gold.examples {
        let want = single_gold(ex)?;
        let spec = specs.get(want.relation.as_str()).ok_or_else(|| {
            ZettError::validation(format!("no relation spec for {}", want.relation))
        })?;
        let pattern = spec.templates.first().ok_or_else(|| {
            ZettError::validation(format!("relation {} has no templates", spec.id))
        })?;
        let template = Template::new(&spec.id, pattern)?;
        let cands = decode_relation(backend, vocab, &ex.text, &template, cfg)?;
        if let Some(top) = cands.first() {
            if triplets_match(&top.triplet, want) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / gold.examples.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_stddev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluation mode a report was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Single,
    Multi,
    Entity,
}

/// One fold's metric values: `value` is the headline number (accuracy or
/// F1); precision/recall accompany it in multi mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetric {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

impl FoldMetric {
    pub fn accuracy(value: f64) -> Self {
        FoldMetric { value, precision: None, recall: None }
    }

    pub fn from_prf1(m: PrF1) -> Self {
        FoldMetric { value: m.f1, precision: Some(m.precision), recall: Some(m.recall) }
    }
}

/// Aggregated metrics across folds or seeds. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub per_fold: Vec<FoldMetric>,
    pub mean: f64,
    /// Population standard deviation of the headline values.
    pub stddev: f64,
}

impl MetricReport {
    pub fn from_folds(mode: EvalMode, per_fold: Vec<FoldMetric>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(ZettError::validation("metric report needs at least one fold"));
        }
        for m in &per_fold {
            for v in [Some(m.value), m.precision, m.recall].into_iter().flatten() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ZettError::validation(format!(
                        "metric value {v} outside [0, 1]"
                    )));
                }
            }
        }
        let values: Vec<f64> = per_fold.iter().map(|m| m.value).collect();
        let (mean, stddev) = mean_stddev(&values);
        Ok(MetricReport { mode, per_fold, mean, stddev })
    }
}

/// One ablation table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub accuracy: f64,
}

/// Runs the four standard configurations on the same data: full, vocabulary
/// constraint off, greedy decoding, and relation filter off (delta -1, no
/// fallback, so every relation is scored). Single-mode accuracy per row.
pub fn run_ablations(
    backend: &(dyn ScoringBackend + Sync),
    embedder: &dyn Embedder,
    vocab: &Vocabulary,
    gold: &Dataset,
    relations: &[RelationSpec],
    base: &PredictionConfig,
) -> Result<Vec<AblationRow>> {
    let mut variants: Vec<(&str, PredictionConfig)> = Vec::with_capacity(4);
    variants.push(("full", base.clone()));
    let mut no_vocab = base.clone();
    no_vocab.decode.constrain_vocab = false;
    variants.push(("no_vocab_constraint", no_vocab));
    let mut greedy = base.clone();
    greedy.decode.greedy = true;
    variants.push(("greedy", greedy));
    let mut no_filter = base.clone();
    no_filter.filter.delta = -1.0;
    no_filter.filter.fallback_top1 = false;
    variants.push(("no_filter", no_filter));

    let mut rows = Vec::with_capacity(4);
    for (name, cfg) in variants {
        let mut hits = 0usize;
        for ex in &gold.examples {
            let want = single_gold(ex)?;
            let ranked = extract(backend, embedder, vocab, &ex.text, relations, &cfg)?;
            if let Some(top) = predict_single(&ranked) {
                if triplets_match(top, want) {
                    hits += 1;
                }
            }
        }
        rows.push(AblationRow {
            name: name.to_string(),
            accuracy: hits as f64 / gold.examples.len().max(1) as f64,
        });
    }
    Ok(rows)
}

/// One human-annotation row: a ranked prediction with two label slots.
/// `None` means unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub example_id: String,
    pub rank: usize,
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub score: f64,
    pub annotator1: Option<bool>,
    pub annotator2: Option<bool>,
}

/// Export result: unlabeled records plus the ids that had fewer than `k`
/// predictions available.
#[derive(Debug, Clone)]
pub struct HumanEvalExport {
    pub records: Vec<AnnotationRecord>,
    pub short_contexts: Vec<String>,
}

/// Samples `n_contexts` prediction records deterministically (seeded
/// substream, without replacement, input order preserved) and emits up to
/// `k` ranked rows per sampled context with empty labels.
pub fn export_human_eval(
    predictions: &[PredictionRecord],
    k: usize,
    n_contexts: usize,
    seed: u64,
) -> Result<HumanEvalExport> {
    if predictions.is_empty() {
        return Err(ZettError::validation("no prediction records to sample"));
    }
    if k == 0 || k > 5 {
        return Err(ZettError::validation("annotation rank budget k must be in 1..=5"));
    }
    if n_contexts == 0 {
        return Err(ZettError::validation("n_contexts must be positive"));
    }
    let mut rng = substream(seed, "humaneval-sample", 0);
    let mut indices: Vec<usize> = (0..predictions.len()).collect();
    let take = n_contexts.min(indices.len());
    for i in 0..take {
        let j = i + rng.next_below((indices.len() - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut picked = indices[..take].to_vec();
    picked.sort_unstable();

    let mut records = Vec::with_capacity(take * k);
    let mut short_contexts = Vec::new();
    for idx in picked {
        let rec = &predictions[idx];
        if rec.predictions.len() < k {
            short_contexts.push(rec.id.clone());
        }
        for (i, entry) in rec.predictions.iter().take(k).enumerate() {
            records.push(AnnotationRecord {
                example_id: rec.id.clone(),
                rank: i + 1,
                head: entry.head.clone(),
                relation: entry.relation.clone(),
                tail: entry.tail.clone(),
                score: entry.score,
                annotator1: None,
                annotator2: None,
            });
        }
    }
    Ok(HumanEvalExport { records, short_contexts })
}

/// Writes annotation records as CSV with the fixed header
/// `example_id,rank,head,relation,tail,score,annotator1,annotator2`.
pub fn write_annotation_records<W: Write>(w: W, records: &[AnnotationRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for rec in records {
        writer
            .serialize(rec)
            .map_err(|e| ZettError::model(format!("writing annotation csv: {e}")))?;
    }
    writer.flush().map_err(|e| ZettError::model(format!("flushing annotation csv: {e}")))?;
    Ok(())
}

/// Reads an annotation CSV, validating ranks.
pub fn read_annotation_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| ZettError::io(path.display().to_string(), e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<AnnotationRecord>().enumerate() {
        let rec = row.map_err(|e| ZettError::Parse {
            path: path.display().to_string(),
            line: i + 2,
            message: e.to_string(),
        })?;
        if !(1..=5).contains(&rec.rank) {
            return Err(ZettError::validation(format!(
                "annotation rank {} out of range for example {}",
                rec.rank, rec.example_id
            )));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Cohen's kappa over paired binary labels:
/// kappa = (p_o - p_e) / (1 - p_e) from the 2x2 contingency table. A
/// degenerate table (p_e = 1) is perfect agreement when p_o = 1, otherwise
/// an error.
pub fn cohen_kappa(pairs: &[(bool, bool)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(ZettError::validation("kappa needs at least one labeled pair"));
    }
    let n = pairs.len() as f64;
    let agree = pairs.iter().filter(|(a, b)| a == b).count() as f64;
    let a_true = pairs.iter().filter(|(a, _)| *a).count() as f64;
    let b_true = pairs.iter().filter(|(_, b)| *b).count() as f64;
    let po = agree / n;
    let pe = (a_true / n) * (b_true / n) + (1.0 - a_true / n) * (1.0 - b_true / n);
    if (1.0 - pe).abs() < 1e-12 {
        if (po - 1.0).abs() < 1e-12 {
            return Ok(1.0);
        }
        return Err(ZettError::validation(
            "kappa undefined: expected agreement is 1 but observed agreement is not",
        ));
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Extracts the doubly-labeled pairs from records; errors if any record is
/// missing a label (kappa requires complete double annotation).
pub fn cohen_kappa_from_records(records: &[AnnotationRecord]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(records.len());
    for rec in records {
        match (rec.annotator1, rec.annotator2) {
            (Some(a), Some(b)) => pairs.push((a, b)),
            _ => {
                return Err(ZettError::validation(format!(
                    "record {} rank {} is not doubly labeled",
                    rec.example_id, rec.rank
                )))
            }
        }
    }
    cohen_kappa(&pairs)
}

/// Annotation-corrected accuracy over the sampled contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreReport {
    pub sampled: usize,
    pub baseline_accuracy: f64,
    pub corrected_accuracy: f64,
    /// Contexts flipped to correct purely by agreement of both annotators.
    pub flipped: usize,
    /// Rank-1 records lacking a double label (excluded from flipping).
    pub unlabeled: usize,
}

/// Recomputes top-1 accuracy over the annotated sample: a context counts
/// correct iff its rank-1 triplet matches gold OR both annotators labeled
/// it true. Records without both labels never flip an outcome.
pub fn rescore_with_annotations(
    gold: &Dataset,
    records: &[AnnotationRecord],
) -> Result<RescoreReport> {
    let gold_by_id: HashMap<&str, &Example> =
        gold.examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut top1: BTreeMap<&str, &AnnotationRecord> = BTreeMap::new();
    for rec in records {
        if rec.rank == 1 {
            top1.insert(rec.example_id.as_str(), rec);
        }
    }
    if top1.is_empty() {
        return Err(ZettError::validation("no rank-1 annotation records"));
    }
    let mut baseline = 0usize;
    let mut corrected = 0usize;
    let mut flipped = 0usize;
    let mut unlabeled = 0usize;
    for (id, rec) in &top1 {
        let ex = gold_by_id
            .get(id)
            .ok_or_else(|| ZettError::validation(format!("unknown example id {id}")))?;
        let want = single_gold(ex)?;
        let predicted = Triplet {
            head: rec.head.clone(),
            relation: rec.relation.clone(),
            tail: rec.tail.clone(),
        };
        let gold_hit = triplets_match(&predicted, want);
        let both_true = match (rec.annotator1, rec.annotator2) {
            (Some(a), Some(b)) => a && b,
            _ => {
                unlabeled += 1;
                false
            }
        };
        if gold_hit {
            baseline += 1;
            corrected += 1;
        } else if both_true {
            corrected += 1;
            flipped += 1;
        }
    }
    let n = top1.len() as f64;
    Ok(RescoreReport {
        sampled: top1.len(),
        baseline_accuracy: baseline as f64 / n,
        corrected_accuracy: corrected as f64 / n,
        flipped,
        unlabeled,
    })
}
