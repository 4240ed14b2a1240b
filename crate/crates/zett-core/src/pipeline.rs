//! End-to-end extraction: relation filtering, per-relation constrained
//! decoding, global ranking, and single- or multi-triplet prediction.
//!
//! For one context the pipeline scores every candidate relation against the
//! context with the embedder, drops those below δ, decodes the survivors'
//! templates, merges everything into one ranked list, and predicts either
//! the single best triplet or all triplets above a calibrated score
//! threshold. Candidate relations are decoded independently, so the work is
//! parallelized per relation and re-sorted deterministically afterwards.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::ScoringBackend;
use crate::data::{Dataset, RelationSpec, Triplet};
use crate::decoder::{decode_relation, DecodeConfig};
use crate::filter::{similarities, survivors, Embedder, FilterConfig};
use crate::templates::Template;
use crate::tokenizer::Vocabulary;
use crate::{Result, ZettError};

/// How a relation with several templates contributes candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiTemplatePolicy {
    /// Decode only the relation's first template (single-template setup).
    First,
    /// Decode every template and keep each triplet's best score.
    MaxOverTemplates,
}

/// Prediction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Single,
    Multi,
}

/// Full prediction configuration.
#[derive(Debug, Clone)]
pub struct PredictionConfig {
    pub mode: Mode,
    /// Log-probability cutoff for multi-triplet prediction; only scores
    /// strictly above it are predicted.
    pub multi_threshold: f64,
    pub decode: DecodeConfig,
    pub filter: FilterConfig,
    pub multi_template_policy: MultiTemplatePolicy,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            mode: Mode::Single,
            // Historical operating point for the reference models; real runs
            // recalibrate on validation.
            multi_threshold: -2.5,
            decode: DecodeConfig::default(),
            filter: FilterConfig::default(),
            multi_template_policy: MultiTemplatePolicy::First,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.multi_threshold.is_nan() {
            return Err(ZettError::config("multi_threshold must not be NaN"));
        }
        Ok(())
    }
}

/// One globally ranked extraction candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub triplet: Triplet,
    /// Sequence log-probability under the configured score definition.
    pub score: f64,
    /// Context-description similarity of the candidate's relation.
    pub relation_similarity: f64,
    /// Index of the template that produced the best score, within its
    /// relation's template list.
    pub template_index: usize,
}

fn global_cmp(a: &ScoredCandidate, b: &ScoredCandidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.triplet.relation.cmp(&b.triplet.relation))
        .then_with(|| a.triplet.head.cmp(&b.triplet.head))
        .then_with(|| a.triplet.tail.cmp(&b.triplet.tail))
}

/// Extracts ranked triplet candidates for one context.
///
/// Surviving relations each contribute their decoded candidates; duplicate
/// triplets collapse to the maximum score; the final order is score
/// descending with (relation, head, tail) as the tie-break.
pub fn extract(
    backend: &dyn ScoringBackend,
    embedder: &dyn Embedder,
    vocab: &Vocabulary,
    context: &str,
    relations: &[RelationSpec],
    cfg: &PredictionConfig,
) -> Result<Vec<ScoredCandidate>> {
    cfg.validate()?;
    if relations.is_empty() {
        return Err(ZettError::validation("extract requires a non-empty candidate relation list"));
    }
    for rel in relations {
        if rel.templates.is_empty() {
            return Err(ZettError::validation(format!("relation {} has no templates", rel.id)));
        }
    }
    let sims = similarities(embedder, context, relations)?;
    let kept = survivors(&sims, &cfg.filter);

    let per_relation: Vec<Result<Vec<ScoredCandidate>>> = kept
        .par_iter()
        .map(|&idx| {
            let rel = &relations[idx];
            let n_templates = match cfg.multi_template_policy {
                MultiTemplatePolicy::First => 1,
                MultiTemplatePolicy::MaxOverTemplates => rel.templates.len(),
            };
            let mut rel_best: Vec<ScoredCandidate> = Vec::new();
            for (t_idx, pattern) in rel.templates.iter().take(n_templates).enumerate() {
                let template = Template::new(&rel.id, pattern)?;
                for cand in decode_relation(backend, vocab, context, &template, &cfg.decode)? {
                    match rel_best.iter_mut().find(|c| c.triplet == cand.triplet) {
                        Some(existing) if cand.score > existing.score => {
                            existing.score = cand.score;
                            existing.template_index = t_idx;
                        }
                        Some(_) => {}
                        None => rel_best.push(ScoredCandidate {
                            triplet: cand.triplet,
                            score: cand.score,
                            relation_similarity: sims[idx],
                            template_index: t_idx,
                        }),
                    }
                }
            }
            Ok(rel_best)
        })
        .collect();

    let mut merged: Vec<ScoredCandidate> = Vec::new();
    for res in per_relation {
        // Relations are distinct across the pool, so cross-relation triplet
        // duplicates cannot occur; a plain merge suffices.
        merged.extend(res?);
    }
    merged.sort_by(global_cmp);
    Ok(merged)
}

/// The best-scoring triplet, if any candidate exists.
pub fn predict_single(ranked: &[ScoredCandidate]) -> Option<&Triplet> {
    ranked.first().map(|c| &c.triplet)
}

/// All triplets scoring strictly above the threshold, in rank order.
pub fn predict_multi(ranked: &[ScoredCandidate], threshold: f64) -> Vec<Triplet> {
    ranked.iter().filter(|c| c.score > threshold).map(|c| c.triplet.clone()).collect()
}

/// The default calibration grid: -3.5 to -2.0 in steps of 0.1.
pub fn default_threshold_grid() -> Vec<f64> {
    (-35..=-20).map(|k| k as f64 / 10.0).collect()
}

/// Micro-averaged F1 between per-example prediction and gold triplet sets.
/// Kept private and minimal: the evaluation module owns the reported
/// metrics; this exists so threshold calibration is self-contained and the
/// two implementations can cross-check each other in tests.
fn micro_f1(pairs: &[(Vec<Triplet>, &[Triplet])]) -> f64 {
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    for (pred, gold) in pairs {
        let mut pred = pred.clone();
        pred.sort();
        pred.dedup();
        let mut gold_set: Vec<&Triplet> = gold.iter().collect();
        gold_set.sort();
        gold_set.dedup();
        n_pred += pred.len();
        n_gold += gold_set.len();
        tp += pred.iter().filter(|p| gold_set.contains(p)).count();
    }
    if n_pred == 0 || n_gold == 0 || tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gold as f64;
    2.0 * p * r / (p + r)
}

/// Grid-searches the multi-triplet threshold on a validation dataset,
/// maximizing micro-F1; ties go to the smaller (more permissive) value.
///
/// Extraction does not depend on the threshold, so each example is decoded
/// once and every grid value is scored against the cached ranked lists.
pub fn calibrate_multi_threshold(
    backend: &dyn ScoringBackend,
    embedder: &dyn Embedder,
    vocab: &Vocabulary,
    validation: &Dataset,
    relations: &[RelationSpec],
    cfg: &PredictionConfig,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(ZettError::config("threshold grid must be non-empty"));
    }
    if grid.iter().any(|t| t.is_nan()) {
        return Err(ZettError::config("threshold grid must not contain NaN"));
    }
    if validation.examples.is_empty() {
        return Err(ZettError::validation("threshold calibration needs a non-empty validation set"));
    }
    let ranked: Vec<Vec<ScoredCandidate>> = validation
        .examples
        .iter()
        .map(|ex| extract(backend, embedder, vocab, &ex.text, relations, cfg))
        .collect::<Result<_>>()?;

    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &threshold in &sorted {
        let pairs: Vec<(Vec<Triplet>, &[Triplet])> = ranked
            .iter()
            .zip(&validation.examples)
            .map(|(r, ex)| (predict_multi(r, threshold), ex.triplets.as_slice()))
            .collect();
        let f1 = micro_f1(&pairs);
        match best {
            Some((_, s)) if f1 <= s => {}
            _ => best = Some((threshold, f1)),
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Serialized form of one ranked prediction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionEntry {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub score: f64,
}

/// One context's predictions, in rank order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub predictions: Vec<PredictionEntry>,
}

impl PredictionRecord {
    pub fn from_ranked(id: &str, ranked: &[ScoredCandidate]) -> Self {
        PredictionRecord {
            id: id.to_string(),
            predictions: ranked
                .iter()
                .map(|c| PredictionEntry {
                    head: c.triplet.head.clone(),
                    relation: c.triplet.relation.clone(),
                    tail: c.triplet.tail.clone(),
                    score: c.score,
                })
                .collect(),
        }
    }
}

/// Writes prediction records as JSONL, one context per line.
pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| ZettError::model(format!("serializing predictions: {e}")))?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| ZettError::io("<prediction stream>", e))?;
    }
    Ok(())
}

/// Reads a JSONL prediction file written by [`write_predictions`].
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ZettError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| ZettError::Parse {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if let Some(first) = seen.insert(rec.id.clone(), n + 1) {
            return Err(ZettError::validation(format!(
                "duplicate prediction id {:?} on lines {first} and {}",
                rec.id,
                n + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}
