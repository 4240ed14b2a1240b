//! Automated template induction.
//!
//! Three routes produce templates without hand-writing them:
//!
//! * mining: the middle words between the first occurrences of the two
//!   entities become the relation phrase, with placeholders assigned by
//!   which entity appears first;
//! * paraphrase selection: given a candidate set (e.g. from round-trip
//!   paraphrasing), pick the most frequent pattern or a seeded random one;
//! * auto-generation: a span-infilling decode between the two entities
//!   proposes relation phrases, which are then scored by the mean
//!   log-probability the model assigns to the gold infilling targets on a
//!   small labeled set that never enters training.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backend::ScoringBackend;
use crate::data::Dataset;
use crate::decoder::{allowed_content_ids, decode, DecodeConfig, GrammarMode};
use crate::rng::SplitMix64;
use crate::templates::{validate_pattern, Template, HEAD_PLACEHOLDER, TAIL_PLACEHOLDER};
use crate::tokenizer::{tokenize, Vocabulary, END, EOS, MASK1};
use crate::{Result, ZettError};

/// Where a template candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateSource {
    Mined,
    Paraphrased,
    Autogen,
}

/// A template candidate with its ranking evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCandidate {
    pub pattern: String,
    pub source: TemplateSource,
    /// Number of corpus examples that produced this exact pattern.
    pub support: usize,
    /// Mean gold-target log-probability on the scoring set (autogen only).
    pub lm_score: Option<f64>,
}

/// Mining result: ranked candidates plus the examples that contributed
/// nothing, with the reason.
#[derive(Debug, Clone, Default)]
pub struct MiningOutcome {
    pub candidates: Vec<TemplateCandidate>,
    pub skipped: Vec<(String, String)>,
}

/// Index of the first occurrence of `needle` as a contiguous token run.
fn find_span(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

/// Mines middle-word templates for one relation.
///
/// Each example contributes the words strictly between the first occurrence
/// of the head and the first occurrence of the tail; the earlier entity's
/// placeholder comes first. Identical patterns aggregate into support
/// counts; ranking is support descending, then pattern ascending.
pub fn mine_templates(corpus: &Dataset, relation_id: &str, top_k: usize) -> MiningOutcome {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut skipped = Vec::new();
    for ex in &corpus.examples {
        let ctx_tokens = tokenize(&ex.text);
        for triplet in ex.triplets.iter().filter(|t| t.relation == relation_id) {
            let head_tokens = tokenize(&triplet.head);
            let tail_tokens = tokenize(&triplet.tail);
            let (Some(h), Some(t)) =
                (find_span(&ctx_tokens, &head_tokens), find_span(&ctx_tokens, &tail_tokens))
            else {
                skipped.push((ex.id.clone(), "entity not found in context".to_string()));
                continue;
            };
            let (first_at, first_len, first_ph, second_at) = if h <= t {
                (h, head_tokens.len(), HEAD_PLACEHOLDER, t)
            } else {
                (t, tail_tokens.len(), TAIL_PLACEHOLDER, h)
            };
            let second_ph =
                if first_ph == HEAD_PLACEHOLDER { TAIL_PLACEHOLDER } else { HEAD_PLACEHOLDER };
            let middle_start = first_at + first_len;
            if middle_start > second_at {
                skipped.push((ex.id.clone(), "entity spans overlap".to_string()));
                continue;
            }
            let middle = &ctx_tokens[middle_start..second_at];
            if middle.is_empty() {
                skipped.push((ex.id.clone(), "no words between entities".to_string()));
                continue;
            }
            let pattern = format!("{first_ph} {} {second_ph}", middle.join(" "));
            *counts.entry(pattern).or_insert(0) += 1;
        }
    }
    let mut candidates: Vec<TemplateCandidate> = counts
        .into_iter()
        .filter(|(pattern, _)| validate_pattern(pattern).is_ok())
        .map(|(pattern, support)| TemplateCandidate {
            pattern,
            source: TemplateSource::Mined,
            support,
            lm_score: None,
        })
        .collect();
    candidates.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.pattern.cmp(&b.pattern)));
    candidates.truncate(top_k);
    MiningOutcome { candidates, skipped }
}

/// Paraphrase-set selection policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParaphrasePolicy {
    /// Most frequent pattern; ties toward the lexicographically smaller.
    Top1,
    /// Uniform draw over the (multiplicity-preserving) valid candidate list.
    Random,
}

/// Picks one pattern from a paraphrase candidate set.
///
/// Invalid patterns are dropped first; the random draw runs over the
/// remaining list with duplicates intact, so frequent paraphrases are
/// proportionally likelier.
pub fn select_paraphrase(
    candidates: &[String],
    policy: ParaphrasePolicy,
    seed: u64,
) -> Result<String> {
    let valid: Vec<&String> =
        candidates.iter().filter(|p| validate_pattern(p).is_ok()).collect();
    if valid.is_empty() {
        return Err(ZettError::validation("no valid paraphrase candidates"));
    }
    match policy {
        ParaphrasePolicy::Top1 => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for p in &valid {
                *counts.entry(p.as_str()).or_insert(0) += 1;
            }
            let best = counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
                .expect("non-empty counts");
            Ok(best.0.to_string())
        }
        ParaphrasePolicy::Random => {
            let mut rng = SplitMix64::new(seed);
            let idx = rng.next_below(valid.len() as u64) as usize;
            Ok(valid[idx].clone())
        }
    }
}

/// Produces paraphrase candidates for a pattern.
///
/// Implementations must keep exactly one head and one tail placeholder in
/// every output (violations are discarded downstream) and be deterministic.
pub trait Paraphraser {
    fn paraphrase(&self, pattern: &str, n: usize) -> Vec<String>;
}

/// Round-trip paraphrasing: `fwd` intermediates, each paraphrased `back`
/// ways, yielding `fwd * back` candidates (49 for the documented 7 x 7
/// budget).
pub fn round_trip_candidates(
    paraphraser: &dyn Paraphraser,
    pattern: &str,
    fwd: usize,
    back: usize,
) -> Vec<String> {
    let mut out = Vec::with_capacity(fwd * back);
    for mid in paraphraser.paraphrase(pattern, fwd) {
        out.extend(paraphraser.paraphrase(&mid, back));
    }
    out
}

/// Deterministic rule-based paraphraser: a fixed synonym table plus
/// single-word drops, cycled to fill the requested count. A stand-in for a
/// translation round trip so selection logic is testable offline.
#[derive(Debug, Default)]
pub struct RuleParaphraser;

const SYNONYMS: &[(&str, &str)] = &[
    ("is", "was"),
    ("employed", "hired"),
    ("by", "via"),
    ("works", "serves"),
    ("of", "from"),
    ("founded", "established"),
    ("the", "a"),
    ("a", "one"),
];

impl Paraphraser for RuleParaphraser {
    fn paraphrase(&self, pattern: &str, n: usize) -> Vec<String> {
        let words: Vec<&str> = pattern.split_whitespace().collect();
        let is_placeholder = |w: &str| w == HEAD_PLACEHOLDER || w == TAIL_PLACEHOLDER;
        let mut variants: Vec<String> = vec![words.join(" ")];
        // Single-word synonym substitutions, in table order.
        for &(from, to) in SYNONYMS {
            if let Some(i) = words.iter().position(|&w| w == from) {
                let mut v = words.clone();
                v[i] = to;
                variants.push(v.join(" "));
            }
        }
        // Single-word drops over non-placeholder words, left to right, only
        // while at least one middle word remains.
        let droppable: Vec<usize> =
            (0..words.len()).filter(|&i| !is_placeholder(words[i])).collect();
        if droppable.len() > 1 {
            for &i in &droppable {
                let v: Vec<&str> =
                    words.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, w)| *w).collect();
                variants.push(v.join(" "));
            }
        }
        (0..n).map(|i| variants[i % variants.len()].clone()).collect()
    }
}

/// One labeled example for template auto-generation and scoring.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub context: String,
    pub head: String,
    pub tail: String,
}

/// Auto-generates templates for one relation from a small labeled set.
///
/// For every example, prompts `context head <X> tail` and
/// `context tail <X> head` are span-decoded (single-gap grammar, context
/// vocabulary); each decoded span becomes a pattern with the placeholders
/// re-inserted around it and a trailing period appended. Distinct patterns
/// are scored by the mean log-probability of the gold infilling targets
/// across the labeled set and the `top_k` best are returned
/// (score descending, pattern ascending).
pub fn autogen_templates(
    backend: &dyn ScoringBackend,
    vocab: &Vocabulary,
    relation_id: &str,
    examples: &[LabeledExample],
    beam: usize,
    top_k: usize,
    max_span_tokens: usize,
) -> Result<Vec<TemplateCandidate>> {
    if examples.is_empty() {
        return Err(ZettError::validation("autogen requires a non-empty labeled set"));
    }
    let cfg = DecodeConfig {
        beam_size: beam,
        max_candidates: beam,
        // Sentinel, span, terminator.
        max_output_len: max_span_tokens + 2,
        grammar: GrammarMode::OneSlot,
        ..DecodeConfig::default()
    };

    let mut patterns: Vec<String> = Vec::new();
    for ex in examples {
        let context_ids = vocab.encode(&ex.context);
        let allowed = allowed_content_ids(vocab, &context_ids, cfg.constrain_vocab);
        for (first, second, first_ph, second_ph) in [
            (&ex.head, &ex.tail, HEAD_PLACEHOLDER, TAIL_PLACEHOLDER),
            (&ex.tail, &ex.head, TAIL_PLACEHOLDER, HEAD_PLACEHOLDER),
        ] {
            let prompt = format!("{} {first} <X> {second}", ex.context);
            let input_ids = vocab.encode(&prompt);
            for cand in decode(backend, &input_ids, &allowed, &cfg)? {
                debug_assert_eq!(cand.tokens.first(), Some(&MASK1));
                let last = *cand.tokens.last().expect("finished sequence");
                debug_assert!(last == END || last == EOS);
                let span = vocab.decode(&cand.tokens[1..cand.tokens.len() - 1])?;
                let pattern = format!("{first_ph} {span} {second_ph} .");
                if validate_pattern(&pattern).is_ok() {
                    patterns.push(pattern);
                }
            }
        }
    }
    patterns.sort();
    patterns.dedup();
    if patterns.is_empty() {
        return Ok(Vec::new());
    }

    let mut scored: Vec<TemplateCandidate> = Vec::with_capacity(patterns.len());
    for pattern in patterns {
        let template = Template::new(relation_id, &pattern)?;
        let mut total = 0.0;
        for ex in examples {
            let prompt = template.mask(&ex.context);
            let input_ids = vocab.encode(&prompt.prompt_text);
            let target = template.build_target(&ex.head, &ex.tail);
            let target_ids = vocab.encode(&target);
            total += backend.sequence_logprob(&input_ids, &target_ids)?;
        }
        let mean = total / examples.len() as f64;
        scored.push(TemplateCandidate {
            pattern,
            source: TemplateSource::Autogen,
            support: examples.len(),
            lm_score: Some(mean),
        });
    }
    scored.sort_by(|a, b| {
        b.lm_score
            .unwrap()
            .total_cmp(&a.lm_score.unwrap())
            .then_with(|| a.pattern.cmp(&b.pattern))
    });
    scored.truncate(top_k);
    Ok(scored)
}

/// Verifies that the labeled scoring set shares no example ids with a
/// training split.
pub fn check_zero_leak(labeled: &Dataset, training: &Dataset) -> Result<()> {
    let train_ids: std::collections::HashSet<&str> =
        training.examples.iter().map(|e| e.id.as_str()).collect();
    let leaked: Vec<&str> = labeled
        .examples
        .iter()
        .map(|e| e.id.as_str())
        .filter(|id| train_ids.contains(id))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(ZettError::validation(format!(
            "labeled scoring examples leak into training: {}",
            leaked.join(", ")
        )))
    }
}

/// Writes a paraphrased-template set: a JSON map relation id -> patterns.
pub fn save_template_sets(path: &Path, sets: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let json = serde_json::to_string_pretty(sets)
        .map_err(|e| ZettError::model(format!("serializing template sets: {e}")))?;
    std::fs::write(path, json.as_bytes() as &[u8])
        .map_err(|e| ZettError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a paraphrased-template set and validates every pattern.
pub fn load_template_sets(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let bytes =
        std::fs::read(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
    let sets: BTreeMap<String, Vec<String>> = serde_json::from_slice(&bytes).map_err(|e| {
        ZettError::Parse { path: path.display().to_string(), line: 0, message: e.to_string() }
    })?;
    for (relation, patterns) in &sets {
        for p in patterns {
            validate_pattern(p).map_err(|e| {
                ZettError::validation(format!("relation {relation}: bad pattern {p:?}: {e}"))
            })?;
        }
    }
    Ok(sets)
}
