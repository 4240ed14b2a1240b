//! Constrained beam-search decoding.
//!
//! The search emits infilling outputs of the form `<X> span1 <Y> span2 <Z>`
//! (or `<X> span <Z>` in one-slot mode) under two restrictions:
//!
//! * a vocabulary constraint: span tokens must come from an allowed set,
//!   normally the words of the input context, so extracted entities are
//!   copies rather than hallucinations;
//! * a grammar constraint: a state machine admits only prefixes that can
//!   still grow into a well-formed output within the length budget, so no
//!   beam slot is wasted on dead ends.
//!
//! The search is length-synchronous: at step `t` every unfinished hypothesis
//! has exactly `t` tokens. A hypothesis that emits a terminator freezes but
//! keeps competing for its beam slot, so at every step the beam holds the
//! best `beam_size` of (frozen hypotheses + fresh expansions) by score. Two
//! consequences matter:
//!
//! * with `beam_size = 1` the selection at each step is exactly a stepwise
//!   argmax over legal emissions, terminators included, so beam-1 decoding
//!   reproduces an independent greedy loop token for token;
//! * distinct hypotheses always denote disjoint sets of well-formed
//!   sequences, so their count never exceeds the number of well-formed
//!   sequences; a beam at least that wide prunes nothing and returns the
//!   exact brute-force ranking.
//!
//! Scores are sums of token log-probabilities including sentinels and the
//! terminator. Ordering ties break toward the lexicographically smaller
//! token sequence, which on same-parent expansions means the lowest token
//! id, matching the greedy tie rule.

use crate::backend::ScoringBackend;
use crate::data::Triplet;
use crate::templates::{assign_roles, parse_infill, InfilledOutput, Template};
use crate::tokenizer::{Vocabulary, END, EOS, MASK1, MASK2, PAD, RESERVED, UNK};
use crate::{Result, ZettError};

/// Output shape the grammar enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarMode {
    /// `<X> span1 <Y> span2 <Z>`: the standard two-entity infill.
    TwoSlot,
    /// `<X> span <Z>`: single-gap infill used for template generation.
    OneSlot,
}

/// Search settings.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// Number of live hypotheses kept per step.
    pub beam_size: usize,
    /// Hard cap on emitted tokens, terminator included.
    pub max_output_len: usize,
    /// Restrict span tokens to the provided allowed set (on) or to the whole
    /// word vocabulary (off).
    pub constrain_vocab: bool,
    /// Greedy mode: follow the single best token each step and stop at the
    /// first terminator. Implies a beam of one.
    pub greedy: bool,
    /// Maximum number of ranked candidates returned.
    pub max_candidates: usize,
    /// Rank by the span-token score only, ignoring sentinel and terminator
    /// log-probabilities. Off by default; sums over the full sequence.
    pub score_excludes_sentinels: bool,
    pub grammar: GrammarMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            max_output_len: 24,
            constrain_vocab: true,
            greedy: false,
            max_candidates: 4,
            score_excludes_sentinels: false,
            grammar: GrammarMode::TwoSlot,
        }
    }
}

/// One ranked search result: the raw token sequence plus both score views.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    /// Sum of log-probabilities over every emitted token.
    pub score: f64,
    /// Sum over span tokens only (sentinels and terminator excluded).
    pub content_score: f64,
}

impl Candidate {
    /// The score the search ranked by under `cfg`.
    pub fn ranking_score(&self, cfg: &DecodeConfig) -> f64 {
        if cfg.score_excludes_sentinels {
            self.content_score
        } else {
            self.score
        }
    }
}

/// A candidate parsed into spans, ready for role assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInfill {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub content_score: f64,
    pub output: InfilledOutput,
}

/// Computes the span-token id set for a decode.
///
/// Constrained: the distinct word ids of the context, sorted. Out-of-vocab
/// context words (mapped to the unknown id) are dropped; an extraction can
/// only copy words the model can actually score. Unconstrained: every word
/// id in the vocabulary. Structural ids are never span tokens.
pub fn allowed_content_ids(vocab: &Vocabulary, context_ids: &[u32], constrain: bool) -> Vec<u32> {
    if !constrain {
        return vocab.content_ids().collect();
    }
    let mut ids: Vec<u32> = context_ids.iter().copied().filter(|&id| id >= RESERVED).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Grammar states. `need` is the minimum number of further tokens required
/// to reach a terminator from the state; emissions that leave fewer steps
/// than that are pruned as dead ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GState {
    /// Nothing emitted; only `<X>` is legal.
    Start,
    /// `<X>` emitted, first span still empty.
    Span1Empty,
    /// Inside a non-empty first span.
    Span1,
    /// `<Y>` emitted, second span still empty.
    Span2Empty,
    /// Inside a non-empty second span; may terminate.
    Span2,
    /// One-slot: `<X>` emitted, span still empty.
    OneEmpty,
    /// One-slot: inside a non-empty span; may terminate.
    OneBody,
}

impl GState {
    fn initial(mode: GrammarMode) -> GState {
        match mode {
            GrammarMode::TwoSlot | GrammarMode::OneSlot => GState::Start,
        }
    }

    fn need(self, mode: GrammarMode) -> usize {
        match (self, mode) {
            (GState::Start, GrammarMode::TwoSlot) => 5,
            (GState::Start, GrammarMode::OneSlot) => 3,
            (GState::Span1Empty, _) => 4,
            (GState::Span1, _) => 3,
            (GState::Span2Empty, _) => 2,
            (GState::Span2, _) => 1,
            (GState::OneEmpty, _) => 2,
            (GState::OneBody, _) => 1,
        }
    }
}

/// Result of emitting one token kind from a state.
enum Step {
    Next(GState),
    Finish,
}

/// Token classes the grammar distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Content,
    Mask1,
    Mask2,
    Term,
}

fn step(state: GState, kind: Kind, mode: GrammarMode) -> Option<Step> {
    use GState::*;
    match (state, kind) {
        (Start, Kind::Mask1) => Some(Step::Next(match mode {
            GrammarMode::TwoSlot => Span1Empty,
            GrammarMode::OneSlot => OneEmpty,
        })),
        (Span1Empty, Kind::Content) => Some(Step::Next(Span1)),
        (Span1, Kind::Content) => Some(Step::Next(Span1)),
        (Span1, Kind::Mask2) => Some(Step::Next(Span2Empty)),
        (Span2Empty, Kind::Content) => Some(Step::Next(Span2)),
        (Span2, Kind::Content) => Some(Step::Next(Span2)),
        (Span2, Kind::Term) => Some(Step::Finish),
        (OneEmpty, Kind::Content) => Some(Step::Next(OneBody)),
        (OneBody, Kind::Content) => Some(Step::Next(OneBody)),
        (OneBody, Kind::Term) => Some(Step::Finish),
        _ => None,
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    score: f64,
    content_score: f64,
    state: GState,
    finished: bool,
}

fn ranking(score: f64, content_score: f64, excl: bool) -> f64 {
    if excl {
        content_score
    } else {
        score
    }
}

/// Orders by ranking score descending, then token sequence ascending.
fn cmp_ranked(a: &(f64, &[u32]), b: &(f64, &[u32])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Runs the constrained search and returns ranked candidates, best first.
///
/// `allowed_content` is the span-token id set (see [`allowed_content_ids`]);
/// it must be sorted, deduplicated, and free of structural ids. An empty set
/// yields no candidates, as does a length budget below the grammar minimum.
pub fn decode(
    backend: &dyn ScoringBackend,
    input_ids: &[u32],
    allowed_content: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    if cfg.beam_size == 0 {
        return Err(ZettError::config("beam_size must be at least 1"));
    }
    if cfg.max_candidates == 0 || cfg.max_candidates > cfg.beam_size {
        return Err(ZettError::config(format!(
            "max_candidates must be in 1..=beam_size, got {} with beam {}",
            cfg.max_candidates, cfg.beam_size
        )));
    }
    debug_assert!(allowed_content.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(allowed_content.iter().all(|&id| id == UNK || id >= RESERVED));
    debug_assert!(!allowed_content.contains(&PAD));

    let beam_width = if cfg.greedy { 1 } else { cfg.beam_size };
    let excl = cfg.score_excludes_sentinels;
    let sort_hyps = |hyps: &mut Vec<Hyp>| {
        hyps.sort_by(|a, b| {
            cmp_ranked(
                &(ranking(a.score, a.content_score, excl), a.tokens.as_slice()),
                &(ranking(b.score, b.content_score, excl), b.tokens.as_slice()),
            )
        });
    };
    // Structural choices per state are fixed; terminators in ascending id
    // order keep expansion order deterministic.
    let terms = [EOS, END];

    let mut beam = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        content_score: 0.0,
        state: GState::initial(cfg.grammar),
        finished: false,
    }];

    for t in 0..cfg.max_output_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let left_after = cfg.max_output_len - t - 1;
        // Frozen hypotheses carry over and compete with fresh expansions.
        let mut pool: Vec<Hyp> = beam.iter().filter(|h| h.finished).cloned().collect();
        for hyp in beam.iter().filter(|h| !h.finished) {
            let dist = backend.next_token_logprobs(input_ids, &hyp.tokens)?;
            let mut consider = |id: u32, kind: Kind| {
                let Some(outcome) = step(hyp.state, kind, cfg.grammar) else {
                    return;
                };
                if let Step::Next(next) = &outcome {
                    if next.need(cfg.grammar) > left_after {
                        return;
                    }
                }
                let lp = dist[id as usize];
                let mut tokens = hyp.tokens.clone();
                tokens.push(id);
                let content_add = if kind == Kind::Content { lp } else { 0.0 };
                pool.push(Hyp {
                    tokens,
                    score: hyp.score + lp,
                    content_score: hyp.content_score + content_add,
                    state: match outcome {
                        Step::Next(s) => s,
                        Step::Finish => hyp.state,
                    },
                    finished: matches!(outcome, Step::Finish),
                });
            };
            consider(MASK1, Kind::Mask1);
            consider(MASK2, Kind::Mask2);
            for &term in &terms {
                consider(term, Kind::Term);
            }
            for &id in allowed_content {
                consider(id, Kind::Content);
            }
        }
        sort_hyps(&mut pool);
        pool.truncate(beam_width);
        beam = pool;
    }

    // Unfinished survivors at the length cap are dropped, not force-closed.
    beam.retain(|h| h.finished);
    sort_hyps(&mut beam);
    beam.truncate(cfg.max_candidates);
    Ok(beam
        .into_iter()
        .map(|h| Candidate { tokens: h.tokens, score: h.score, content_score: h.content_score })
        .collect())
}

/// Decodes and parses two-slot candidates into spans.
///
/// The grammar guarantees every returned sequence parses; a parse failure
/// here indicates a decoder bug and is reported as a model error.
pub fn decode_infills(
    backend: &dyn ScoringBackend,
    input_ids: &[u32],
    allowed_content: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredInfill>> {
    if cfg.grammar != GrammarMode::TwoSlot {
        return Err(ZettError::config("decode_infills requires the two-slot grammar"));
    }
    let candidates = decode(backend, input_ids, allowed_content, cfg)?;
    candidates
        .into_iter()
        .map(|c| {
            let output = parse_infill(&c.tokens).map_err(|issue| {
                ZettError::model(format!("grammar-constrained output failed to parse: {issue}"))
            })?;
            Ok(ScoredInfill {
                tokens: c.tokens,
                score: c.score,
                content_score: c.content_score,
                output,
            })
        })
        .collect()
}

/// One relation-level decode result: a triplet with its sequence score.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationCandidate {
    pub triplet: Triplet,
    pub score: f64,
    pub content_score: f64,
    pub tokens: Vec<u32>,
}

/// Decodes one (context, template) pair into scored triplets.
///
/// The context is masked into the template's prompt, the beam runs over the
/// context's token ids (template words do not widen the allowed set), spans
/// are mapped back to head/tail via the template's slot order, and duplicate
/// triplets from different beams collapse to their best score. Results are
/// sorted by (score desc, head asc, tail asc).
pub fn decode_relation(
    backend: &dyn ScoringBackend,
    vocab: &Vocabulary,
    context: &str,
    template: &Template,
    cfg: &DecodeConfig,
) -> Result<Vec<RelationCandidate>> {
    let prompt = template.mask(context);
    let input_ids = vocab.encode(&prompt.prompt_text);
    let context_ids = vocab.encode(context);
    let allowed = allowed_content_ids(vocab, &context_ids, cfg.constrain_vocab);
    let infills = decode_infills(backend, &input_ids, &allowed, cfg)?;

    let mut out: Vec<RelationCandidate> = Vec::with_capacity(infills.len());
    for inf in infills {
        let (head, tail) = assign_roles(&inf.output, prompt.slot_map, vocab)?;
        let triplet = Triplet { head, relation: template.relation().to_string(), tail };
        // The reported score is whatever definition the search ranked by.
        let score = if cfg.score_excludes_sentinels { inf.content_score } else { inf.score };
        let content_score = inf.content_score;
        match out.iter_mut().find(|c| c.triplet == triplet) {
            Some(existing) => {
                // Same spans reached via different terminators: keep the
                // better-scoring sequence.
                if score > existing.score {
                    existing.score = score;
                    existing.content_score = content_score;
                    existing.tokens = inf.tokens;
                }
            }
            None => out.push(RelationCandidate {
                triplet,
                score,
                content_score,
                tokens: inf.tokens,
            }),
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.triplet.head.cmp(&b.triplet.head))
            .then_with(|| a.triplet.tail.cmp(&b.triplet.tail))
    });
    Ok(out)
}
