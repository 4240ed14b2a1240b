//! Deterministic synthetic corpus and the desk-scale zero-shot benchmark.
//!
//! The grammar pairs each relation with a unique verb phrase that appears
//! verbatim in both its context frames and its templates, so an unseen
//! relation is solvable purely by lexical bridging between the masked
//! template and the context. Head and tail entity pools are token-disjoint,
//! which makes entity-order mistakes observable, and entity tokens never
//! collide with verb tokens, which makes the copy oracle exact.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::backend::MicroBackend;
use crate::data::{
    split_folds, Dataset, Example, FoldSpec, Registry, RelationSpec, Triplet,
};
use crate::decoder::DecodeConfig;
use crate::eval::{
    eval_entity, eval_multi, run_ablations, triplets_match, AblationRow, Averaging, EvalMode,
    FoldMetric, MetricReport, PrF1,
};
use crate::filter::{select_delta, Embedder, HashedBowEmbedder};
use crate::model::{train, ModelConfig, Seq2Seq, TrainConfig};
use crate::pipeline::{
    calibrate_multi_threshold, extract, predict_multi, predict_single, PredictionConfig,
    PredictionRecord,
};
use crate::rng::substream;
use crate::templates::Template;
use crate::tokenizer::{tokenize, Vocabulary, UNK};
use crate::{Result, ZettError};

/// One synthetic relation: a unique verb phrase plus the templates and
/// description derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticRelation {
    pub id: String,
    pub verb: String,
    pub description: String,
    pub templates: Vec<String>,
}

/// Entity pools and relation inventory for generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub relations: Vec<SyntheticRelation>,
    pub heads: Vec<String>,
    pub tails: Vec<String>,
}

// Verb token sets are pairwise disjoint so a description never shares a
// token with a context expressing a different relation: wrong-relation
// cosine is exactly zero for singles and multis alike.
const VERBS: [&str; 20] = [
    "founded",
    "acquired",
    "mentors",
    "audits",
    "sponsors",
    "advises",
    "funds",
    "owns",
    "manages",
    "endorses",
    "works for",
    "reports to",
    "invests",
    "competes with",
    "collaborates alongside",
    "holds shares of",
    "guards assets",
    "leads teams at",
    "develops software",
    "curates archives",
];

const HEADS: [&str; 24] = [
    "mara holt",
    "jon reyes",
    "elif demir",
    "tomas ruiz",
    "priya sharma",
    "kenji tanaka",
    "sofia moreau",
    "dmitri volkov",
    "amara okafor",
    "lucas brandt",
    "nadia petrov",
    "oscar lindgren",
    "wren castillo",
    "talia nassar",
    "bruno keller",
    "ingrid solberg",
    "hassan farah",
    "yuki mori",
    "carmen delgado",
    "raul ortega",
    "bianca romano",
    "felix wagner",
    "greta larsen",
    "idris bello",
];

const TAILS: [&str; 24] = [
    "quantix labs",
    "nova forge",
    "helix dynamics",
    "argent holdings",
    "zephyr systems",
    "citadel gate",
    "lumen collective",
    "vertex guild",
    "orion syndicate",
    "pinnacle trust",
    "ember industries",
    "cobalt ventures",
    "aurora consortium",
    "titan foundry",
    "mistral alliance",
    "summit bureau",
    "beacon council",
    "harbor exchange",
    "falcon registry",
    "granite union",
    "willow cooperative",
    "onyx chamber",
    "crimson depot",
    "silver atlas",
];

impl SyntheticGrammar {
    /// The default desk-scale grammar: 20 relations with pairwise distinct
    /// verb phrases of 1 to 3 tokens, 24 person-like heads, 24 org-like
    /// tails. Descriptions are the bare verb phrase: filler words would
    /// dilute the description-to-context cosine evenly across relations and
    /// erase the margin a single global delta needs.
    pub fn standard() -> SyntheticGrammar {
        let relations = VERBS
            .iter()
            .map(|&verb| SyntheticRelation {
                id: verb.replace(' ', "_"),
                verb: verb.to_string(),
                description: verb.to_string(),
                templates: vec![
                    format!("<head> {verb} <tail> ."),
                    format!("<tail> , {verb} by <head> ."),
                    format!("it is <head> that {verb} <tail> ."),
                    format!("<head> reportedly {verb} <tail> ."),
                    format!("the record shows <head> {verb} <tail> ."),
                ],
            })
            .collect();
        SyntheticGrammar {
            relations,
            heads: HEADS.iter().map(|s| s.to_string()).collect(),
            tails: TAILS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Structural checks that the generator and oracle rely on.
    pub fn validate(&self) -> Result<()> {
        if self.relations.len() < 2 {
            return Err(ZettError::validation("grammar needs at least two relations"));
        }
        if self.heads.is_empty() || self.tails.is_empty() {
            return Err(ZettError::validation("entity pools must be non-empty"));
        }
        let mut ids = BTreeSet::new();
        let verb_tokens: Vec<Vec<String>> =
            self.relations.iter().map(|r| tokenize(&r.verb)).collect();
        for (i, rel) in self.relations.iter().enumerate() {
            if !ids.insert(rel.id.as_str()) {
                return Err(ZettError::validation(format!("duplicate relation id {}", rel.id)));
            }
            if rel.description.trim().is_empty() {
                return Err(ZettError::validation(format!("relation {} lacks a description", rel.id)));
            }
            let vt = &verb_tokens[i];
            if vt.is_empty() || vt.len() > 3 {
                return Err(ZettError::validation(format!(
                    "verb phrase {:?} must be 1 to 3 tokens",
                    rel.verb
                )));
            }
            // The oracle keys frames on "," / "by" / "."; a verb containing
            // them would be ambiguous.
            if vt.iter().any(|t| t == "," || t == "." || t == "by") {
                return Err(ZettError::validation(format!(
                    "verb phrase {:?} uses a structural token",
                    rel.verb
                )));
            }
            if rel.templates.is_empty() {
                return Err(ZettError::validation(format!("relation {} has no templates", rel.id)));
            }
            for pattern in &rel.templates {
                crate::templates::validate_pattern(pattern)?;
                if !pattern.contains(&rel.verb) {
                    return Err(ZettError::validation(format!(
                        "template {pattern:?} does not contain verb {:?}",
                        rel.verb
                    )));
                }
            }
            for (j, other) in verb_tokens.iter().enumerate() {
                if i != j && find_run(other, vt).is_some() {
                    return Err(ZettError::validation(format!(
                        "verb {:?} occurs inside verb {:?}",
                        rel.verb, self.relations[j].verb
                    )));
                }
            }
        }
        let verb_token_set: BTreeSet<&str> = verb_tokens
            .iter()
            .flat_map(|vt| vt.iter().map(|s| s.as_str()))
            .chain(["by"])
            .collect();
        let head_tokens = pool_tokens(&self.heads)?;
        let tail_tokens = pool_tokens(&self.tails)?;
        if head_tokens.intersection(&tail_tokens).next().is_some() {
            return Err(ZettError::validation("head and tail pools share tokens"));
        }
        for tok in head_tokens.union(&tail_tokens) {
            if verb_token_set.contains(tok.as_str()) {
                return Err(ZettError::validation(format!(
                    "entity token {tok:?} collides with a verb token"
                )));
            }
        }
        Ok(())
    }

    /// Relation registry view of the grammar.
    pub fn registry(&self) -> Result<Registry> {
        Registry::new(
            self.relations
                .iter()
                .map(|r| RelationSpec {
                    id: r.id.clone(),
                    name: r.verb.clone(),
                    description: r.description.clone(),
                    templates: r.templates.clone(),
                })
                .collect(),
        )
    }
}

fn pool_tokens(pool: &[String]) -> Result<BTreeSet<String>> {
    let mut seen = BTreeSet::new();
    let mut tokens = BTreeSet::new();
    for entity in pool {
        if tokenize(entity).is_empty() {
            return Err(ZettError::validation(format!("entity {entity:?} has no tokens")));
        }
        if !seen.insert(entity.as_str()) {
            return Err(ZettError::validation(format!("duplicate entity {entity:?}")));
        }
        tokens.extend(tokenize(entity));
    }
    Ok(tokens)
}

/// First index where `needle` occurs as a contiguous token run.
fn find_run(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| haystack[i..i + needle.len()] == *needle)
}

fn render_sentence(rel: &SyntheticRelation, head: &str, tail: &str, frame_b: bool) -> String {
    if frame_b {
        format!("{tail} , {} by {head} .", rel.verb)
    } else {
        format!("{head} {} {tail} .", rel.verb)
    }
}

/// Generates a deterministic corpus: `n_per_relation` single-triplet
/// examples per relation plus one multi-triplet example (two concatenated
/// sentences, two distinct relations) for every four singles, i.e. 20% of
/// all examples. `mislabel_fraction` of the singles get their gold relation
/// replaced by a different one (distant-supervision-style noise); the text
/// is never altered.
pub fn generate(
    grammar: &SyntheticGrammar,
    n_per_relation: usize,
    seed: u64,
    mislabel_fraction: f64,
) -> Result<(Dataset, Registry)> {
    grammar.validate()?;
    if n_per_relation == 0 {
        return Err(ZettError::validation("n_per_relation must be at least 1"));
    }
    if !(0.0..1.0).contains(&mislabel_fraction) {
        return Err(ZettError::validation("mislabel fraction must be in [0, 1)"));
    }
    let mut rng = substream(seed, "synthetic", 0);
    let n_rel = grammar.relations.len();
    let mut singles = Vec::with_capacity(n_rel * n_per_relation);
    for rel in &grammar.relations {
        for i in 0..n_per_relation {
            let head = &grammar.heads[rng.next_below(grammar.heads.len() as u64) as usize];
            let tail = &grammar.tails[rng.next_below(grammar.tails.len() as u64) as usize];
            let frame_b = rng.next_below(4) == 0;
            singles.push(Example {
                id: format!("syn-{}-{i:03}", rel.id),
                text: render_sentence(rel, head, tail, frame_b),
                triplets: vec![Triplet::new(head, &rel.id, tail)],
            });
        }
    }
    let n_multi = singles.len() / 4;
    let mut multis = Vec::with_capacity(n_multi);
    for j in 0..n_multi {
        let r1 = rng.next_below(n_rel as u64) as usize;
        let r2 = (r1 + 1 + rng.next_below(n_rel as u64 - 1) as usize) % n_rel;
        let mut text = String::new();
        let mut triplets = Vec::with_capacity(2);
        for (k, &ri) in [r1, r2].iter().enumerate() {
            let rel = &grammar.relations[ri];
            let head = &grammar.heads[rng.next_below(grammar.heads.len() as u64) as usize];
            let tail = &grammar.tails[rng.next_below(grammar.tails.len() as u64) as usize];
            let frame_b = rng.next_below(4) == 0;
            if k > 0 {
                text.push(' ');
            }
            text.push_str(&render_sentence(rel, head, tail, frame_b));
            triplets.push(Triplet::new(head, &rel.id, tail));
        }
        multis.push(Example { id: format!("syn-multi-{j:03}"), text, triplets });
    }
    if mislabel_fraction > 0.0 {
        let k = (singles.len() as f64 * mislabel_fraction).round() as usize;
        let mut mrng = substream(seed, "synthetic", 1);
        let mut order: Vec<usize> = (0..singles.len()).collect();
        crate::rng::shuffle(&mut order, &mut mrng);
        for &idx in order.iter().take(k) {
            let old = grammar
                .relations
                .iter()
                .position(|r| r.id == singles[idx].triplets[0].relation)
                .expect("generated relation exists");
            let offset = 1 + mrng.next_below(n_rel as u64 - 1) as usize;
            singles[idx].triplets[0].relation =
                grammar.relations[(old + offset) % n_rel].id.clone();
        }
    }
    let mut examples = singles;
    examples.extend(multis);
    Ok((Dataset::new(examples), grammar.registry()?))
}

/// Reference oracle: copies the entities adjacent to the matched verb
/// phrase, sentence by sentence. On uncorrupted synthetic data this
/// recovers every gold triplet exactly, upper-bounding model scores.
pub fn copy_oracle_extract(grammar: &SyntheticGrammar, text: &str) -> Vec<Triplet> {
    let tokens = tokenize(text);
    let mut out = Vec::new();
    let mut sentence: Vec<String> = Vec::new();
    for tok in tokens {
        if tok == "." {
            if let Some(t) = oracle_sentence(grammar, &sentence) {
                out.push(t);
            }
            sentence.clear();
        } else {
            sentence.push(tok);
        }
    }
    if let Some(t) = oracle_sentence(grammar, &sentence) {
        out.push(t);
    }
    out
}

fn oracle_sentence(grammar: &SyntheticGrammar, s: &[String]) -> Option<Triplet> {
    if s.is_empty() {
        return None;
    }
    for rel in &grammar.relations {
        let vt = tokenize(&rel.verb);
        // Frame B: "E2 , verb by E1".
        if let Some(i) = (0..s.len()).find(|&i| {
            s[i] == ","
                && s.len() > i + 1 + vt.len()
                && s[i + 1..i + 1 + vt.len()] == vt[..]
                && s[i + 1 + vt.len()] == "by"
        }) {
            let tail = s[..i].join(" ");
            let head = s[i + 2 + vt.len()..].join(" ");
            if !head.is_empty() && !tail.is_empty() {
                return Some(Triplet::new(head, &rel.id, tail));
            }
        }
        // Frame A: "E1 verb E2".
        if let Some(i) = find_run(s, &vt) {
            let head = s[..i].join(" ");
            let tail = s[i + vt.len()..].join(" ");
            if !head.is_empty() && !tail.is_empty() {
                return Some(Triplet::new(head, &rel.id, tail));
            }
        }
    }
    None
}

fn sorted_triplets(ts: &[Triplet]) -> Vec<(String, String, String)> {
    let mut keys: Vec<(String, String, String)> = ts
        .iter()
        .map(|t| (t.head.clone(), t.relation.clone(), t.tail.clone()))
        .collect();
    keys.sort();
    keys
}

/// Fraction of examples whose oracle extraction equals the gold triplet
/// set exactly.
pub fn copy_oracle_accuracy(grammar: &SyntheticGrammar, dataset: &Dataset) -> f64 {
    if dataset.examples.is_empty() {
        return 0.0;
    }
    let hits = dataset
        .examples
        .iter()
        .filter(|ex| {
            sorted_triplets(&copy_oracle_extract(grammar, &ex.text))
                == sorted_triplets(&ex.triplets)
        })
        .count();
    hits as f64 / dataset.examples.len() as f64
}

/// Scans every example text for the given verb phrases and errors on the
/// first hit. Used to prove that unseen-relation verbs never reach the
/// training set.
pub fn scan_verb_leak(dataset: &Dataset, forbidden_verbs: &[String]) -> Result<()> {
    let needles: Vec<Vec<String>> = forbidden_verbs.iter().map(|v| tokenize(v)).collect();
    for ex in &dataset.examples {
        let tokens = tokenize(&ex.text);
        for (verb, needle) in forbidden_verbs.iter().zip(&needles) {
            if find_run(&tokens, needle).is_some() {
                return Err(ZettError::validation(format!(
                    "zero-leak violation: verb {verb:?} appears in training example {}",
                    ex.id
                )));
            }
        }
    }
    Ok(())
}

/// Vocabulary over the full corpus: every context plus every masked
/// template rendering. Unseen-relation coverage is intentional; zero-shot
/// hygiene constrains training examples, not token inventories.
pub fn corpus_vocabulary(dataset: &Dataset, registry: &Registry) -> Result<Vocabulary> {
    let mut lines: Vec<String> = dataset.examples.iter().map(|e| e.text.clone()).collect();
    for spec in registry.relations() {
        for pattern in &spec.templates {
            lines.push(Template::new(&spec.id, pattern)?.masked());
        }
    }
    Ok(Vocabulary::build(&lines, 1))
}

/// Supervised pairs plus the ids of examples skipped by the strict
/// containment rule (gold entities must occur verbatim in the context).
#[derive(Debug, Clone)]
pub struct TrainingPairs {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub skipped: Vec<String>,
}

/// Builds `(input, target)` id pairs: for each gold triplet, the first
/// `templates_per_triplet` templates of its relation produce one masked
/// prompt and one `<X> span1 <Y> span2 <Z>` target each. Examples whose
/// entities are not contained in the context, or that touch tokens outside
/// the vocabulary, are skipped and reported.
pub fn build_training_pairs(
    dataset: &Dataset,
    registry: &Registry,
    vocab: &Vocabulary,
    templates_per_triplet: usize,
) -> Result<TrainingPairs> {
    if templates_per_triplet == 0 {
        return Err(ZettError::validation("templates_per_triplet must be at least 1"));
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for ex in &dataset.examples {
        let ctx_tokens = tokenize(&ex.text);
        let mut ok = true;
        for t in &ex.triplets {
            let head_tokens = tokenize(&t.head);
            let tail_tokens = tokenize(&t.tail);
            if find_run(&ctx_tokens, &head_tokens).is_none()
                || find_run(&ctx_tokens, &tail_tokens).is_none()
            {
                ok = false;
                break;
            }
        }
        if !ok {
            skipped.push(ex.id.clone());
            continue;
        }
        for t in &ex.triplets {
            let spec = registry.get(&t.relation).ok_or_else(|| {
                ZettError::validation(format!("no relation spec for {}", t.relation))
            })?;
            for pattern in spec.templates.iter().take(templates_per_triplet) {
                let template = Template::new(&spec.id, pattern)?;
                let input = vocab.encode(&template.mask(&ex.text).prompt_text);
                let target = vocab.encode(&template.build_target(&t.head, &t.tail));
                if input.contains(&UNK) || target.contains(&UNK) {
                    skipped.push(ex.id.clone());
                    continue;
                }
                pairs.push((input, target));
            }
        }
    }
    Ok(TrainingPairs { pairs, skipped })
}

/// Examples split by the relation fold their gold triplets belong to.
/// Multi-triplet examples that straddle segments are discarded (counted).
#[derive(Debug, Clone)]
pub struct PartitionedData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub discarded: usize,
}

pub fn partition_examples(dataset: &Dataset, fold: &FoldSpec) -> PartitionedData {
    let train: HashSet<String> = fold.train_set();
    let val: HashSet<String> = fold.validation_set();
    let test: HashSet<String> = fold.test_set();
    let mut out = PartitionedData {
        train: Dataset::new(Vec::new()),
        validation: Dataset::new(Vec::new()),
        test: Dataset::new(Vec::new()),
        discarded: 0,
    };
    for ex in &dataset.examples {
        let in_seg = |seg: &HashSet<String>| ex.triplets.iter().all(|t| seg.contains(&t.relation));
        if in_seg(&train) {
            out.train.examples.push(ex.clone());
        } else if in_seg(&val) {
            out.validation.examples.push(ex.clone());
        } else if in_seg(&test) {
            out.test.examples.push(ex.clone());
        } else {
            out.discarded += 1;
        }
    }
    out
}

fn singles_of(ds: &Dataset) -> Dataset {
    Dataset::new(ds.examples.iter().filter(|e| e.triplets.len() == 1).cloned().collect())
}

fn multis_of(ds: &Dataset) -> Dataset {
    Dataset::new(ds.examples.iter().filter(|e| e.triplets.len() > 1).cloned().collect())
}

/// Frequency of the most common gold relation among single-triplet
/// examples: the score of the constant majority-class predictor.
pub fn majority_relation_baseline(ds: &Dataset) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in &ds.examples {
        if let Some(t) = ex.triplets.first() {
            *counts.entry(t.relation.as_str()).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    *counts.values().max().unwrap() as f64 / total as f64
}

/// Benchmark settings. Defaults are tuned so a fold trains and evaluates
/// in well under a minute on one core.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub n_per_relation: usize,
    /// Unseen (test) relation count.
    pub m: usize,
    /// Validation relation count (delta and threshold calibration).
    pub v: usize,
    pub seeds: Vec<u64>,
    pub mislabel_fraction: f64,
    /// Held-out singles per training relation for the seen-relation check.
    pub holdout_per_relation: usize,
    pub templates_per_triplet: usize,
    /// Cap on validation examples used per delta grid point.
    pub calibration_examples: usize,
    /// Hashed bag-of-words width; large enough that token collisions never
    /// blur the correct-vs-wrong similarity margin on this corpus.
    pub embedder_dim: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prediction: PredictionConfig,
    pub delta_grid: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    pub calibrate_threshold: bool,
    pub with_ablations: bool,
    pub ablation_examples: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_per_relation: 50,
            m: 5,
            v: 5,
            seeds: vec![0, 1, 2, 3, 4],
            mislabel_fraction: 0.0,
            holdout_per_relation: 3,
            templates_per_triplet: 2,
            calibration_examples: 20,
            embedder_dim: 4096,
            model: ModelConfig {
                d_model: 48,
                heads: 4,
                encoder_layers: 2,
                decoder_layers: 2,
                ffn_dim: 96,
                max_input_len: 64,
                max_output_len: 16,
                dropout: 0.0,
                ..ModelConfig::with_vocab(0)
            },
            train: TrainConfig {
                epochs: 28,
                batch_size: 16,
                learning_rate: 2e-3,
                warmup_ratio: 0.1,
                weight_decay: 0.0,
                seed: 0,
            },
            prediction: PredictionConfig {
                decode: DecodeConfig { max_output_len: 10, ..DecodeConfig::default() },
                ..PredictionConfig::default()
            },
            delta_grid: vec![-1.0, 0.05, 0.1, 0.15, 0.2],
            threshold_grid: (-40..=-1).map(|k| k as f64 * 0.25).collect(),
            calibrate_threshold: true,
            with_ablations: false,
            ablation_examples: 10,
        }
    }
}

/// One fold's results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub seed: u64,
    pub delta: f64,
    pub multi_threshold: f64,
    pub seen_single: f64,
    pub unseen_single: f64,
    pub majority_baseline: f64,
    pub oracle_single: f64,
    pub unseen_multi: Option<PrF1>,
    pub unseen_entity: f64,
    pub ablations: Option<Vec<AblationRow>>,
}

/// Aggregate over fold seeds. `multi` is absent when no fold had a usable
/// multi-triplet test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub folds: Vec<FoldOutcome>,
    pub single: MetricReport,
    pub multi: Option<MetricReport>,
    pub entity: MetricReport,
}

fn single_accuracy(
    backend: &MicroBackend,
    embedder: &dyn Embedder,
    vocab: &Vocabulary,
    ds: &Dataset,
    relations: &[RelationSpec],
    cfg: &PredictionConfig,
) -> Result<f64> {
    if ds.examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in &ds.examples {
        let ranked = extract(backend, embedder, vocab, &ex.text, relations, cfg)?;
        if let Some(top) = predict_single(&ranked) {
            if triplets_match(top, &ex.triplets[0]) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / ds.examples.len() as f64)
}

fn specs_for(registry: &Registry, ids: &HashSet<String>) -> Vec<RelationSpec> {
    registry.relations().iter().filter(|r| ids.contains(&r.id)).cloned().collect()
}

/// Trains on the fold's training relations and measures zero-shot transfer
/// to the unseen ones. Everything downstream of `seed` is deterministic.
pub fn run_fold(
    grammar: &SyntheticGrammar,
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<FoldOutcome> {
    let (dataset, registry) = generate(grammar, cfg.n_per_relation, seed, cfg.mislabel_fraction)?;
    let fold = split_folds(&registry.ids(), cfg.m, cfg.v, seed)?;
    let parts = partition_examples(&dataset, &fold);
    let train_rels = specs_for(&registry, &fold.train_set());
    let val_rels = specs_for(&registry, &fold.validation_set());
    let test_rels = specs_for(&registry, &fold.test_set());

    // Hold out the tail of each training relation's singles for the
    // seen-relation check; generation order within a relation is stable.
    if cfg.holdout_per_relation >= cfg.n_per_relation {
        return Err(ZettError::validation("holdout must leave at least one training single"));
    }
    let train_singles = singles_of(&parts.train);
    let mut by_rel: BTreeMap<&str, Vec<&Example>> = BTreeMap::new();
    for ex in &train_singles.examples {
        by_rel.entry(ex.triplets[0].relation.as_str()).or_default().push(ex);
    }
    let mut fit_examples: Vec<Example> = Vec::new();
    let mut heldout: Vec<Example> = Vec::new();
    for exs in by_rel.values() {
        let cut = exs.len().saturating_sub(cfg.holdout_per_relation);
        for (i, ex) in exs.iter().enumerate() {
            if i < cut {
                fit_examples.push((*ex).clone());
            } else {
                heldout.push((*ex).clone());
            }
        }
    }
    fit_examples.extend(multis_of(&parts.train).examples);
    let fit_ds = Dataset::new(fit_examples);
    let heldout_ds = Dataset::new(heldout);

    let forbidden: Vec<String> = grammar
        .relations
        .iter()
        .filter(|r| !fold.train_set().contains(&r.id))
        .map(|r| r.verb.clone())
        .collect();
    scan_verb_leak(&fit_ds, &forbidden)?;

    let vocab = corpus_vocabulary(&dataset, &registry)?;
    let training = build_training_pairs(&fit_ds, &registry, &vocab, cfg.templates_per_triplet)?;
    if !training.skipped.is_empty() {
        return Err(ZettError::validation(format!(
            "synthetic training examples unexpectedly skipped: {:?}",
            training.skipped
        )));
    }

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.size();
    let max_input = training.pairs.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
    // Evaluation prompts can exceed training prompts (multi contexts, long
    // templates); bound by longest context plus longest masked template.
    let max_ctx = dataset.examples.iter().map(|e| tokenize(&e.text).len()).max().unwrap_or(0);
    let max_tmpl = registry
        .relations()
        .iter()
        .flat_map(|r| r.templates.iter())
        .map(|p| tokenize(p).len())
        .max()
        .unwrap_or(0);
    model_cfg.max_input_len = model_cfg.max_input_len.max(max_input + 2).max(max_ctx + max_tmpl + 2);
    model_cfg.max_output_len =
        model_cfg.max_output_len.max(cfg.prediction.decode.max_output_len + 1);

    let mut model = Seq2Seq::new(model_cfg, seed)?;
    train(&mut model, &training.pairs, &TrainConfig { seed, ..cfg.train.clone() })?;
    let backend = MicroBackend::new(model);
    let embedder = HashedBowEmbedder::new(cfg.embedder_dim)?;

    // Delta calibration over validation-relation singles.
    let val_singles = singles_of(&parts.validation);
    let calib = Dataset::new(
        val_singles.examples.iter().take(cfg.calibration_examples.max(1)).cloned().collect(),
    );
    let mut pred_cfg = cfg.prediction.clone();
    if calib.examples.is_empty() {
        pred_cfg.filter.delta = -1.0;
    } else {
        let (delta, _) = select_delta(&cfg.delta_grid, |d| {
            let mut probe = cfg.prediction.clone();
            probe.filter.delta = d;
            single_accuracy(&backend, &embedder, &vocab, &calib, &val_rels, &probe)
        })?;
        pred_cfg.filter.delta = delta;
    }

    // Multi threshold from validation multis when available.
    let val_multis = multis_of(&parts.validation);
    if cfg.calibrate_threshold && !val_multis.examples.is_empty() {
        let (thr, _) = calibrate_multi_threshold(
            &backend,
            &embedder,
            &vocab,
            &val_multis,
            &val_rels,
            &pred_cfg,
            &cfg.threshold_grid,
        )?;
        pred_cfg.multi_threshold = thr;
    }

    let test_singles = singles_of(&parts.test);
    let seen_single =
        single_accuracy(&backend, &embedder, &vocab, &heldout_ds, &train_rels, &pred_cfg)?;
    let unseen_single =
        single_accuracy(&backend, &embedder, &vocab, &test_singles, &test_rels, &pred_cfg)?;
    let majority_baseline = majority_relation_baseline(&test_singles);
    let oracle_single = copy_oracle_accuracy(grammar, &test_singles);
    let unseen_entity =
        eval_entity(&backend, &vocab, &test_singles, &test_rels, &pred_cfg.decode)?;

    let test_multis = multis_of(&parts.test);
    let unseen_multi = if test_multis.examples.is_empty() {
        None
    } else {
        let records: Vec<PredictionRecord> = test_multis
            .examples
            .iter()
            .map(|ex| {
                let ranked = extract(&backend, &embedder, &vocab, &ex.text, &test_rels, &pred_cfg)?;
                let kept = predict_multi(&ranked, pred_cfg.multi_threshold);
                Ok(PredictionRecord {
                    id: ex.id.clone(),
                    predictions: kept
                        .into_iter()
                        .map(|t| crate::pipeline::PredictionEntry {
                            head: t.head,
                            relation: t.relation,
                            tail: t.tail,
                            score: 0.0,
                        })
                        .collect(),
                })
            })
            .collect::<Result<_>>()?;
        Some(eval_multi(&test_multis, &records, Averaging::Micro)?)
    };

    let ablations = if cfg.with_ablations {
        let subset = Dataset::new(
            test_singles.examples.iter().take(cfg.ablation_examples.max(1)).cloned().collect(),
        );
        Some(run_ablations(&backend, &embedder, &vocab, &subset, &test_rels, &pred_cfg)?)
    } else {
        None
    };

    Ok(FoldOutcome {
        seed,
        delta: pred_cfg.filter.delta,
        multi_threshold: pred_cfg.multi_threshold,
        seen_single,
        unseen_single,
        majority_baseline,
        oracle_single,
        unseen_multi,
        unseen_entity,
        ablations,
    })
}

/// Runs every fold seed sequentially and aggregates mean and population
/// standard deviation per metric.
pub fn benchmark(grammar: &SyntheticGrammar, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.seeds.is_empty() {
        return Err(ZettError::validation("benchmark needs at least one fold seed"));
    }
    let folds: Vec<FoldOutcome> =
        cfg.seeds.iter().map(|&s| run_fold(grammar, cfg, s)).collect::<Result<_>>()?;
    let single = MetricReport::from_folds(
        EvalMode::Single,
        folds.iter().map(|f| FoldMetric::accuracy(f.unseen_single)).collect(),
    )?;
    let entity = MetricReport::from_folds(
        EvalMode::Entity,
        folds.iter().map(|f| FoldMetric::accuracy(f.unseen_entity)).collect(),
    )?;
    let multi_folds: Vec<FoldMetric> = folds
        .iter()
        .filter_map(|f| f.unseen_multi.map(FoldMetric::from_prf1))
        .collect();
    let multi = if multi_folds.is_empty() {
        None
    } else {
        Some(MetricReport::from_folds(EvalMode::Multi, multi_folds)?)
    };
    Ok(BenchmarkReport { folds, single, multi, entity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_dataset;
    use crate::tokenizer::{END, MASK1, MASK2};

    #[test]
    fn standard_grammar_is_structurally_sound() {
        let g = SyntheticGrammar::standard();
        g.validate().unwrap();
        assert_eq!(g.relations.len(), 20);
        assert_eq!(g.heads.len(), 24);
        assert_eq!(g.tails.len(), 24);
        let verbs: BTreeSet<&str> = g.relations.iter().map(|r| r.verb.as_str()).collect();
        assert_eq!(verbs.len(), 20);
        for rel in &g.relations {
            assert_eq!(rel.templates.len(), 5);
            for t in &rel.templates {
                assert!(t.contains(&rel.verb));
            }
            assert!(rel.description.contains(&rel.verb));
        }
        // Wrong-relation cosine is zero only if no token appears in two verbs.
        let mut seen = BTreeSet::new();
        for rel in &g.relations {
            for tok in rel.verb.split_whitespace() {
                assert!(seen.insert(tok), "verb token {tok} reused across relations");
            }
        }
        let registry = g.registry().unwrap();
        assert_eq!(registry.len(), 20);

        // ...and no verb token may share a hash bucket with any other corpus
        // token at the benchmark embedder width.
        let embedder =
            crate::filter::HashedBowEmbedder::new(BenchmarkConfig::default().embedder_dim)
                .unwrap();
        let mut lexicon: BTreeSet<String> = BTreeSet::new();
        for r in &g.relations {
            lexicon.extend(r.verb.split_whitespace().map(str::to_string));
        }
        for e in g.heads.iter().chain(&g.tails) {
            lexicon.extend(e.split_whitespace().map(str::to_string));
        }
        for w in ["by", ",", ".", "it", "is", "that", "reportedly", "the", "record", "shows"] {
            lexicon.insert(w.to_string());
        }
        use crate::filter::Embedder;
        let verb_tokens: BTreeSet<&String> =
            lexicon.iter().filter(|t| seen.contains(t.as_str())).collect();
        for v in &verb_tokens {
            let ve = embedder.embed(v).unwrap();
            for t in &lexicon {
                if t == *v {
                    continue;
                }
                let te = embedder.embed(t).unwrap();
                let dot: f64 = ve.iter().zip(&te).map(|(a, b)| a * b).sum();
                assert_eq!(dot, 0.0, "hash bucket shared between {v:?} and {t:?}");
            }
        }
    }

    #[test]
    fn grammar_validation_rejects_structural_breaks() {
        let mut dup = SyntheticGrammar::standard();
        dup.relations[1].verb = dup.relations[0].verb.clone();
        dup.relations[1].templates = dup.relations[0].templates.clone();
        assert!(dup.validate().is_err());

        let mut nested = SyntheticGrammar::standard();
        nested.relations[0].verb = "works".to_string();
        nested.relations[0].templates = vec!["<head> works <tail> .".to_string()];
        assert!(nested.validate().is_err(), "verb inside 'works for' must be rejected");

        let mut collide = SyntheticGrammar::standard();
        collide.heads[0] = "mara founded".to_string();
        assert!(collide.validate().is_err());

        let mut shared = SyntheticGrammar::standard();
        shared.tails[0] = "mara holt".to_string();
        assert!(shared.validate().is_err());
    }

    #[test]
    fn generation_counts_are_exact_and_deterministic() {
        let g = SyntheticGrammar::standard();
        let (ds, registry) = generate(&g, 5, 9, 0.0).unwrap();
        let singles = ds.examples.iter().filter(|e| e.triplets.len() == 1).count();
        let multis = ds.examples.iter().filter(|e| e.triplets.len() == 2).count();
        assert_eq!(singles, 100);
        assert_eq!(multis, 25);
        assert_eq!(ds.len(), 125);
        assert_eq!(registry.len(), 20);
        let ids: BTreeSet<&str> = ds.examples.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids.len(), 125);

        let (again, _) = generate(&g, 5, 9, 0.0).unwrap();
        assert_eq!(again, ds);
        let (other, _) = generate(&g, 5, 10, 0.0).unwrap();
        assert_ne!(other, ds);

        // Byte-identical JSONL on regeneration.
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_dataset(&ds, &a).unwrap();
        save_dataset(&again, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn generated_entities_occur_verbatim_in_their_context() {
        let g = SyntheticGrammar::standard();
        let (ds, _) = generate(&g, 4, 2, 0.0).unwrap();
        for ex in &ds.examples {
            let ctx = tokenize(&ex.text);
            for t in &ex.triplets {
                assert!(find_run(&ctx, &tokenize(&t.head)).is_some(), "{}", ex.id);
                assert!(find_run(&ctx, &tokenize(&t.tail)).is_some(), "{}", ex.id);
            }
        }
    }

    #[test]
    fn multi_examples_pair_two_distinct_relations() {
        let g = SyntheticGrammar::standard();
        let (ds, _) = generate(&g, 8, 4, 0.0).unwrap();
        for ex in ds.examples.iter().filter(|e| e.id.starts_with("syn-multi-")) {
            assert_eq!(ex.triplets.len(), 2);
            assert_ne!(ex.triplets[0].relation, ex.triplets[1].relation);
            assert_eq!(ex.text.matches(" .").count(), 2);
        }
    }

    #[test]
    fn copy_oracle_recovers_every_gold_triplet() {
        let g = SyntheticGrammar::standard();
        let (ds, _) = generate(&g, 6, 11, 0.0).unwrap();
        assert_eq!(copy_oracle_accuracy(&g, &ds), 1.0);
        // Spot-check both frames explicitly.
        let rel = &g.relations[10];
        assert_eq!(rel.verb, "works for");
        let a = copy_oracle_extract(&g, "mara holt works for quantix labs .");
        assert_eq!(a, vec![Triplet::new("mara holt", "works_for", "quantix labs")]);
        let b = copy_oracle_extract(&g, "quantix labs , works for by mara holt .");
        assert_eq!(b, vec![Triplet::new("mara holt", "works_for", "quantix labs")]);
    }

    #[test]
    fn mislabeling_corrupts_exactly_the_requested_fraction_of_labels() {
        let g = SyntheticGrammar::standard();
        let (clean, _) = generate(&g, 10, 3, 0.0).unwrap();
        let (noisy, _) = generate(&g, 10, 3, 0.3).unwrap();
        assert_eq!(clean.len(), noisy.len());
        let mut changed = 0;
        for (c, n) in clean.examples.iter().zip(&noisy.examples) {
            assert_eq!(c.text, n.text, "mislabeling must never alter text");
            assert_eq!(c.id, n.id);
            if c.triplets != n.triplets {
                assert_eq!(c.triplets.len(), 1, "only singles are relabeled");
                assert_eq!(c.triplets[0].head, n.triplets[0].head);
                assert_eq!(c.triplets[0].tail, n.triplets[0].tail);
                assert_ne!(c.triplets[0].relation, n.triplets[0].relation);
                changed += 1;
            }
        }
        assert_eq!(changed, 60, "round(0.3 * 200) singles relabeled");
        // Oracle accuracy drops by exactly the corrupted share of singles.
        let acc = copy_oracle_accuracy(&g, &noisy);
        let expect = (noisy.len() - 60) as f64 / noisy.len() as f64;
        assert!((acc - expect).abs() < 1e-12);
    }

    #[test]
    fn leak_scan_catches_forbidden_verbs() {
        let g = SyntheticGrammar::standard();
        let (ds, registry) = generate(&g, 3, 5, 0.0).unwrap();
        let fold = split_folds(&registry.ids(), 5, 5, 5).unwrap();
        let parts = partition_examples(&ds, &fold);
        let forbidden: Vec<String> = g
            .relations
            .iter()
            .filter(|r| !fold.train_set().contains(&r.id))
            .map(|r| r.verb.clone())
            .collect();
        scan_verb_leak(&parts.train, &forbidden).unwrap();
        // Injecting a test-relation sentence trips the scan.
        let test_rel_id = &fold.test[0];
        let verb = &g.relations.iter().find(|r| &r.id == test_rel_id).unwrap().verb;
        let mut leaky = parts.train.clone();
        leaky.examples.push(Example {
            id: "leak".to_string(),
            text: format!("mara holt {verb} quantix labs ."),
            triplets: vec![],
        });
        assert!(scan_verb_leak(&leaky, &forbidden).is_err());
    }

    #[test]
    fn partition_respects_fold_membership_and_discards_straddlers() {
        let g = SyntheticGrammar::standard();
        let (ds, registry) = generate(&g, 4, 7, 0.0).unwrap();
        let fold = split_folds(&registry.ids(), 5, 5, 7).unwrap();
        assert_eq!(fold.train.len(), 10);
        let parts = partition_examples(&ds, &fold);
        let train_set = fold.train_set();
        let val_set = fold.validation_set();
        let test_set = fold.test_set();
        for ex in &parts.train.examples {
            assert!(ex.triplets.iter().all(|t| train_set.contains(&t.relation)));
        }
        for ex in &parts.validation.examples {
            assert!(ex.triplets.iter().all(|t| val_set.contains(&t.relation)));
        }
        for ex in &parts.test.examples {
            assert!(ex.triplets.iter().all(|t| test_set.contains(&t.relation)));
        }
        // Singles are never discarded; only straddling multis are.
        assert_eq!(
            parts.train.len() + parts.validation.len() + parts.test.len() + parts.discarded,
            ds.len()
        );
        let singles_kept = [&parts.train, &parts.validation, &parts.test]
            .iter()
            .flat_map(|d| d.examples.iter())
            .filter(|e| e.triplets.len() == 1)
            .count();
        assert_eq!(singles_kept, 80);
        assert!(parts.discarded > 0);
    }

    #[test]
    fn training_pairs_have_canonical_target_shape() {
        let g = SyntheticGrammar::standard();
        let (ds, registry) = generate(&g, 2, 1, 0.0).unwrap();
        let vocab = corpus_vocabulary(&ds, &registry).unwrap();
        let training = build_training_pairs(&ds, &registry, &vocab, 2).unwrap();
        assert!(training.skipped.is_empty());
        let singles = ds.examples.iter().filter(|e| e.triplets.len() == 1).count();
        let multi_triplets: usize =
            ds.examples.iter().filter(|e| e.triplets.len() > 1).map(|e| e.triplets.len()).sum();
        assert_eq!(training.pairs.len(), (singles + multi_triplets) * 2);
        for (input, target) in &training.pairs {
            assert!(!input.contains(&UNK));
            assert!(!target.contains(&UNK));
            assert_eq!(target.first(), Some(&MASK1));
            assert_eq!(target.last(), Some(&END));
            assert_eq!(target.iter().filter(|&&t| t == MASK2).count(), 1);
            assert!(input.contains(&MASK1) && input.contains(&MASK2));
        }
    }

    #[test]
    fn majority_baseline_is_the_top_relation_frequency() {
        let mk = |rel: &str, i: usize| Example {
            id: format!("{rel}-{i}"),
            text: "x".to_string(),
            triplets: vec![Triplet::new("h", rel, "t")],
        };
        let ds = Dataset::new(vec![mk("a", 0), mk("a", 1), mk("a", 2), mk("b", 0), mk("c", 0)]);
        assert_eq!(majority_relation_baseline(&ds), 0.6);
        assert_eq!(majority_relation_baseline(&Dataset::new(vec![])), 0.0);
    }

    #[test]
    fn fold_run_wires_the_whole_pipeline_at_tiny_scale() {
        let g = SyntheticGrammar::standard();
        let cfg = BenchmarkConfig {
            n_per_relation: 2,
            holdout_per_relation: 1,
            seeds: vec![0],
            calibration_examples: 4,
            delta_grid: vec![-1.0, 0.3],
            model: ModelConfig {
                d_model: 16,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ffn_dim: 32,
                max_input_len: 48,
                max_output_len: 12,
                dropout: 0.0,
                ..ModelConfig::with_vocab(0)
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 16,
                learning_rate: 1e-3,
                warmup_ratio: 0.1,
                weight_decay: 0.0,
                seed: 0,
            },
            calibrate_threshold: false,
            ..BenchmarkConfig::default()
        };
        let report = benchmark(&g, &cfg).unwrap();
        assert_eq!(report.folds.len(), 1);
        let fold = &report.folds[0];
        assert_eq!(fold.oracle_single, 1.0);
        assert!((fold.majority_baseline - 0.2).abs() < 1e-9);
        assert!(cfg.delta_grid.contains(&fold.delta));
        for v in [fold.seen_single, fold.unseen_single, fold.unseen_entity] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(report.single.per_fold.len(), 1);
        assert_eq!(report.entity.per_fold.len(), 1);
        assert!(fold.ablations.is_none());
    }
}
