//! Relation filtering by context-description similarity.
//!
//! Before decoding, candidate relations are scored by the cosine similarity
//! between an embedding of the context and an embedding of the relation's
//! natural-language description; relations scoring below a threshold δ are
//! skipped. The embedder is pluggable: the built-in one is a hashed
//! bag-of-words stand-in for a pre-trained sentence encoder, and a
//! precomputed-embedding file can stand in for any external encoder.
//!
//! δ is data-dependent. [`select_delta`] picks it on a validation fold by
//! grid search, ties resolved toward the smaller (more permissive) value.

use std::collections::HashMap;
use std::path::Path;

use crate::data::RelationSpec;
use crate::rng::fnv1a64;
use crate::tokenizer::tokenize;
use crate::{Result, ZettError};

/// Text-to-unit-vector encoder.
///
/// Implementations must be deterministic per text, immutable after
/// construction, and safe to call concurrently. Returned vectors have L2
/// norm 1 within 1e-6.
pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Threshold configuration for the relation filter.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    /// Similarity threshold δ; relations scoring below it are dropped.
    pub delta: f64,
    /// When the threshold removes every relation, keep the single
    /// highest-similarity one instead of returning nothing.
    pub fallback_top1: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { delta: -1.0, fallback_top1: true }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.delta) || self.delta.is_nan() {
            return Err(ZettError::config(format!("delta must lie in [-1, 1], got {}", self.delta)));
        }
        Ok(())
    }
}

fn l2_normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ZettError::validation(format!("cannot normalize zero-norm embedding for {what}")));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Term-frequency bag of words over lowercased tokens, hashed into a
/// power-of-two number of buckets and L2-normalized. A desk-scale stand-in
/// for a sentence encoder: no semantics, but deterministic, fast, and good
/// enough to separate descriptions that share vocabulary with the context.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if !dim.is_power_of_two() || dim < 2 {
            return Err(ZettError::config(format!("embedder dimension must be a power of two >= 2, got {dim}")));
        }
        Ok(HashedBowEmbedder { dim })
    }

    /// Bucket index a token hashes into; exposed so tests can verify
    /// constructions are collision-free.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: 256 }
    }
}

impl Embedder for HashedBowEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let lowered = text.to_lowercase();
        for token in tokenize(&lowered) {
            v[self.bucket(&token)] += 1.0;
        }
        l2_normalize(v, "text with no tokens")
    }
}

/// Embeddings computed offline by an external encoder, keyed by the FNV-1a
/// 64-bit hash of the exact text, rendered as lowercase hex. Vectors are
/// re-normalized on load so the file may store raw encoder outputs.
pub struct PrecomputedEmbedder {
    dim: usize,
    map: HashMap<u64, Vec<f64>>,
}

impl PrecomputedEmbedder {
    /// Hash key for a text, as stored in the JSON file.
    pub fn text_key(text: &str) -> String {
        format!("{:016x}", fnv1a64(text.as_bytes()))
    }

    pub fn from_entries(entries: HashMap<String, Vec<f64>>) -> Result<Self> {
        let mut dim = 0;
        let mut map = HashMap::with_capacity(entries.len());
        for (key, vec) in entries {
            let hash = u64::from_str_radix(&key, 16)
                .map_err(|_| ZettError::validation(format!("embedding key {key:?} is not a 64-bit hex hash")))?;
            if dim == 0 {
                dim = vec.len();
            }
            if vec.len() != dim || dim == 0 {
                return Err(ZettError::validation(format!(
                    "embedding for key {key:?} has dimension {}, expected {dim}",
                    vec.len()
                )));
            }
            map.insert(hash, l2_normalize(vec, &format!("embedding key {key:?}"))?);
        }
        if map.is_empty() {
            return Err(ZettError::validation("precomputed embedding file holds no entries"));
        }
        Ok(PrecomputedEmbedder { dim, map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
        let entries: HashMap<String, Vec<f64>> = serde_json::from_slice(&bytes)
            .map_err(|e| ZettError::Parse { path: path.display().to_string(), line: 0, message: e.to_string() })?;
        Self::from_entries(entries)
    }
}

impl Embedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.map
            .get(&fnv1a64(text.as_bytes()))
            .cloned()
            .ok_or_else(|| ZettError::validation(format!("no precomputed embedding for text {text:?}")))
    }
}

/// Cosine of two unit vectors: their dot product.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Similarity between a context and one relation's description.
pub fn similarity(embedder: &dyn Embedder, context: &str, relation: &RelationSpec) -> Result<f64> {
    if relation.description.is_empty() {
        return Err(ZettError::validation(format!("relation {} has an empty description", relation.id)));
    }
    let c = embedder.embed(context)?;
    let d = embedder.embed(&relation.description)?;
    Ok(cosine(&c, &d))
}

/// Similarities of one context against a list of relations, in list order.
pub fn similarities(
    embedder: &dyn Embedder,
    context: &str,
    relations: &[RelationSpec],
) -> Result<Vec<f64>> {
    let c = embedder.embed(context)?;
    relations
        .iter()
        .map(|r| {
            if r.description.is_empty() {
                return Err(ZettError::validation(format!("relation {} has an empty description", r.id)));
            }
            Ok(cosine(&c, &embedder.embed(&r.description)?))
        })
        .collect()
}

/// Applies the threshold to precomputed similarities; returns surviving
/// indices in input order. When nothing clears δ and the fallback is on, the
/// single argmax survives (ties toward the earlier index).
pub fn survivors(sims: &[f64], cfg: &FilterConfig) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..sims.len()).filter(|&i| sims[i] >= cfg.delta).collect();
    if kept.is_empty() && cfg.fallback_top1 && !sims.is_empty() {
        let mut best = 0;
        for (i, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = i;
            }
        }
        kept.push(best);
    }
    kept
}

/// Filters a relation list for one context; returns surviving indices.
pub fn filter_relations(
    embedder: &dyn Embedder,
    context: &str,
    relations: &[RelationSpec],
    cfg: &FilterConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if relations.is_empty() {
        return Err(ZettError::validation("filter_relations requires a non-empty relation list"));
    }
    let sims = similarities(embedder, context, relations)?;
    Ok(survivors(&sims, cfg))
}

/// Grid-searches δ, scoring each value with the supplied evaluator (higher
/// is better), and returns the best; ties go to the smaller δ. The evaluator
/// is called once per distinct grid value in ascending order.
pub fn select_delta<F>(grid: &[f64], mut eval_at: F) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(ZettError::config("delta grid must be non-empty"));
    }
    let mut sorted = grid.to_vec();
    if sorted.iter().any(|d| d.is_nan() || !(-1.0..=1.0).contains(d)) {
        return Err(ZettError::config("delta grid values must lie in [-1, 1]"));
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &delta in &sorted {
        let score = eval_at(delta)?;
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((delta, score)),
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RelationSpec;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn rel(id: &str, description: &str) -> RelationSpec {
        RelationSpec {
            id: id.to_string(),
            name: id.to_string(),
            description: description.to_string(),
            templates: Vec::new(),
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let e = HashedBowEmbedder::default();
        for text in ["alpha beta gamma", "a a a", "Founded by Up Grade.", "x"] {
            let v1 = e.embed(text).unwrap();
            let v2 = e.embed(text).unwrap();
            assert_eq!(v1, v2);
            let norm: f64 = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm} for {text:?}");
        }
    }

    #[test]
    fn identical_texts_have_cosine_one() {
        let e = HashedBowEmbedder::default();
        let a = e.embed("maria rivera founded redwood labs .").unwrap();
        let b = e.embed("maria rivera founded redwood labs .").unwrap();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn casing_is_ignored() {
        let e = HashedBowEmbedder::default();
        let a = e.embed("Founded Redwood").unwrap();
        let b = e.embed("founded redwood").unwrap();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_collision_free_texts_are_orthogonal() {
        let e = HashedBowEmbedder::new(1 << 16).unwrap();
        let left = ["alpha", "bravo", "carol"];
        let right = ["delta", "echo", "fern"];
        let mut buckets: Vec<usize> =
            left.iter().chain(&right).map(|t| e.bucket(t)).collect();
        buckets.sort_unstable();
        buckets.dedup();
        assert_eq!(buckets.len(), 6, "chosen tokens must not collide");
        let a = e.embed(&left.join(" ")).unwrap();
        let b = e.embed(&right.join(" ")).unwrap();
        assert_eq!(cosine(&a, &b), 0.0);
    }

    #[test]
    fn term_frequency_weighting_matches_hand_value() {
        let e = HashedBowEmbedder::new(1 << 16).unwrap();
        assert_ne!(e.bucket("aa"), e.bucket("bb"));
        let a = e.embed("aa aa bb").unwrap();
        let b = e.embed("aa bb").unwrap();
        // (2,1)/sqrt(5) . (1,1)/sqrt(2) = 3/sqrt(10)
        assert!((cosine(&a, &b) - 3.0 / 10.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_symmetric() {
        let e = HashedBowEmbedder::default();
        let a = e.embed("one two three four").unwrap();
        let b = e.embed("three four five").unwrap();
        assert!((cosine(&a, &b) - cosine(&b, &a)).abs() < 1e-9);
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = HashedBowEmbedder::default();
        assert!(e.embed("").is_err());
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        assert!(HashedBowEmbedder::new(0).is_err());
        assert!(HashedBowEmbedder::new(48).is_err());
        assert!(HashedBowEmbedder::new(1).is_err());
        assert!(HashedBowEmbedder::new(256).is_ok());
    }

    /// Builds a context of `n` numbered tokens plus relations whose
    /// descriptions share a chosen count of them, yielding exact cosines.
    #[test]
    fn constructed_cosines_match_targets_and_threshold_keeps_two() {
        let e = HashedBowEmbedder::new(1 << 16).unwrap();
        let shared: Vec<String> = (0..100).map(|i| format!("w{i:03}")).collect();
        let filler: Vec<String> = (0..73).map(|i| format!("f{i:03}")).collect();
        let mut buckets: Vec<usize> =
            shared.iter().chain(&filler).map(|t| e.bucket(t)).collect();
        buckets.sort_unstable();
        buckets.dedup();
        assert_eq!(buckets.len(), 173, "construction requires collision-free tokens");

        let context = shared.join(" ");
        // Description with k shared tokens and 100-k unique fillers has
        // cosine k/100 against the context.
        let mut filler_iter = filler.iter();
        let mut desc = |k: usize| -> String {
            let mut toks: Vec<String> = shared[..k].to_vec();
            for _ in 0..(100 - k) {
                toks.push(filler_iter.next().unwrap().clone());
            }
            toks.join(" ")
        };
        let relations =
            vec![rel("r90", &desc(90)), rel("r50", &desc(50)), rel("r87", &desc(87))];
        let sims = similarities(&e, &context, &relations).unwrap();
        assert!((sims[0] - 0.90).abs() < 1e-9);
        assert!((sims[1] - 0.50).abs() < 1e-9);
        assert!((sims[2] - 0.87).abs() < 1e-9);

        let cfg = FilterConfig { delta: 0.85, fallback_top1: true };
        let kept = survivors(&sims, &cfg);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn delta_lower_bound_keeps_everything() {
        let sims = [0.3, -0.9, 0.0, 1.0];
        let cfg = FilterConfig { delta: -1.0, fallback_top1: false };
        assert_eq!(survivors(&sims, &cfg), vec![0, 1, 2, 3]);
    }

    #[test]
    fn fallback_keeps_exactly_the_argmax() {
        let sims = [0.3, 0.71, 0.7];
        let strict = FilterConfig { delta: 1.0, fallback_top1: false };
        assert!(survivors(&sims, &strict).is_empty());
        let fallback = FilterConfig { delta: 1.0, fallback_top1: true };
        assert_eq!(survivors(&sims, &fallback), vec![1]);
        // Argmax ties break toward the earlier index.
        let tied = [0.5, 0.7, 0.7];
        assert_eq!(survivors(&tied, &fallback), vec![1]);
    }

    #[test]
    fn survivor_ids_are_invariant_under_permutation() {
        let e = HashedBowEmbedder::default();
        let context = "maria rivera founded redwood labs";
        let rels = vec![
            rel("a", "a person founded an organization"),
            rel("b", "a person mentors a person"),
            rel("c", "an organization labs redwood"),
        ];
        let cfg = FilterConfig { delta: 0.2, fallback_top1: true };
        let base: std::collections::BTreeSet<String> =
            filter_relations(&e, context, &rels, &cfg)
                .unwrap()
                .into_iter()
                .map(|i| rels[i].id.clone())
                .collect();
        let perm = vec![rels[2].clone(), rels[0].clone(), rels[1].clone()];
        let permuted: std::collections::BTreeSet<String> =
            filter_relations(&e, context, &perm, &cfg)
                .unwrap()
                .into_iter()
                .map(|i| perm[i].id.clone())
                .collect();
        assert_eq!(base, permuted);
    }

    #[test]
    fn select_delta_breaks_ties_toward_smaller() {
        let grid = [0.5, -1.0, 0.2];
        let (best, score) = select_delta(&grid, |d| {
            Ok(if d == -1.0 { 0.5 } else { 0.7 })
        })
        .unwrap();
        assert_eq!(best, 0.2);
        assert_eq!(score, 0.7);
        let (only, _) = select_delta(&[0.3], |_| Ok(0.1)).unwrap();
        assert_eq!(only, 0.3);
        assert!(select_delta(&[], |_| Ok(0.0)).is_err());
        assert!(select_delta(&[1.5], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn precomputed_embedder_round_trips_and_rejects_unknowns() {
        let mut entries = HashMap::new();
        // Deliberately unnormalized; load must normalize.
        entries.insert(PrecomputedEmbedder::text_key("hello world"), vec![3.0, 4.0]);
        entries.insert(PrecomputedEmbedder::text_key("goodbye"), vec![0.0, 2.0]);
        let e = PrecomputedEmbedder::from_entries(entries).unwrap();
        assert_eq!(e.dim(), 2);
        let v = e.embed("hello world").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12);
        assert!((v[1] - 0.8).abs() < 1e-12);
        assert!(e.embed("unknown text").is_err());

        let mut zero = HashMap::new();
        zero.insert(PrecomputedEmbedder::text_key("z"), vec![0.0, 0.0]);
        assert!(PrecomputedEmbedder::from_entries(zero).is_err());
    }

    proptest! {
        /// Raising delta never admits a relation that a lower delta refused.
        #[test]
        fn survivors_are_anti_monotone_in_delta(
            sims in proptest::collection::vec(-1.0f64..1.0, 1..16),
            d1 in -1.0f64..1.0,
            d2 in -1.0f64..1.0,
            fallback in proptest::bool::ANY,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let loose = survivors(&sims, &FilterConfig { delta: lo, fallback_top1: fallback });
            let tight = survivors(&sims, &FilterConfig { delta: hi, fallback_top1: fallback });
            for i in &tight {
                prop_assert!(loose.contains(i), "index {i} survived {hi} but not {lo}");
            }
            if fallback {
                prop_assert!(!tight.is_empty());
            }
        }

        /// The fallback guarantee and the threshold rule, cross-checked
        /// against a naive reference.
        #[test]
        fn survivors_match_reference(
            sims in proptest::collection::vec(-1.0f64..1.0, 1..16),
            delta in -1.0f64..1.0,
        ) {
            let cfg = FilterConfig { delta, fallback_top1: true };
            let got = survivors(&sims, &cfg);
            let by_threshold: Vec<usize> =
                (0..sims.len()).filter(|&i| sims[i] >= delta).collect();
            if by_threshold.is_empty() {
                prop_assert_eq!(got.len(), 1);
                let best = got[0];
                for (i, &s) in sims.iter().enumerate() {
                    prop_assert!(s < sims[best] || (s == sims[best] && i >= best));
                }
            } else {
                prop_assert_eq!(got, by_threshold);
            }
        }
    }

    #[test]
    fn randomized_filter_is_deterministic() {
        let mut rng = SplitMix64::new(5);
        for _ in 0..50 {
            let n = 1 + (rng.next_below(8) as usize);
            let sims: Vec<f64> =
                (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            let delta = rng.next_f64() * 2.0 - 1.0;
            let cfg = FilterConfig { delta, fallback_top1: true };
            assert_eq!(survivors(&sims, &cfg), survivors(&sims, &cfg));
        }
    }
}
