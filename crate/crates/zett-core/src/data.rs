//! Datasets, relation registry and deterministic fold splits.
//!
//! Datasets are JSONL, one example per line, serialized canonically so that
//! saving the same dataset twice produces byte-identical files. Folds
//! partition *relations* (not examples): the protocol is zero-shot, so
//! train/validation/test must not share relation ids, and the split must be a
//! pure function of `(relations, m, v, seed)`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ZettError;
use crate::rng::{shuffle, SplitMix64};
use crate::templates::validate_pattern;
use crate::tokenizer::tokenize;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Triplet {
        Triplet { head: head.into(), relation: relation.into(), tail: tail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Dataset {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn by_id(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Relation ids occurring in any triplet, sorted.
    pub fn relation_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> =
            self.examples.iter().flat_map(|e| e.triplets.iter().map(|t| t.relation.as_str())).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

/// One relation: stable id, display name, natural-language description used
/// by the similarity filter, and an ordered template list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub id: String,
    pub name: String,
    pub description: String,
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    relations: Vec<RelationSpec>,
    index: HashMap<String, usize>,
}

impl Registry {
    /// Validates id uniqueness and every listed template pattern. Relations
    /// may legitimately carry zero templates before template generation runs.
    pub fn new(relations: Vec<RelationSpec>) -> Result<Registry> {
        let mut index = HashMap::with_capacity(relations.len());
        for (i, rel) in relations.iter().enumerate() {
            if rel.id.is_empty() {
                return Err(ZettError::validation("relation with empty id"));
            }
            if index.insert(rel.id.clone(), i).is_some() {
                return Err(ZettError::validation(format!("duplicate relation id {:?}", rel.id)));
            }
            for pattern in &rel.templates {
                validate_pattern(pattern).map_err(|e| {
                    ZettError::validation(format!("relation {:?}: {e}", rel.id))
                })?;
            }
        }
        Ok(Registry { relations, index })
    }

    pub fn get(&self, id: &str) -> Option<&RelationSpec> {
        self.index.get(id).map(|&i| &self.relations[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn relations(&self) -> &[RelationSpec] {
        &self.relations
    }

    pub fn ids(&self) -> Vec<String> {
        self.relations.iter().map(|r| r.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn load(path: &Path) -> Result<Registry> {
        let body =
            std::fs::read_to_string(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
        let relations: Vec<RelationSpec> = serde_json::from_str(&body).map_err(|e| ZettError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Registry::new(relations)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(&self.relations)
            .expect("registry is serializable");
        std::fs::write(path, body + "\n").map_err(|e| ZettError::io(path.display().to_string(), e))
    }
}

/// Reads a JSONL dataset and validates it against the registry. Unknown
/// relation ids, duplicate example ids and malformed lines are hard errors
/// with line numbers; entity spans that do not occur in the context are
/// flagged separately by [`scan_flags`], not rejected.
pub fn load_dataset(path: &Path, registry: &Registry) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| ZettError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| ZettError::Parse {
            path: path.display().to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen_ids.insert(ex.id.clone()) {
            return Err(ZettError::validation(format!(
                "duplicate example id {:?} at {} line {}",
                ex.id,
                path.display(),
                lineno
            )));
        }
        for t in &ex.triplets {
            if !registry.contains(&t.relation) {
                return Err(ZettError::validation(format!(
                    "unknown relation id {:?} in example {:?} at {} line {}",
                    t.relation,
                    ex.id,
                    path.display(),
                    lineno
                )));
            }
        }
        examples.push(ex);
    }
    Ok(Dataset::new(examples))
}

/// Writes the dataset canonically: one compact JSON object per line in
/// example order, each line newline-terminated. An empty dataset is an empty
/// file.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for ex in &dataset.examples {
        serde_json::to_writer(&mut out, ex).expect("example is serializable");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
    file.write_all(&out).map_err(|e| ZettError::io(path.display().to_string(), e))
}

/// A distant-supervision style annotation problem: the gold entity does not
/// occur verbatim in its context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataFlag {
    pub example_id: String,
    pub entity: String,
}

/// Flags gold entities that are not token subsequences of their context.
pub fn scan_flags(dataset: &Dataset) -> Vec<DataFlag> {
    let mut flags = Vec::new();
    for ex in &dataset.examples {
        let ctx = tokenize(&ex.text);
        for t in &ex.triplets {
            for entity in [&t.head, &t.tail] {
                if !contains_subsequence(&ctx, &tokenize(entity)) {
                    flags.push(DataFlag { example_id: ex.id.clone(), entity: entity.clone() });
                }
            }
        }
    }
    flags
}

pub(crate) fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Restricts every example to triplets whose relation is in `keep` and drops
/// examples left with none. Input is untouched; projection is monotone in
/// `keep` and projecting onto all relations is the identity.
pub fn project(dataset: &Dataset, keep: &HashSet<String>) -> Dataset {
    let examples = dataset
        .examples
        .iter()
        .filter_map(|ex| {
            let triplets: Vec<Triplet> =
                ex.triplets.iter().filter(|t| keep.contains(&t.relation)).cloned().collect();
            if triplets.is_empty() {
                None
            } else {
                Some(Example { id: ex.id.clone(), text: ex.text.clone(), triplets })
            }
        })
        .collect();
    Dataset::new(examples)
}

/// A relation-level split. Field order matches the on-disk format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub seed: u64,
    pub m: usize,
    pub v: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSpec {
    pub fn train_set(&self) -> HashSet<String> {
        self.train.iter().cloned().collect()
    }

    pub fn validation_set(&self) -> HashSet<String> {
        self.validation.iter().cloned().collect()
    }

    pub fn test_set(&self) -> HashSet<String> {
        self.test.iter().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("fold is serializable");
        std::fs::write(path, body + "\n").map_err(|e| ZettError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<FoldSpec> {
        let body =
            std::fs::read_to_string(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
        let fold: FoldSpec = serde_json::from_str(&body).map_err(|e| ZettError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        fold.validate()?;
        Ok(fold)
    }

    pub fn validate(&self) -> Result<()> {
        if self.test.len() != self.m || self.validation.len() != self.v {
            return Err(ZettError::validation(format!(
                "fold sizes disagree with m={} v={}: |test|={} |validation|={}",
                self.m,
                self.v,
                self.test.len(),
                self.validation.len()
            )));
        }
        let mut all: Vec<&String> =
            self.train.iter().chain(&self.validation).chain(&self.test).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(ZettError::validation("fold segments overlap"));
        }
        Ok(())
    }
}

/// Splits relation ids into train/validation/test with `m` test and `v`
/// validation relations. The ids are sorted lexicographically, shuffled by a
/// SplitMix64 Fisher-Yates seeded directly with `seed` (the published split
/// protocol), then the first `m` become test and the next `v` validation.
/// Output segments are sorted for readability; membership is what matters.
pub fn split_folds(relation_ids: &[String], m: usize, v: usize, seed: u64) -> Result<FoldSpec> {
    let mut ids: Vec<String> = relation_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != relation_ids.len() {
        return Err(ZettError::validation("duplicate relation ids passed to split"));
    }
    if m + v >= ids.len() {
        return Err(ZettError::validation(format!(
            "m + v = {} leaves no training relations out of {}",
            m + v,
            ids.len()
        )));
    }
    let mut rng = SplitMix64::new(seed);
    shuffle(&mut ids, &mut rng);
    let mut test: Vec<String> = ids[..m].to_vec();
    let mut validation: Vec<String> = ids[m..m + v].to_vec();
    let mut train: Vec<String> = ids[m + v..].to_vec();
    test.sort_unstable();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(FoldSpec { seed, m, v, train, validation, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry_abc() -> Registry {
        let rels = ["a", "b", "c"]
            .iter()
            .map(|id| RelationSpec {
                id: id.to_string(),
                name: id.to_string(),
                description: format!("relation {id}"),
                templates: vec![format!("<head> {id} <tail>.")],
            })
            .collect();
        Registry::new(rels).unwrap()
    }

    fn ex(id: &str, text: &str, triplets: &[(&str, &str, &str)]) -> Example {
        Example {
            id: id.to_string(),
            text: text.to_string(),
            triplets: triplets.iter().map(|&(h, r, t)| Triplet::new(h, r, t)).collect(),
        }
    }

    #[test]
    fn load_parses_one_example_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"e1","text":"Nana LaBeach played at the 2006 World Cup .","triplets":[{"head":"Nana LaBeach","relation":"a","tail":"2006 World Cup"}]}
"#,
        )
        .unwrap();
        let ds = load_dataset(&path, &registry_abc()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.examples[0].triplets[0].head, "Nana LaBeach");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, &registry_abc()).unwrap().is_empty());
    }

    #[test]
    fn unknown_relation_is_an_error_naming_id_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"e1\",\"text\":\"x\",\"triplets\":[]}\n{\"id\":\"e2\",\"text\":\"y\",\"triplets\":[{\"head\":\"h\",\"relation\":\"zzz\",\"tail\":\"t\"}]}\n",
        )
        .unwrap();
        let err = load_dataset(&path, &registry_abc()).unwrap_err().to_string();
        assert!(err.contains("zzz"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_example_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"e1\",\"text\":\"x\",\"triplets\":[]}\n{\"id\":\"e1\",\"text\":\"y\",\"triplets\":[]}\n",
        )
        .unwrap();
        assert!(load_dataset(&path, &registry_abc()).is_err());
    }

    #[test]
    fn entities_missing_from_context_are_flagged_not_rejected() {
        let ds = Dataset::new(vec![ex("e1", "alice works at acme .", &[("alice", "a", "globex")])]);
        let flags = scan_flags(&ds);
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].entity, "globex");
    }

    #[test]
    fn save_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let ds = Dataset::new(vec![
            ex("e1", "alice works for acme .", &[("alice", "a", "acme")]),
            ex("e2", "bob founded globex .", &[("bob", "b", "globex")]),
        ]);
        save_dataset(&ds, &p1).unwrap();
        save_dataset(&ds, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = load_dataset(&p1, &registry_abc()).unwrap();
        assert_eq!(back, ds);

        let empty = dir.path().join("empty.jsonl");
        save_dataset(&Dataset::default(), &empty).unwrap();
        assert_eq!(std::fs::read(&empty).unwrap().len(), 0);
    }

    #[test]
    fn projection_examples() {
        let ds = Dataset::new(vec![
            ex("e1", "t", &[("h", "a", "t")]),
            ex("e2", "t", &[("h", "b", "t")]),
            ex("e3", "t", &[("h", "a", "t"), ("h", "b", "t")]),
        ]);
        let keep: HashSet<String> = ["a".to_string()].into();
        let got = project(&ds, &keep);
        assert_eq!(got.len(), 2);
        assert_eq!(got.examples[1].id, "e3");
        assert_eq!(got.examples[1].triplets.len(), 1);

        assert!(project(&ds, &HashSet::new()).is_empty());
        let all: HashSet<String> = ["a".to_string(), "b".to_string()].into();
        assert_eq!(project(&ds, &all), ds);
    }

    #[test]
    fn fold_arithmetic_matches_protocol() {
        let rels80: Vec<String> = (0..80).map(|i| format!("r{i:03}")).collect();
        let fold = split_folds(&rels80, 5, 5, 0).unwrap();
        assert_eq!(fold.train.len(), 70);
        assert_eq!(fold.test.len(), 5);

        let rels113: Vec<String> = (0..113).map(|i| format!("r{i:03}")).collect();
        let fold = split_folds(&rels113, 15, 5, 3).unwrap();
        assert_eq!(fold.train.len(), 93);
    }

    #[test]
    fn folds_are_deterministic_and_disjoint() {
        let rels: Vec<String> = (0..30).map(|i| format!("r{i:02}")).collect();
        let a = split_folds(&rels, 5, 5, 7).unwrap();
        let b = split_folds(&rels, 5, 5, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let c = split_folds(&rels, 5, 5, 8).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn split_rejects_degenerate_sizes() {
        let rels: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        assert!(split_folds(&rels, 5, 5, 0).is_err());
        assert!(split_folds(&rels, 9, 1, 0).is_err());
    }

    #[test]
    fn fold_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fold.json");
        let rels: Vec<String> = (0..20).map(|i| format!("r{i:02}")).collect();
        let fold = split_folds(&rels, 5, 5, 1).unwrap();
        fold.save(&path).unwrap();
        assert_eq!(FoldSpec::load(&path).unwrap(), fold);
    }

    #[test]
    fn registry_rejects_duplicates_and_bad_templates() {
        let dup = vec![
            RelationSpec { id: "a".into(), name: "a".into(), description: String::new(), templates: vec![] },
            RelationSpec { id: "a".into(), name: "a2".into(), description: String::new(), templates: vec![] },
        ];
        assert!(Registry::new(dup).is_err());
        let bad = vec![RelationSpec {
            id: "a".into(),
            name: "a".into(),
            description: String::new(),
            templates: vec!["no placeholders".into()],
        }];
        assert!(Registry::new(bad).is_err());
    }
}
