//! Triple ingestion, vocabulary interning and the graph transforms applied
//! before training (inverse-edge augmentation, per-batch edge dropout).

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Suffix appended to a relation name to form its inverse.
pub const INVERSE_SUFFIX: &str = "_reverse";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    Malformed {
        path: String,
        line: usize,
        found: usize,
    },
    #[error("{path}:{line}: duplicate triple within split")]
    Duplicate { path: String, line: usize },
    #[error("triple {triple} appears in both {a} and {b} splits")]
    SplitOverlap {
        triple: String,
        a: &'static str,
        b: &'static str,
    },
    #[error("relation name {0:?} collides with the inverse of another relation")]
    InverseNameCollision(String),
    #[error("knowledge graph is already augmented with inverse edges")]
    AlreadyAugmented,
    #[error("operation requires an inverse-augmented knowledge graph")]
    NotAugmented,
    #[error("drop rate {0} outside [0, 1]")]
    DropRate(f64),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Dense string interner. Ids are contiguous from zero in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Immutable triple store with interned vocabularies and split tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    raw_relation_count: usize,
    raw_train_len: usize,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    augmented: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Summary emitted by ingestion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub n_entities: usize,
    pub n_relations: usize,
    pub triples: SplitCounts,
    /// Entities that never occur in train, by the first split they occur in.
    pub unseen_entities_valid: Vec<String>,
    pub unseen_entities_test: Vec<String>,
    pub unseen_relations_valid: Vec<String>,
    pub unseen_relations_test: Vec<String>,
}

struct SplitSource<R> {
    name: String,
    reader: R,
}

fn parse_split<R: BufRead>(
    src: SplitSource<R>,
    entities: &mut Vocab,
    relations: &mut Vocab,
) -> Result<Vec<Triple>, KgError> {
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in src.reader.lines().enumerate() {
        let line = line.map_err(|source| KgError::Io {
            path: src.name.clone(),
            source,
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [h, r, t] = fields[..] else {
            return Err(KgError::Malformed {
                path: src.name.clone(),
                line: i + 1,
                found: fields.len(),
            });
        };
        let triple = Triple {
            head: EntityId(entities.intern(h)),
            relation: RelationId(relations.intern(r)),
            tail: EntityId(entities.intern(t)),
        };
        if !seen.insert(triple) {
            return Err(KgError::Duplicate {
                path: src.name.clone(),
                line: i + 1,
            });
        }
        triples.push(triple);
    }
    Ok(triples)
}

fn open(path: &Path) -> Result<SplitSource<BufReader<File>>, KgError> {
    let file = File::open(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(SplitSource {
        name: path.display().to_string(),
        reader: BufReader::new(file),
    })
}

/// Paths of the three split files of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

impl DatasetPaths {
    /// `<dir>/train.txt`, `<dir>/valid.txt`, `<dir>/test.txt`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            train: dir.join("train.txt"),
            valid: dir.join("valid.txt"),
            test: dir.join("test.txt"),
        }
    }
}

pub fn ingest_dataset(paths: &DatasetPaths) -> Result<(KnowledgeGraph, IngestReport), KgError> {
    KnowledgeGraph::from_sources(open(&paths.train)?, open(&paths.valid)?, open(&paths.test)?)
}

/// Ingests from in-memory TSV text, mainly for fixtures.
pub fn ingest_strs(train: &str, valid: &str, test: &str) -> Result<(KnowledgeGraph, IngestReport), KgError> {
    KnowledgeGraph::from_sources(
        SplitSource {
            name: "train".into(),
            reader: train.as_bytes(),
        },
        SplitSource {
            name: "valid".into(),
            reader: valid.as_bytes(),
        },
        SplitSource {
            name: "test".into(),
            reader: test.as_bytes(),
        },
    )
}

impl KnowledgeGraph {
    fn from_sources<A: BufRead, B: BufRead, C: BufRead>(
        train: SplitSource<A>,
        valid: SplitSource<B>,
        test: SplitSource<C>,
    ) -> Result<(Self, IngestReport), KgError> {
        let mut entities = Vocab::default();
        let mut relations = Vocab::default();
        let train = parse_split(train, &mut entities, &mut relations)?;
        let (n_ent_train, n_rel_train) = (entities.len(), relations.len());
        let valid = parse_split(valid, &mut entities, &mut relations)?;
        let (n_ent_valid, n_rel_valid) = (entities.len(), relations.len());
        let test = parse_split(test, &mut entities, &mut relations)?;

        for name in relations.names() {
            let inverse = format!("{name}{INVERSE_SUFFIX}");
            if relations.get(&inverse).is_some() {
                return Err(KgError::InverseNameCollision(inverse));
            }
        }

        let kg = Self::from_parts(entities, relations, train, valid, test)?;
        let names = |v: &Vocab, range: std::ops::Range<usize>| v.names()[range].to_vec();
        let report = IngestReport {
            n_entities: kg.num_entities(),
            n_relations: kg.num_relations(),
            triples: SplitCounts {
                train: kg.train.len(),
                valid: kg.valid.len(),
                test: kg.test.len(),
            },
            unseen_entities_valid: names(&kg.entities, n_ent_train..n_ent_valid),
            unseen_entities_test: names(&kg.entities, n_ent_valid..kg.entities.len()),
            unseen_relations_valid: names(&kg.relations, n_rel_train..n_rel_valid),
            unseen_relations_test: names(&kg.relations, n_rel_valid..kg.relations.len()),
        };
        Ok((kg, report))
    }

    /// Builds a graph from already-interned parts. Splits must be pairwise
    /// disjoint.
    pub fn from_parts(
        entities: Vocab,
        relations: Vocab,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self, KgError> {
        let train_set: HashSet<&Triple> = train.iter().collect();
        let valid_set: HashSet<&Triple> = valid.iter().collect();
        if let Some(t) = valid.iter().find(|t| train_set.contains(t)) {
            return Err(KgError::SplitOverlap {
                triple: t.to_string(),
                a: "train",
                b: "valid",
            });
        }
        for t in &test {
            if train_set.contains(t) {
                return Err(KgError::SplitOverlap {
                    triple: t.to_string(),
                    a: "train",
                    b: "test",
                });
            }
            if valid_set.contains(t) {
                return Err(KgError::SplitOverlap {
                    triple: t.to_string(),
                    a: "valid",
                    b: "test",
                });
            }
        }
        Ok(Self {
            raw_relation_count: relations.len(),
            raw_train_len: train.len(),
            entities,
            relations,
            train,
            valid,
            test,
            augmented: false,
        })
    }

    /// Builds a graph over anonymous entities `e0..` and relations `r0..`.
    pub fn from_ids(
        n_entities: usize,
        n_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self, KgError> {
        let mut entities = Vocab::default();
        for i in 0..n_entities {
            entities.intern(&format!("e{i}"));
        }
        let mut relations = Vocab::default();
        for i in 0..n_relations {
            relations.intern(&format!("r{i}"));
        }
        Self::from_parts(entities, relations, train, valid, test)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation count, including inverses once augmented.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Relation count before augmentation.
    pub fn num_raw_relations(&self) -> usize {
        self.raw_relation_count
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Train triples, including inverse edges once augmented.
    pub fn train(&self) -> &[Triple] {
        &self.train
    }

    /// Train triples as ingested, without inverse edges.
    pub fn raw_train(&self) -> &[Triple] {
        &self.train[..self.raw_train_len]
    }

    pub fn valid(&self) -> &[Triple] {
        &self.valid
    }

    pub fn test(&self) -> &[Triple] {
        &self.test
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => self.raw_train(),
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Id of the inverse of a raw relation.
    pub fn inverse(&self, r: RelationId) -> RelationId {
        RelationId(r.0 + self.raw_relation_count as u32)
    }

    /// Adds `(t, r⁻¹, h)` for every train triple `(h, r, t)`. Inverse relation
    /// ids occupy `[n_r, 2·n_r)`; valid and test are untouched.
    pub fn augment_inverse(&self) -> Result<Self, KgError> {
        if self.augmented {
            return Err(KgError::AlreadyAugmented);
        }
        let mut kg = self.clone();
        let raw: Vec<String> = kg.relations.names().to_vec();
        for name in raw {
            kg.relations.intern(&format!("{name}{INVERSE_SUFFIX}"));
        }
        debug_assert_eq!(kg.relations.len(), 2 * kg.raw_relation_count);
        let inverses: Vec<Triple> = kg
            .train
            .iter()
            .map(|t| Triple {
                head: t.tail,
                relation: kg.inverse(t.relation),
                tail: t.head,
            })
            .collect();
        kg.train.extend(inverses);
        kg.augmented = true;
        Ok(kg)
    }

    /// Restores the lookup maps after deserialization.
    pub fn reindex(&mut self) {
        self.entities.rebuild_index();
        self.relations.rebuild_index();
    }
}

/// Indices into `kg.train()` kept for one batch's message passing. Each train
/// triple is kept independently with probability `1 - drop_rate`.
pub fn sample_edge_dropout(kg: &KnowledgeGraph, seed: u64, drop_rate: f64) -> Result<Vec<usize>, KgError> {
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(KgError::DropRate(drop_rate));
    }
    if !kg.is_augmented() {
        return Err(KgError::NotAugmented);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..kg.train().len())
        .filter(|_| rng.gen::<f64>() >= drop_rate)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interning_round_trips() {
        let mut v = Vocab::default();
        for name in ["a", "b", "a", "c"] {
            v.intern(name);
        }
        assert_eq!(v.len(), 3);
        for id in 0..3 {
            let name = v.name(id).unwrap().to_owned();
            assert_eq!(v.get(&name), Some(id));
        }
    }

    #[test]
    fn interning_order_is_train_valid_test() {
        let (kg, report) = ingest_strs("x\tr\ty\n", "z\tq\tx\n", "w\tr\tz\n").unwrap();
        assert_eq!(kg.entities().names(), &["x", "y", "z", "w"]);
        assert_eq!(kg.relations().names(), &["r", "q"]);
        assert_eq!(report.unseen_entities_valid, vec!["z"]);
        assert_eq!(report.unseen_entities_test, vec!["w"]);
        assert_eq!(report.unseen_relations_valid, vec!["q"]);
        assert!(report.unseen_relations_test.is_empty());
    }

    #[test]
    fn empty_train_single_test_triple() {
        let (kg, report) = ingest_strs("", "", "a\tr\tb\n").unwrap();
        assert_eq!(kg.num_entities(), 2);
        assert_eq!(kg.num_relations(), 1);
        assert_eq!(kg.train().len(), 0);
        assert_eq!(report.triples.test, 1);
    }

    #[test]
    fn crlf_is_accepted() {
        let (kg, _) = ingest_strs("a\tr\tb\r\nb\tr\tc\r\n", "", "").unwrap();
        assert_eq!(kg.entities().names(), &["a", "b", "c"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = ingest_strs("a\tr\tb\nbroken line\n", "", "").unwrap_err();
        match err {
            KgError::Malformed { line, found, .. } => {
                assert_eq!(line, 2);
                assert_eq!(found, 1);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(ingest_strs("a\tr\tb\tc\n", "", "").is_err());
    }

    #[test]
    fn duplicates_and_overlaps_rejected() {
        assert!(matches!(
            ingest_strs("a\tr\tb\na\tr\tb\n", "", ""),
            Err(KgError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            ingest_strs("a\tr\tb\n", "", "a\tr\tb\n"),
            Err(KgError::SplitOverlap { a: "train", b: "test", .. })
        ));
    }

    #[test]
    fn inverse_name_collision_rejected() {
        let err = ingest_strs("a\tr\tb\na\tr_reverse\tb\n", "", "").unwrap_err();
        assert!(matches!(err, KgError::InverseNameCollision(_)));
    }

    #[test]
    fn augment_single_triple() {
        let (kg, _) = ingest_strs("a\tr0\tb\n", "", "").unwrap();
        let aug = kg.augment_inverse().unwrap();
        assert_eq!(aug.num_relations(), 2);
        assert_eq!(aug.train(), &[Triple::new(0, 0, 1), Triple::new(1, 1, 0)]);
        assert_eq!(aug.relations().name(1), Some("r0_reverse"));
        assert_eq!(aug.raw_train(), kg.train());
        assert!(matches!(aug.augment_inverse(), Err(KgError::AlreadyAugmented)));
    }

    #[test]
    fn augment_empty_train_doubles_relations() {
        let (kg, _) = ingest_strs("", "a\tr\tb\n", "a\tq\tb\n").unwrap();
        let aug = kg.augment_inverse().unwrap();
        assert!(aug.train().is_empty());
        assert_eq!(aug.num_relations(), 4);
        assert_eq!(aug.valid().len(), 1);
    }

    #[test]
    fn dropout_boundaries_and_preconditions() {
        let train: Vec<Triple> = (0..50).map(|i| Triple::new(i % 10, i % 3, (i + 1) % 10)).collect();
        let mut uniq = train.clone();
        uniq.sort();
        uniq.dedup();
        let kg = KnowledgeGraph::from_ids(10, 3, uniq, vec![], vec![]).unwrap();
        assert!(matches!(sample_edge_dropout(&kg, 1, 0.5), Err(KgError::NotAugmented)));
        let kg = kg.augment_inverse().unwrap();
        assert_eq!(sample_edge_dropout(&kg, 1, 0.0).unwrap().len(), kg.train().len());
        assert!(sample_edge_dropout(&kg, 1, 1.0).unwrap().is_empty());
        assert!(sample_edge_dropout(&kg, 1, 1.5).is_err());
    }
}
