//! Proximity pattern extraction.
//!
//! Every train triple `(h, r, t)` belongs to two query-answer pairs: the tail
//! query `(h, r, ?)` and the head query `(?, r, t)`. Two entities that co-occur
//! in an answer set `a` receive a proximity of `max(M - |a|, 0) / (M - 2)` from
//! that pair; summing over all pairs gives the statistical proximity `p_ij`.
//! Entity pairs with `p_ij > I` become weighted undirected edges of the
//! proximity graph.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId};

pub const GRAPH_MAGIC: &[u8; 8] = b"CPGPROX\0";
pub const GRAPH_VERSION: u32 = 1;

/// Pairs per accumulation chunk. Fixed so that the summation order, and hence
/// the result bits, do not depend on the thread count.
const SPM_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum ProximityError {
    #[error("answer-set threshold M must be greater than 2, got {0}")]
    InvalidM(usize),
    #[error("answer set size must be at least 2, got {0}")]
    AnswerSetTooSmall(usize),
    #[error("proximity threshold must be non-negative and finite, got {0}")]
    InvalidThreshold(f64),
    #[error("not a proximity graph file (bad magic)")]
    BadMagic,
    #[error("unsupported proximity graph version {0}")]
    Version(u32),
    #[error("corrupt proximity graph: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Direction {
    /// `(?, r, t)`: answers are heads.
    HeadQuery,
    /// `(h, r, ?)`: answers are tails.
    TailQuery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub direction: Direction,
    pub anchor: EntityId,
    pub relation: RelationId,
    /// Sorted, deduplicated, non-empty.
    pub answers: Vec<EntityId>,
}

#[derive(Debug, Clone, Default)]
pub struct QaPairIndex {
    pairs: Vec<QaPair>,
    lookup: HashMap<(Direction, EntityId, RelationId), usize>,
}

impl QaPairIndex {
    pub fn pairs(&self) -> &[QaPair] {
        &self.pairs
    }

    pub fn get(&self, direction: Direction, anchor: EntityId, relation: RelationId) -> Option<&QaPair> {
        self.lookup
            .get(&(direction, anchor, relation))
            .map(|&i| &self.pairs[i])
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Σ |answers| over all pairs; twice the raw train size.
    pub fn total_answers(&self) -> usize {
        self.pairs.iter().map(|p| p.answers.len()).sum()
    }
}

/// Groups the raw (un-augmented) train triples into query-answer pairs.
pub fn extract_qa_pairs(kg: &KnowledgeGraph) -> QaPairIndex {
    let mut groups: BTreeMap<(Direction, EntityId, RelationId), Vec<EntityId>> = BTreeMap::new();
    for t in kg.raw_train() {
        groups
            .entry((Direction::TailQuery, t.head, t.relation))
            .or_default()
            .push(t.tail);
        groups
            .entry((Direction::HeadQuery, t.tail, t.relation))
            .or_default()
            .push(t.head);
    }
    let mut index = QaPairIndex::default();
    for ((direction, anchor, relation), mut answers) in groups {
        answers.sort_unstable();
        answers.dedup();
        index.lookup.insert((direction, anchor, relation), index.pairs.len());
        index.pairs.push(QaPair {
            direction,
            anchor,
            relation,
            answers,
        });
    }
    index
}

fn check_m(m: usize) -> Result<(), ProximityError> {
    if m <= 2 {
        Err(ProximityError::InvalidM(m))
    } else {
        Ok(())
    }
}

/// Proximity contributed to each answer pair by one answer set of the given size.
pub fn pm(m: usize, answer_set_size: usize) -> Result<f64, ProximityError> {
    check_m(m)?;
    if answer_set_size < 2 {
        return Err(ProximityError::AnswerSetTooSmall(answer_set_size));
    }
    Ok(m.saturating_sub(answer_set_size) as f64 / (m - 2) as f64)
}

/// Sparse symmetric matrix of accumulated proximity, keyed by `(min, max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpmMatrix {
    entries: HashMap<(EntityId, EntityId), f64>,
    m: usize,
}

fn key(i: EntityId, j: EntityId) -> (EntityId, EntityId) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl SpmMatrix {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: EntityId, j: EntityId) -> f64 {
        self.entries.get(&key(i, j)).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries `(i, j, p_ij)` with `i < j`, sorted.
    pub fn sorted_entries(&self) -> Vec<(EntityId, EntityId, f64)> {
        let mut v: Vec<_> = self.entries.iter().map(|(&(i, j), &p)| (i, j, p)).collect();
        v.sort_unstable_by_key(|&(i, j, _)| (i, j));
        v
    }

    pub fn max_value(&self) -> Option<f64> {
        self.entries.values().copied().reduce(f64::max)
    }
}

/// Sums per-pair proximity over all QA pairs. Answer sets of size `>= M`
/// contribute zero and are skipped before their pairs are enumerated.
pub fn accumulate_spm(index: &QaPairIndex, m: usize) -> Result<SpmMatrix, ProximityError> {
    check_m(m)?;
    let denom = (m - 2) as f64;
    let contributing: Vec<&QaPair> = index
        .pairs()
        .iter()
        .filter(|p| p.answers.len() >= 2 && p.answers.len() < m)
        .collect();
    let partials: Vec<HashMap<(EntityId, EntityId), f64>> = contributing
        .par_chunks(SPM_CHUNK)
        .map(|chunk| {
            let mut local = HashMap::new();
            for pair in chunk {
                let value = (m - pair.answers.len()) as f64 / denom;
                let a = &pair.answers;
                for x in 0..a.len() {
                    for y in x + 1..a.len() {
                        // answers are sorted, so (a[x], a[y]) is already (min, max)
                        *local.entry((a[x], a[y])).or_insert(0.0) += value;
                    }
                }
            }
            local
        })
        .collect();
    let mut entries: HashMap<(EntityId, EntityId), f64> = HashMap::new();
    for partial in partials {
        if entries.is_empty() {
            entries = partial;
            continue;
        }
        // Merge in key order so the floating-point sum is reproducible.
        let mut items: Vec<_> = partial.into_iter().collect();
        items.sort_unstable_by_key(|&(k, _)| k);
        for (k, v) in items {
            *entries.entry(k).or_insert(0.0) += v;
        }
    }
    Ok(SpmMatrix { entries, m })
}

/// Undirected weighted graph over entities with an edge wherever `p_ij > I`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityGraph {
    adjacency: Vec<Vec<(EntityId, f64)>>,
    threshold: f64,
    m: usize,
}

pub fn build_proximity_graph(
    spm: &SpmMatrix,
    threshold: f64,
    n_entities: usize,
) -> Result<ProximityGraph, ProximityError> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(ProximityError::InvalidThreshold(threshold));
    }
    let mut adjacency = vec![Vec::new(); n_entities];
    for (i, j, p) in spm.sorted_entries() {
        if p > threshold {
            adjacency[i.index()].push((j, p));
            adjacency[j.index()].push((i, p));
        }
    }
    for list in &mut adjacency {
        list.sort_unstable_by_key(|&(e, _)| e);
    }
    Ok(ProximityGraph {
        adjacency,
        threshold,
        m: spm.m,
    })
}

impl ProximityGraph {
    /// Graph with no edges.
    pub fn empty(n_entities: usize, threshold: f64, m: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); n_entities],
            threshold,
            m,
        }
    }

    /// Builds a graph from undirected edges `(i, j, w)`; used by loaders and tests.
    pub fn from_edges(
        n_entities: usize,
        threshold: f64,
        m: usize,
        edges: impl IntoIterator<Item = (EntityId, EntityId, f64)>,
    ) -> Result<Self, ProximityError> {
        let mut adjacency = vec![Vec::new(); n_entities];
        for (i, j, w) in edges {
            if i == j || i.index() >= n_entities || j.index() >= n_entities {
                return Err(ProximityError::Corrupt(format!("bad edge ({i}, {j})")));
            }
            adjacency[i.index()].push((j, w));
            adjacency[j.index()].push((i, w));
        }
        for list in &mut adjacency {
            list.sort_unstable_by_key(|&(e, _)| e);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(ProximityError::Corrupt("duplicate edge".into()));
            }
        }
        Ok(Self {
            adjacency,
            threshold,
            m,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.adjacency.len()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn neighbors(&self, e: EntityId) -> &[(EntityId, f64)] {
        &self.adjacency[e.index()]
    }

    pub fn degree(&self, e: EntityId) -> usize {
        self.adjacency[e.index()].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges `(i, j, w)` with `i < j`, sorted by `(i, j)`.
    pub fn edges(&self) -> impl Iterator<Item = (EntityId, EntityId, f64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(i, list)| {
            let i = EntityId(i as u32);
            list.iter().filter(move |(j, _)| i < *j).map(move |&(j, w)| (i, j, w))
        })
    }

    /// Copy of the graph with each weight replaced by `f(i, j, w)`.
    pub fn map_weights(&self, mut f: impl FnMut(EntityId, EntityId, f64) -> f64) -> Self {
        let edges: Vec<_> = self.edges().map(|(i, j, w)| (i, j, f(i, j, w))).collect();
        Self::from_edges(self.num_entities(), self.threshold, self.m, edges).expect("valid edges")
    }

    /// Binary form: header (magic, version, n_e, I, M, edge count) followed
    /// by little-endian `(u32 i, u32 j, f64 w)` records with `i < j`, sorted.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), ProximityError> {
        w.write_all(GRAPH_MAGIC)?;
        w.write_all(&GRAPH_VERSION.to_le_bytes())?;
        w.write_all(&(self.num_entities() as u64).to_le_bytes())?;
        w.write_all(&self.threshold.to_le_bytes())?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&(self.edge_count() as u64).to_le_bytes())?;
        for (i, j, weight) in self.edges() {
            w.write_all(&i.0.to_le_bytes())?;
            w.write_all(&j.0.to_le_bytes())?;
            w.write_all(&weight.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, ProximityError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRAPH_MAGIC {
            return Err(ProximityError::BadMagic);
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != GRAPH_VERSION {
            return Err(ProximityError::Version(version));
        }
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let threshold = f64::from_le_bytes(read_array(&mut r)?);
        let m = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut edges = Vec::with_capacity(count.min(1 << 24));
        let mut prev: Option<(EntityId, EntityId)> = None;
        for _ in 0..count {
            let i = EntityId(u32::from_le_bytes(read_array(&mut r)?));
            let j = EntityId(u32::from_le_bytes(read_array(&mut r)?));
            let w = f64::from_le_bytes(read_array(&mut r)?);
            if i >= j || prev.is_some_and(|p| p >= (i, j)) {
                return Err(ProximityError::Corrupt("records not sorted with i < j".into()));
            }
            prev = Some((i, j));
            edges.push((i, j, w));
        }
        Self::from_edges(n, threshold, m, edges)
    }

    /// `i<TAB>j<TAB>weight` per undirected edge, `i < j`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, j, weight) in self.edges() {
            writeln!(w, "{}\t{}\t{}", i.0, j.0, weight)?;
        }
        Ok(())
    }
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightQuantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProximityStats {
    pub n_entities: usize,
    pub edge_count: usize,
    pub isolated: usize,
    /// degree → number of entities with that degree
    pub degree_histogram: BTreeMap<usize, usize>,
    pub weights: Option<WeightQuantiles>,
    pub threshold: f64,
    pub m: usize,
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

pub fn proximity_stats(graph: &ProximityGraph) -> ProximityStats {
    let mut degree_histogram = BTreeMap::new();
    for list in &graph.adjacency {
        *degree_histogram.entry(list.len()).or_insert(0) += 1;
    }
    let mut w: Vec<f64> = graph.edges().map(|(_, _, w)| w).collect();
    w.sort_unstable_by(f64::total_cmp);
    let weights = (!w.is_empty()).then(|| WeightQuantiles {
        min: w[0],
        q25: quantile(&w, 0.25),
        median: quantile(&w, 0.5),
        q75: quantile(&w, 0.75),
        max: w[w.len() - 1],
    });
    ProximityStats {
        n_entities: graph.num_entities(),
        edge_count: graph.edge_count(),
        isolated: degree_histogram.get(&0).copied().unwrap_or(0),
        degree_histogram,
        weights,
        threshold: graph.threshold,
        m: graph.m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{ingest_strs, Triple};

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }

    fn index_of(pairs: Vec<Vec<u32>>) -> QaPairIndex {
        let mut idx = QaPairIndex::default();
        for (k, answers) in pairs.into_iter().enumerate() {
            idx.lookup.insert((Direction::TailQuery, e(100), RelationId(k as u32)), k);
            idx.pairs.push(QaPair {
                direction: Direction::TailQuery,
                anchor: e(100),
                relation: RelationId(k as u32),
                answers: answers.into_iter().map(EntityId).collect(),
            });
        }
        idx
    }

    #[test]
    fn qa_pairs_from_two_triples() {
        let (kg, _) = ingest_strs("a\tr\tb\na\tr\tc\n", "", "").unwrap();
        let idx = extract_qa_pairs(&kg);
        let (a, b, c, r) = (e(0), e(1), e(2), RelationId(0));
        assert_eq!(idx.get(Direction::TailQuery, a, r).unwrap().answers, vec![b, c]);
        assert_eq!(idx.get(Direction::HeadQuery, b, r).unwrap().answers, vec![a]);
        assert_eq!(idx.get(Direction::HeadQuery, c, r).unwrap().answers, vec![a]);
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.total_answers(), 4);
    }

    #[test]
    fn qa_pairs_single_triple() {
        let (kg, _) = ingest_strs("a\tr\tb\n", "", "").unwrap();
        let idx = extract_qa_pairs(&kg);
        assert_eq!(idx.len(), 2);
        assert!(idx.pairs().iter().all(|p| p.answers.len() == 1));
    }

    #[test]
    fn qa_pairs_ignore_inverse_edges() {
        let (kg, _) = ingest_strs("a\tr\tb\na\tr\tc\n", "", "").unwrap();
        let aug = kg.augment_inverse().unwrap();
        assert_eq!(extract_qa_pairs(&aug).total_answers(), 4);
    }

    #[test]
    fn pm_values() {
        for m in [3, 4, 25, 50, 500] {
            assert_eq!(pm(m, 2).unwrap(), 1.0);
        }
        assert_eq!(pm(50, 50).unwrap(), 0.0);
        assert_eq!(pm(50, 400).unwrap(), 0.0);
        assert_eq!(pm(50, 26).unwrap(), 0.5);
        assert!(matches!(pm(2, 2), Err(ProximityError::InvalidM(2))));
        assert!(pm(10, 1).is_err());
    }

    #[test]
    fn spm_toy_example() {
        let idx = index_of(vec![vec![0, 1], vec![0, 1, 2]]);
        let spm = accumulate_spm(&idx, 4).unwrap();
        assert_eq!(spm.get(e(0), e(1)), 1.5);
        assert_eq!(spm.get(e(0), e(2)), 0.5);
        assert_eq!(spm.get(e(1), e(2)), 0.5);
        assert_eq!(spm.get(e(2), e(1)), 0.5);
        assert_eq!(spm.len(), 3);
    }

    #[test]
    fn spm_singletons_and_large_sets_are_empty() {
        let idx = index_of(vec![vec![3]]);
        assert!(accumulate_spm(&idx, 10).unwrap().is_empty());
        let idx = index_of(vec![(0..5).collect()]);
        assert!(accumulate_spm(&idx, 5).unwrap().is_empty());
    }

    #[test]
    fn graph_threshold_is_strict() {
        let idx = index_of(vec![vec![0, 1], vec![0, 1, 2]]);
        let spm = accumulate_spm(&idx, 4).unwrap();
        let g = build_proximity_graph(&spm, 1.0, 3).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(e(0), e(1), 1.5)]);

        let single = index_of(vec![vec![0, 1, 2]]);
        let spm = accumulate_spm(&single, 4).unwrap();
        assert_eq!(spm.get(e(0), e(1)), 0.5);
        let g = build_proximity_graph(&spm, 0.5, 3).unwrap();
        assert_eq!(g.edge_count(), 0);

        let empty = accumulate_spm(&QaPairIndex::default(), 4).unwrap();
        assert_eq!(build_proximity_graph(&empty, 0.0, 3).unwrap().edge_count(), 0);
        assert!(build_proximity_graph(&empty, -1.0, 3).is_err());
    }

    #[test]
    fn stats_of_toy_graph() {
        let idx = index_of(vec![vec![0, 1], vec![0, 1, 2]]);
        let spm = accumulate_spm(&idx, 4).unwrap();
        let g = build_proximity_graph(&spm, 1.0, 3).unwrap();
        let s = proximity_stats(&g);
        assert_eq!(s.edge_count, 1);
        assert_eq!((g.degree(e(0)), g.degree(e(1)), g.degree(e(2))), (1, 1, 0));
        assert_eq!(s.isolated, 1);
        assert_eq!(s.degree_histogram, BTreeMap::from([(0, 1), (1, 2)]));
        assert_eq!(s.weights.unwrap().median, 1.5);
    }

    #[test]
    fn stats_of_empty_graph() {
        let g = ProximityGraph::empty(5, 1.0, 50);
        let s = proximity_stats(&g);
        assert_eq!(s.edge_count, 0);
        assert_eq!(s.isolated, 5);
        assert!(s.weights.is_none());
    }

    #[test]
    fn binary_round_trip_and_rejects_garbage() {
        let g = ProximityGraph::from_edges(4, 0.5, 25, [(e(0), e(3), 2.5), (e(1), e(2), 0.75)]).unwrap();
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 * 4 + 2 * 16);
        assert_eq!(ProximityGraph::read_binary(buf.as_slice()).unwrap(), g);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(ProximityGraph::read_binary(bad.as_slice()), Err(ProximityError::BadMagic)));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(ProximityGraph::read_binary(bad.as_slice()), Err(ProximityError::Version(9))));
        assert!(ProximityGraph::read_binary(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn tsv_export() {
        let g = ProximityGraph::from_edges(4, 0.5, 25, [(e(3), e(0), 2.5), (e(1), e(2), 0.75)]).unwrap();
        let mut out = Vec::new();
        g.write_tsv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0\t3\t2.5\n1\t2\t0.75\n");
    }

    #[test]
    fn graph_from_kg_end_to_end() {
        // (x, r, ?) -> {a, b}; (y, r, ?) -> {a, b, c}
        let train: Vec<Triple> = vec![
            Triple::new(0, 0, 2),
            Triple::new(0, 0, 3),
            Triple::new(1, 0, 2),
            Triple::new(1, 0, 3),
            Triple::new(1, 0, 4),
        ];
        let kg = KnowledgeGraph::from_ids(5, 1, train, vec![], vec![]).unwrap();
        let spm = accumulate_spm(&extract_qa_pairs(&kg), 4).unwrap();
        // answer sets: {2,3} (1.0), {2,3,4} (0.5); head queries {0,1} for 2 and 3 (1.0 each)
        assert_eq!(spm.get(e(2), e(3)), 1.5);
        assert_eq!(spm.get(e(0), e(1)), 2.0);
        assert_eq!(spm.get(e(2), e(4)), 0.5);
    }
}
