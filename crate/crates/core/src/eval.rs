//! Filtered tie-averaged ranking, link prediction metrics and the N-type
//! breakdown by number of train answers.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, Write};

use cpgnn_autodiff::{Real, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target entity {0} is listed among the filtered known answers")]
    TargetFiltered(usize),
    #[error("target entity {target} outside score vector of length {len}")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("evaluation needs an inverse-augmented knowledge graph")]
    NotAugmented,
    #[error("only valid and test splits can be evaluated")]
    TrainSplit,
    #[error("scorer failed: {0}")]
    Scorer(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub target: usize,
    pub upper: usize,
    pub lower: usize,
    pub rank: f64,
    pub filtered: bool,
}

/// Rank of `target` after removing `known_true` from contention. Ties are
/// detected by exact equality and resolved as the mean of the optimistic and
/// pessimistic ranks.
pub fn filtered_rank(scores: &[Real], target: usize, known_true: &[usize]) -> Result<RankResult, EvalError> {
    if target >= scores.len() {
        return Err(EvalError::TargetOutOfRange {
            target,
            len: scores.len(),
        });
    }
    if known_true.contains(&target) {
        return Err(EvalError::TargetFiltered(target));
    }
    let mut excluded = vec![false; scores.len()];
    for &k in known_true {
        if k < excluded.len() {
            excluded[k] = true;
        }
    }
    let s = scores[target];
    let (mut greater, mut equal) = (0, 0);
    for (e, &x) in scores.iter().enumerate() {
        if e == target || excluded[e] {
            continue;
        }
        if x > s {
            greater += 1;
        } else if x == s {
            equal += 1;
        }
    }
    let upper = 1 + greater;
    let lower = upper + equal;
    Ok(RankResult {
        target,
        upper,
        lower,
        rank: (upper + lower) as f64 / 2.0,
        filtered: !known_true.is_empty(),
    })
}

/// All known answers of every tail query `(anchor, relation)` across train,
/// valid and test, with inverse relations covering head queries.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    known: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let n_r = kg.num_raw_relations();
        let mut known: HashMap<(usize, usize), HashSet<usize>> = HashMap::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            for t in kg.split(split) {
                let (h, r, tl) = (t.head.index(), t.relation.index(), t.tail.index());
                known.entry((h, r)).or_default().insert(tl);
                known.entry((tl, r + n_r)).or_default().insert(h);
            }
        }
        Self {
            known: known
                .into_iter()
                .map(|(k, v)| {
                    let mut v: Vec<usize> = v.into_iter().collect();
                    v.sort_unstable();
                    (k, v)
                })
                .collect(),
        }
    }

    pub fn answers(&self, anchor: usize, relation: usize) -> &[usize] {
        self.known.get(&(anchor, relation)).map_or(&[], Vec::as_slice)
    }

    /// Known answers other than `target`.
    pub fn others(&self, anchor: usize, relation: usize, target: usize) -> Vec<usize> {
        self.answers(anchor, relation).iter().copied().filter(|&e| e != target).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryDirection {
    Tail,
    Head,
}

/// One ranked evaluation case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub anchor: usize,
    pub relation: usize,
    pub target: usize,
    pub direction: QueryDirection,
    /// Train answers of this query.
    pub n_train: usize,
    pub rank: f64,
}

/// Both directions of every triple in `split`, as tail queries against the
/// augmented relation set.
pub fn eval_queries(kg: &KnowledgeGraph, split: Split) -> Result<Vec<(usize, usize, usize, QueryDirection)>, EvalError> {
    if !kg.is_augmented() {
        return Err(EvalError::NotAugmented);
    }
    if split == Split::Train {
        return Err(EvalError::TrainSplit);
    }
    let n_r = kg.num_raw_relations();
    Ok(kg
        .split(split)
        .iter()
        .flat_map(|t| {
            let (h, r, tl) = (t.head.index(), t.relation.index(), t.tail.index());
            [(h, r, tl, QueryDirection::Tail), (tl, r + n_r, h, QueryDirection::Head)]
        })
        .collect())
}

/// Train answer counts per augmented tail query.
pub fn train_answer_counts(kg: &KnowledgeGraph) -> HashMap<(usize, usize), usize> {
    let n_r = kg.num_raw_relations();
    let mut sets: HashMap<(usize, usize), HashSet<usize>> = HashMap::new();
    for t in kg.raw_train() {
        let (h, r, tl) = (t.head.index(), t.relation.index(), t.tail.index());
        sets.entry((h, r)).or_default().insert(tl);
        sets.entry((tl, r + n_r)).or_default().insert(h);
    }
    sets.into_iter().map(|(k, v)| (k, v.len())).collect()
}

/// Ranks every case of `split`. `scorer` maps a batch of `(anchor, relation)`
/// queries to a `[batch, n_e]` score matrix.
pub fn rank_split<F>(
    kg: &KnowledgeGraph,
    split: Split,
    filter: &FilterIndex,
    batch_size: usize,
    mut scorer: F,
) -> Result<Vec<EvalCase>, EvalError>
where
    F: FnMut(&[(usize, usize)]) -> Result<Tensor, String>,
{
    let queries = eval_queries(kg, split)?;
    let counts = train_answer_counts(kg);
    let mut cases = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(batch_size.max(1)) {
        let q: Vec<(usize, usize)> = chunk.iter().map(|&(a, r, _, _)| (a, r)).collect();
        let scores = scorer(&q).map_err(EvalError::Scorer)?;
        let ranked: Result<Vec<EvalCase>, EvalError> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, &(anchor, relation, target, direction))| {
                let known = filter.others(anchor, relation, target);
                let r = filtered_rank(scores.row(i), target, &known)?;
                Ok(EvalCase {
                    anchor,
                    relation,
                    target,
                    direction,
                    n_train: counts.get(&(anchor, relation)).copied().unwrap_or(0),
                    rank: r.rank,
                })
            })
            .collect();
        cases.extend(ranked?);
    }
    Ok(cases)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub split: String,
    pub mrr: f64,
    pub mr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
}

impl Metrics {
    pub fn from_ranks(split: &str, ranks: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut rr, mut r, mut h1, mut h3, mut h10) = (0usize, 0.0, 0.0, 0usize, 0usize, 0usize);
        for rank in ranks {
            n += 1;
            rr += 1.0 / rank;
            r += rank;
            h1 += (rank <= 1.0) as usize;
            h3 += (rank <= 3.0) as usize;
            h10 += (rank <= 10.0) as usize;
        }
        let d = n.max(1) as f64;
        Self {
            split: split.to_owned(),
            mrr: rr / d,
            mr: r / d,
            hits1: h1 as f64 / d,
            hits3: h3 as f64 / d,
            hits10: h10 as f64 / d,
            n_queries: n,
        }
    }

    pub fn from_cases(split: &str, cases: &[EvalCase]) -> Self {
        Self::from_ranks(split, cases.iter().map(|c| c.rank))
    }
}

/// Complexity class of a query by its number of train answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NTypeBin {
    Zero,
    One,
    UpTo10,
    UpTo100,
    UpTo500,
    Over500,
}

impl NTypeBin {
    pub const ALL: [NTypeBin; 6] = [
        NTypeBin::Zero,
        NTypeBin::One,
        NTypeBin::UpTo10,
        NTypeBin::UpTo100,
        NTypeBin::UpTo500,
        NTypeBin::Over500,
    ];

    pub fn of(n: usize) -> Self {
        match n {
            0 => Self::Zero,
            1 => Self::One,
            2..=10 => Self::UpTo10,
            11..=100 => Self::UpTo100,
            101..=500 => Self::UpTo500,
            _ => Self::Over500,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Zero => "N=0",
            Self::One => "N=1",
            Self::UpTo10 => "1<N<=10",
            Self::UpTo100 => "10<N<=100",
            Self::UpTo500 => "100<N<=500",
            Self::Over500 => "N>500",
        }
    }
}

impl fmt::Display for NTypeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NTypeRow {
    pub bin: NTypeBin,
    pub label: String,
    pub count: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NTypeReport {
    pub split: String,
    pub rows: Vec<NTypeRow>,
    pub total: usize,
}

impl NTypeReport {
    pub fn count(&self, bin: NTypeBin) -> usize {
        self.rows.iter().find(|r| r.bin == bin).map_or(0, |r| r.count)
    }

    /// TSV with columns `range`, `count`, `rate` (two decimals) and a total row.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "range\tcount\trate")?;
        for r in &self.rows {
            writeln!(w, "{}\t{}\t{:.2}", r.label, r.count, r.rate)?;
        }
        writeln!(w, "total\t{}\t{:.2}", self.total, if self.total > 0 { 1.0 } else { 0.0 })
    }
}

/// Bins both directions of every triple in `split` by train answer count.
pub fn ntype_report(kg: &KnowledgeGraph, split: Split) -> NTypeReport {
    let counts = train_answer_counts(kg);
    let n_r = kg.num_raw_relations();
    let n_of = |k: (usize, usize)| counts.get(&k).copied().unwrap_or(0);
    let mut bins = [0usize; 6];
    for t in kg.split(split) {
        let (h, r, tl) = (t.head.index(), t.relation.index(), t.tail.index());
        bins[NTypeBin::of(n_of((h, r))) as usize] += 1;
        bins[NTypeBin::of(n_of((tl, r + n_r))) as usize] += 1;
    }
    let total: usize = bins.iter().sum();
    NTypeReport {
        split: split.as_str().to_owned(),
        rows: NTypeBin::ALL
            .iter()
            .map(|&bin| NTypeRow {
                bin,
                label: bin.label().to_owned(),
                count: bins[bin as usize],
                rate: if total > 0 { bins[bin as usize] as f64 / total as f64 } else { 0.0 },
            })
            .collect(),
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMrr {
    pub bin: NTypeBin,
    pub label: String,
    pub count: usize,
    pub mrr: f64,
}

/// Per-bin MRR; bins without cases are omitted.
pub fn ntype_mrr_breakdown(cases: &[EvalCase]) -> Vec<BinMrr> {
    let mut acc = [(0usize, 0.0f64); 6];
    for c in cases {
        let a = &mut acc[NTypeBin::of(c.n_train) as usize];
        a.0 += 1;
        a.1 += 1.0 / c.rank;
    }
    NTypeBin::ALL
        .iter()
        .filter(|&&b| acc[b as usize].0 > 0)
        .map(|&bin| {
            let (n, s) = acc[bin as usize];
            BinMrr {
                bin,
                label: bin.label().to_owned(),
                count: n,
                mrr: s / n as f64,
            }
        })
        .collect()
}
