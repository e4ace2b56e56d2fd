//! 1-N query batches: each unique `(anchor, relation)` of the augmented train
//! split is scored against all entities with a multi-hot target row.

use std::collections::BTreeMap;

use cpgnn_autodiff::{splitmix64, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kg::{KgError, KnowledgeGraph};

#[derive(Debug, Clone)]
pub struct QueryPlan {
    queries: Vec<(usize, usize)>,
    answers: Vec<Vec<usize>>,
    n_entities: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub anchors: Vec<usize>,
    pub relations: Vec<usize>,
    /// `[batch, n_e]`, smoothed multi-hot.
    pub targets: Tensor,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

impl QueryPlan {
    /// Unique tail queries of the augmented train split, sorted by
    /// `(anchor, relation)`, with their sorted answer lists.
    pub fn from_kg(kg: &KnowledgeGraph) -> Result<Self, KgError> {
        if !kg.is_augmented() {
            return Err(KgError::NotAugmented);
        }
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for t in kg.train() {
            map.entry((t.head.index(), t.relation.index()))
                .or_default()
                .push(t.tail.index());
        }
        let (queries, answers) = map
            .into_iter()
            .map(|(q, mut a)| {
                a.sort_unstable();
                a.dedup();
                (q, a)
            })
            .unzip();
        Ok(Self {
            queries,
            answers,
            n_entities: kg.num_entities(),
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[(usize, usize)] {
        &self.queries
    }

    pub fn answers(&self, i: usize) -> &[usize] {
        &self.answers[i]
    }

    /// Query order for one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch)));
        order.shuffle(&mut rng);
        order
    }

    /// Batch of the given query indices with targets `(1 - ε)·t + ε/n_e`.
    pub fn batch(&self, indices: &[usize], label_smoothing: Real) -> QueryBatch {
        let n = self.n_entities;
        let floor = label_smoothing / n as Real;
        let hit = (1.0 - label_smoothing) + floor;
        let mut targets = Tensor::full(&[indices.len(), n], floor);
        let data = targets.data_mut();
        for (row, &q) in indices.iter().enumerate() {
            for &a in &self.answers[q] {
                data[row * n + a] = hit;
            }
        }
        QueryBatch {
            anchors: indices.iter().map(|&q| self.queries[q].0).collect(),
            relations: indices.iter().map(|&q| self.queries[q].1).collect(),
            targets,
        }
    }

    /// All batches of one epoch in shuffled order; the last may be short.
    pub fn epoch_batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        label_smoothing: Real,
    ) -> impl Iterator<Item = QueryBatch> + '_ {
        let order = self.epoch_order(seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c, label_smoothing))
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.queries.len().div_ceil(batch_size.max(1))
    }
}
