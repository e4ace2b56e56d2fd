//! Small generated knowledge graphs for tests and demonstrations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{KnowledgeGraph, Triple, Vocab};

/// Fixed toy graph: 8 entities, 3 relations, 20 train triples, plus two valid
/// and two test triples.
pub fn toy_kg() -> KnowledgeGraph {
    let train = [
        (0, 0, 1),
        (0, 0, 2),
        (0, 0, 3),
        (1, 0, 2),
        (1, 1, 4),
        (2, 1, 4),
        (3, 1, 4),
        (4, 2, 5),
        (4, 2, 6),
        (5, 0, 6),
        (5, 1, 7),
        (6, 1, 7),
        (7, 2, 0),
        (7, 0, 1),
        (2, 2, 5),
        (3, 2, 6),
        (6, 0, 3),
        (1, 2, 7),
        (0, 1, 5),
        (2, 0, 7),
    ];
    let valid = [(3, 0, 2), (5, 2, 6)];
    let test = [(1, 0, 3), (6, 1, 4)];
    let to = |v: &[(u32, u32, u32)]| v.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect::<Vec<_>>();
    KnowledgeGraph::from_ids(8, 3, to(&train), to(&valid), to(&test)).expect("disjoint splits")
}

/// Parameters of [`clustered_kg`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub cluster_size: usize,
    pub hubs: usize,
    /// Hub relations; each hub asks one query per hub relation.
    pub hub_relations: usize,
    /// Inclusive range of answers per hub query, drawn from one cluster.
    pub query_size: (usize, usize),
    /// Probability that a hub answer is replaced by a uniformly random
    /// member of any cluster.
    pub noise: f64,
    /// Attribute entities per cluster, linked to every member by the
    /// held-out relation.
    pub attributes_per_cluster: usize,
    /// When set, all attributes of a cluster share one member order and
    /// attribute `a` starts its train window `a * cluster_size / attributes`
    /// positions later, so a member held out for one attribute is usually
    /// trained on for another.
    pub rotate_attributes: bool,
    /// Fractions of held-out facts placed in train and valid; the rest is test.
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 8,
            cluster_size: 30,
            hubs: 48,
            hub_relations: 4,
            query_size: (10, 18),
            noise: 0.0,
            attributes_per_cluster: 1,
            rotate_attributes: false,
            train_fraction: 0.5,
            valid_fraction: 0.1,
        }
    }
}

impl ClusterSpec {
    pub fn num_entities(&self) -> usize {
        self.clusters * (self.cluster_size + self.attributes_per_cluster) + self.hubs
    }

    /// Id of the held-out relation.
    pub fn held_out_relation(&self) -> u32 {
        self.hub_relations as u32
    }
}

/// Clustered graph: hubs ask queries whose answer sets are random subsets of
/// a single cluster, so members of a cluster co-occur in answer sets. A
/// held-out relation links each cluster's attribute entities to the cluster
/// members; part of those facts are trained on and the rest are evaluated.
///
/// Entity ids: members first (cluster-major), then hubs, then attributes.
pub fn clustered_kg(spec: &ClusterSpec, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = spec.clusters * spec.cluster_size;
    let hub0 = members;
    let attr0 = hub0 + spec.hubs;
    let member = |c: usize, i: usize| (c * spec.cluster_size + i) as u32;

    let mut entities = Vocab::default();
    for c in 0..spec.clusters {
        for i in 0..spec.cluster_size {
            entities.intern(&format!("c{c}_m{i}"));
        }
    }
    for h in 0..spec.hubs {
        entities.intern(&format!("hub{h}"));
    }
    for c in 0..spec.clusters {
        for a in 0..spec.attributes_per_cluster {
            entities.intern(&format!("c{c}_attr{a}"));
        }
    }
    let mut relations = Vocab::default();
    for k in 0..spec.hub_relations {
        relations.intern(&format!("asks{k}"));
    }
    relations.intern("has_member");

    let mut train = Vec::new();
    let ids: Vec<usize> = (0..spec.cluster_size).collect();
    for h in 0..spec.hubs {
        for k in 0..spec.hub_relations {
            let c = rng.gen_range(0..spec.clusters);
            let size = rng
                .gen_range(spec.query_size.0..=spec.query_size.1)
                .min(spec.cluster_size);
            let mut answers: Vec<u32> = ids.choose_multiple(&mut rng, size).map(|&i| member(c, i)).collect();
            for a in answers.iter_mut() {
                if rng.gen::<f64>() < spec.noise {
                    *a = rng.gen_range(0..members) as u32;
                }
            }
            answers.sort_unstable();
            answers.dedup();
            for a in answers {
                train.push(Triple::new((hub0 + h) as u32, k as u32, a));
            }
        }
    }
    let (mut valid, mut test) = (Vec::new(), Vec::new());
    let rel = spec.held_out_relation();
    for c in 0..spec.clusters {
        let mut shared = ids.clone();
        if spec.rotate_attributes {
            shared.shuffle(&mut rng);
        }
        for a in 0..spec.attributes_per_cluster {
            let attr = (attr0 + c * spec.attributes_per_cluster + a) as u32;
            let mut order = shared.clone();
            if spec.rotate_attributes {
                order.rotate_left(a * spec.cluster_size / spec.attributes_per_cluster);
            } else {
                order.shuffle(&mut rng);
            }
            let n_train = (spec.train_fraction * spec.cluster_size as f64).round() as usize;
            let n_valid = (spec.valid_fraction * spec.cluster_size as f64).round() as usize;
            for (pos, &i) in order.iter().enumerate() {
                let t = Triple::new(attr, rel, member(c, i));
                if pos < n_train {
                    train.push(t);
                } else if pos < n_train + n_valid {
                    valid.push(t);
                } else {
                    test.push(t);
                }
            }
        }
    }
    KnowledgeGraph::from_parts(entities, relations, train, valid, test).expect("generated splits are disjoint")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shape() {
        let kg = toy_kg();
        assert_eq!((kg.num_entities(), kg.num_relations(), kg.train().len()), (8, 3, 20));
    }

    #[test]
    fn clustered_shape_and_determinism() {
        let spec = ClusterSpec::default();
        let a = clustered_kg(&spec, 1);
        assert_eq!(a.num_entities(), spec.num_entities());
        assert_eq!(a.num_relations(), 5);
        assert_eq!(a.train(), clustered_kg(&spec, 1).train());
        assert_ne!(a.train(), clustered_kg(&spec, 2).train());
        assert!(a.test().iter().all(|t| t.relation.0 == spec.held_out_relation()));
    }
}
