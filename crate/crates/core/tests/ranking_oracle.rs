use std::cmp::Ordering;

use cpgnn_core::eval::{filtered_rank, rank_split, FilterIndex, Metrics, NTypeBin};
use cpgnn_core::autodiff::Tensor;
use cpgnn_core::kg::Split;
use cpgnn_core::synthetic::toy_kg;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sorts the surviving candidates by descending score and reads the first and
/// last position of the target's tie block.
fn sort_oracle(scores: &[f64], target: usize, known: &[usize]) -> (usize, usize, f64) {
    let mut kept: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| *i == target || !known.contains(i))
        .map(|(i, &s)| (s, i))
        .collect();
    kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let s = scores[target];
    let first = kept.iter().position(|&(x, _)| x == s).unwrap() + 1;
    let last = kept.iter().rposition(|&(x, _)| x == s).unwrap() + 1;
    (first, last, (first + last) as f64 / 2.0)
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, Vec<usize>) {
    let n = rng.gen_range(1..=200);
    let levels: Vec<f64> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let tie_rate = [0.0, 0.3, 0.9, 1.0][rng.gen_range(0..4)];
    let mut scores: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < tie_rate {
                *levels.choose(rng).unwrap()
            } else {
                rng.gen_range(-3.0..3.0)
            }
        })
        .collect();
    let target = rng.gen_range(0..n);
    if rng.gen_bool(0.3) {
        let s = scores[target];
        for x in scores.iter_mut().take(n / 2) {
            *x = s;
        }
    }
    let mut known: Vec<usize> = (0..n).filter(|&i| i != target && rng.gen_bool(0.2)).collect();
    known.shuffle(rng);
    (scores, target, known)
}

#[test]
fn matches_sort_oracle_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut tied = 0;
    for _ in 0..1000 {
        let (scores, target, known) = random_case(&mut rng);
        let got = filtered_rank(&scores, target, &known).unwrap();
        let (upper, lower, rank) = sort_oracle(&scores, target, &known);
        assert_eq!((got.upper, got.lower, got.rank), (upper, lower, rank));
        tied += (lower > upper) as usize;
    }
    assert!(tied >= 200, "only {tied} vectors had ties with the target");
}

#[test]
fn rank_split_filters_every_known_answer() {
    let kg = toy_kg().augment_inverse().unwrap();
    let filter = FilterIndex::new(&kg);
    let n_e = kg.num_entities();
    let cases = rank_split(&kg, Split::Test, &filter, 3, |q| Ok(Tensor::from_fn(&[q.len(), n_e], |_| 0.5))).unwrap();
    assert_eq!(cases.len(), 2 * kg.test().len());
    for c in &cases {
        let competitors = n_e - filter.answers(c.anchor, c.relation).len();
        assert_eq!(c.rank, (2 + competitors) as f64 / 2.0);
    }
    let perfect = rank_split(&kg, Split::Test, &filter, 2, |q| {
        let mut t = Tensor::zeros(&[q.len(), n_e]);
        for (i, &(a, r)) in q.iter().enumerate() {
            for &e in filter.answers(a, r) {
                t.data_mut()[i * n_e + e] = 1.0;
            }
        }
        Ok(t)
    })
    .unwrap();
    assert!(perfect.iter().all(|c| c.rank == 1.0));
}

proptest! {
    #[test]
    fn raising_target_never_hurts(scores in prop::collection::vec(-2i32..3, 1..60), t in 0usize..60, bump in 1i32..4) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let t = t % scores.len();
        let before = filtered_rank(&scores, t, &[]).unwrap();
        let mut up = scores.clone();
        up[t] += f64::from(bump);
        prop_assert!(filtered_rank(&up, t, &[]).unwrap().rank <= before.rank);
    }

    #[test]
    fn filtering_never_hurts(scores in prop::collection::vec(-2i32..3, 2..60), t in 0usize..60, mask in prop::collection::vec(any::<bool>(), 60)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let t = t % scores.len();
        let known: Vec<usize> = (0..scores.len()).filter(|&i| i != t && mask[i]).collect();
        let full = filtered_rank(&scores, t, &[]).unwrap();
        let filt = filtered_rank(&scores, t, &known).unwrap();
        prop_assert!(filt.rank <= full.rank);
        prop_assert!(filt.rank >= 1.0 && filt.lower <= scores.len() - known.len());
        let removed_above = known.iter().filter(|&&k| scores[k] > scores[t]).count();
        prop_assert_eq!(full.upper - filt.upper, removed_above);
    }

    #[test]
    fn metrics_are_ordered(ranks in prop::collection::vec(1u32..50, 1..100)) {
        let m = Metrics::from_ranks("test", ranks.iter().map(|&r| f64::from(r)));
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10 && m.hits10 <= 1.0);
        prop_assert!(m.mr >= 1.0 && 1.0 / m.mr <= m.mrr + 1e-12);
        prop_assert_eq!(m.n_queries, ranks.len());
    }

    #[test]
    fn bins_partition_counts(n in 0usize..2000) {
        let b = NTypeBin::of(n);
        let bounds = [(0, 0), (1, 1), (2, 10), (11, 100), (101, 500), (501, usize::MAX)];
        let (lo, hi) = bounds[b as usize];
        prop_assert!(lo <= n && n <= hi);
    }
}
