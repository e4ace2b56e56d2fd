use std::time::Instant;

use cpgnn_core::decoder::DecoderConfig;
use cpgnn_core::encoder::EncoderConfig;
use cpgnn_core::kg::{sample_edge_dropout, KnowledgeGraph, Triple};
use cpgnn_core::optim::OptimizerKind;
use cpgnn_core::proximity::{accumulate_spm, build_proximity_graph, extract_qa_pairs, ProximityGraph};
use cpgnn_core::synthetic::toy_kg;
use cpgnn_core::train::{TrainConfig, Trainer};

fn toy() -> (KnowledgeGraph, ProximityGraph) {
    let raw = toy_kg();
    let spm = accumulate_spm(&extract_qa_pairs(&raw), 4).unwrap();
    let g = build_proximity_graph(&spm, 0.5, raw.num_entities()).unwrap();
    (raw.augment_inverse().unwrap(), g)
}

fn small(d: usize) -> (EncoderConfig, DecoderConfig) {
    (EncoderConfig { dim: d, ..EncoderConfig::default() }, DecoderConfig::for_dim(d))
}

#[test]
fn edge_dropout_keeps_binomial_share() {
    let pairs = (0..100u32).flat_map(|i| (0..100u32).filter(move |&j| j != i).map(move |j| Triple::new(i, 0, j)));
    let train: Vec<Triple> = pairs.take(5000).collect();
    let kg = KnowledgeGraph::from_ids(100, 1, train, vec![], vec![]).unwrap().augment_inverse().unwrap();
    assert_eq!(kg.train().len(), 10_000);
    for seed in 0..200 {
        let kept = sample_edge_dropout(&kg, seed, 0.3).unwrap();
        assert!((6500..=7500).contains(&kept.len()), "seed {seed}: {}", kept.len());
        assert!(kept.windows(2).all(|w| w[0] < w[1]) && *kept.last().unwrap() < 10_000);
        assert_eq!(kept, sample_edge_dropout(&kg, seed, 0.3).unwrap());
    }
}

#[test]
fn identical_seeds_give_identical_loss_curves() {
    let (kg, g) = toy();
    let (enc, dec) = small(8);
    for drop in [0.0, 0.3] {
        let cfg = TrainConfig {
            batch_size: 8,
            learning_rate: 0.01,
            epochs: 4,
            edge_drop_rate: drop,
            eval_every: 0,
            seed: 3,
            ..TrainConfig::default()
        };
        let curve = || {
            let mut losses = Vec::new();
            let mut tr = Trainer::new(&kg, Some(&g), enc.clone(), dec.clone(), cfg.clone()).unwrap();
            tr.run(|_, r| {
                losses.push(r.train_loss.to_bits());
                Ok(())
            })
            .unwrap();
            (losses, tr.params().tensors().to_vec())
        };
        assert_eq!(curve(), curve());
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (kg, g) = toy();
    let (enc, dec) = small(8);
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 0.0,
            optimizer,
            epochs: 3,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(&kg, Some(&g), enc.clone(), dec.clone(), cfg).unwrap();
        let before = tr.params().clone();
        tr.run(|_, _| Ok(())).unwrap();
        assert_eq!(tr.params(), &before, "{optimizer}");
    }
}

#[test]
fn epoch_loss_stays_within_clipping_bounds() {
    let (kg, g) = toy();
    let (enc, dec) = small(8);
    let bound = -(1e-7f64).ln();
    for lr in [0.0, 0.5, 2.0] {
        let cfg = TrainConfig {
            batch_size: 16,
            learning_rate: lr,
            optimizer: OptimizerKind::Sgd,
            epochs: 5,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::new(&kg, Some(&g), enc.clone(), dec.clone(), cfg).unwrap();
        tr.run(|_, r| {
            assert!((0.0..=bound).contains(&r.train_loss), "lr {lr}: {}", r.train_loss);
            Ok(())
        })
        .unwrap();
    }
}

#[test]
fn toy_graph_is_memorized() {
    let (kg, g) = toy();
    let enc = EncoderConfig { dim: 16, ..EncoderConfig::default() };
    let mut dec = DecoderConfig::for_dim(16).without_dropout();
    dec.label_smoothing = 0.0;
    let cfg = TrainConfig {
        batch_size: 64,
        learning_rate: 0.01,
        optimizer: OptimizerKind::Adam,
        epochs: 200,
        edge_drop_rate: 0.0,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let mut tr = Trainer::new(&kg, Some(&g), enc, dec, cfg).unwrap();
    let mut last = f64::NAN;
    tr.run(|_, r| {
        last = r.train_loss;
        Ok(())
    })
    .unwrap();
    assert!(last < 0.05, "final loss {last}");
    assert_eq!(tr.train_mrr().unwrap(), 1.0);
    assert!(t0.elapsed().as_secs_f64() < 60.0);
}
