use cpgnn_core::autodiff::{Tape, Tensor};
use cpgnn_core::decoder::DecoderConfig;
use cpgnn_core::encoder::{encode, Composition, EncoderConfig, ProximityPlan, RelationalAdjacency, WeightScheme};
use cpgnn_core::kg::{EntityId, KnowledgeGraph, Triple};
use cpgnn_core::model::ModelParams;
use cpgnn_core::proximity::ProximityGraph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn matvec(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len()).map(|j| (0..x.len()).map(|i| x[i] * w[i][j]).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Dense re-derivation of one relation-aware layer from its definition.
fn reference_gr(h: &Mat, rel: &Mat, triples: &[(usize, usize, usize)], w: &Mat, comp: Composition, scheme: WeightScheme, mlp: Option<(&Mat, &[f64])>) -> Mat {
    let n = h.len();
    let d = h[0].len();
    let phi = |s: usize, r: usize| -> Vec<f64> {
        match comp {
            Composition::Additive => add(&h[s], &rel[r]),
            Composition::Multiplicative => h[s].iter().zip(&rel[r]).map(|(a, b)| a * b).collect(),
            Composition::Mlp => {
                let (cw, cb) = mlp.unwrap();
                let cat: Vec<f64> = h[s].iter().chain(&rel[r]).copied().collect();
                add(&matvec(&cat, cw), cb).into_iter().map(f64::tanh).collect()
            }
        }
    };
    let outdeg = |e: usize| triples.iter().filter(|t| t.0 == e).count() as f64;
    let indeg = |e: usize| triples.iter().filter(|t| t.2 == e).count() as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let incoming: Vec<&(usize, usize, usize)> = triples.iter().filter(|t| t.2 == i).collect();
        let msgs: Vec<Vec<f64>> = incoming.iter().map(|t| phi(t.0, t.1)).collect();
        let weights: Vec<f64> = match scheme {
            WeightScheme::Prior => incoming.iter().map(|t| 1.0 / outdeg(t.0)).collect(),
            WeightScheme::Gcn => incoming.iter().map(|t| 1.0 / (indeg(i) * outdeg(t.0)).sqrt()).collect(),
            WeightScheme::Attention => {
                let s: Vec<f64> = msgs.iter().map(|m| m.iter().zip(&h[i]).map(|(a, b)| a * b).sum()).collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                s.iter().map(|x| x.exp() / z).collect()
            }
        };
        let mut agg = vec![0.0; d];
        for (m, a) in msgs.iter().zip(&weights) {
            for k in 0..d {
                agg[k] += a * m[k];
            }
        }
        let upd: Vec<f64> = matvec(&agg, w).into_iter().map(f64::tanh).collect();
        out.push(add(&upd, &h[i]));
    }
    out
}

fn reference_gp(h: &Mat, g: &ProximityGraph, w: &Mat) -> Mat {
    (0..h.len())
        .map(|i| {
            let nb = g.neighbors(EntityId(i as u32));
            let d = h[0].len();
            let mut agg = vec![0.0; d];
            if !nb.is_empty() {
                let z: f64 = nb.iter().map(|&(_, p)| p.exp()).sum();
                for &(j, p) in nb {
                    for k in 0..d {
                        agg[k] += p.exp() / z * h[j.index()][k];
                    }
                }
            }
            let upd: Vec<f64> = matvec(&agg, w).into_iter().map(f64::tanh).collect();
            add(&upd, &h[i])
        })
        .collect()
}

struct Fixture {
    kg: KnowledgeGraph,
    prox: ProximityGraph,
}

fn fixture(seed: u64, n_e: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<(u32, u32, u32)> = (0..3 * n_e)
        .map(|_| (rng.gen_range(0..n_e) as u32, rng.gen_range(0..3), rng.gen_range(0..n_e) as u32))
        .filter(|t| t.0 != t.2)
        .collect();
    train.sort_unstable();
    train.dedup();
    let kg = KnowledgeGraph::from_ids(n_e, 3, train.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect(), vec![], vec![])
        .unwrap()
        .augment_inverse()
        .unwrap();
    let mut edges = Vec::new();
    for i in 0..n_e as u32 {
        for j in i + 1..n_e as u32 {
            if rng.gen_bool(0.3) {
                edges.push((EntityId(i), EntityId(j), rng.gen_range(0.6..4.0)));
            }
        }
    }
    let prox = ProximityGraph::from_edges(n_e, 0.5, 10, edges).unwrap();
    Fixture { kg, prox }
}

fn run_encoder(f: &Fixture, params: &ModelParams, enc: &EncoderConfig, prox: &ProximityGraph) -> (Tensor, Tensor) {
    let adj = RelationalAdjacency::from_kg(&f.kg, None);
    let plan = ProximityPlan::new(prox);
    let mut tape = Tape::new();
    let vars = params.insert_constants(&mut tape);
    let out = encode(&mut tape, params.layout(), &vars, &adj, Some(&plan), enc).unwrap();
    (tape.value(out.entities).clone(), tape.value(out.relations).clone())
}

fn config(comp: Composition, scheme: WeightScheme, lr: usize, lp: usize) -> EncoderConfig {
    EncoderConfig {
        dim: 6,
        layers_kg: lr,
        layers_prox: lp,
        composition: comp,
        weight_scheme: scheme,
        ablation_kg_only: false,
    }
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn encoder_matches_dense_reference_for_every_variant() {
    let f = fixture(3, 9);
    let triples: Vec<(usize, usize, usize)> = f.kg.train().iter().map(|t| (t.head.index(), t.relation.index(), t.tail.index())).collect();
    for comp in [Composition::Additive, Composition::Multiplicative, Composition::Mlp] {
        for scheme in [WeightScheme::Prior, WeightScheme::Gcn, WeightScheme::Attention] {
            let enc = config(comp, scheme, 2, 2);
            let params = ModelParams::init(9, f.kg.num_relations(), &enc, &DecoderConfig::for_dim(6), 11).unwrap();
            let (ent, rel) = run_encoder(&f, &params, &enc, &f.prox);
            let get = |n: &str| to_mat(params.get(n).unwrap());
            let r = get("relation");
            let mut h = get("entity");
            for l in 0..2 {
                let cw = (comp == Composition::Mlp).then(|| get(&format!("gr.{l}.comp_w")));
                let cb = (comp == Composition::Mlp).then(|| params.get(&format!("gr.{l}.comp_b")).unwrap().data().to_vec());
                let mlp = cw.as_ref().map(|w| (w, cb.as_deref().unwrap()));
                h = reference_gr(&h, &r, &triples, &get(&format!("gr.{l}.w")), comp, scheme, mlp);
            }
            for l in 0..2 {
                h = reference_gp(&h, &f.prox, &get(&format!("gp.{l}.w")));
            }
            let d = max_diff(&to_mat(&ent), &h);
            assert!(d <= 1e-10, "{comp:?}/{scheme:?}: entity diff {d}");

            let b1 = params.get("rel_mlp.b1").unwrap().data().to_vec();
            let b2 = params.get("rel_mlp.b2").unwrap().data().to_vec();
            let want: Mat = r
                .iter()
                .map(|x| {
                    let hid: Vec<f64> = add(&matvec(x, &get("rel_mlp.w1")), &b1).into_iter().map(f64::tanh).collect();
                    add(&matvec(&hid, &get("rel_mlp.w2")), &b2)
                })
                .collect();
            assert!(max_diff(&to_mat(&rel), &want) <= 1e-10);
        }
    }
}

fn zero_transforms(params: &mut ModelParams) {
    let names: Vec<String> = params.names().iter().filter(|n| n.starts_with("gr.") || n.starts_with("gp.")).cloned().collect();
    for n in names {
        params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn zero_transforms_give_identity() {
    let f = fixture(5, 10);
    for comp in [Composition::Additive, Composition::Multiplicative, Composition::Mlp] {
        let enc = config(comp, WeightScheme::Attention, 3, 3);
        let mut params = ModelParams::init(10, f.kg.num_relations(), &enc, &DecoderConfig::for_dim(6), 1).unwrap();
        zero_transforms(&mut params);
        let (ent, _) = run_encoder(&f, &params, &enc, &f.prox);
        assert!(ent.max_abs_diff(params.get("entity").unwrap()) <= 1e-12);
    }
}

#[test]
fn ablation_ignores_proximity_graph() {
    let f = fixture(8, 10);
    let mut enc = config(Composition::Additive, WeightScheme::Attention, 1, 2);
    enc.ablation_kg_only = true;
    let params = ModelParams::init(10, f.kg.num_relations(), &enc, &DecoderConfig::for_dim(6), 4).unwrap();
    let (a, _) = run_encoder(&f, &params, &enc, &f.prox);
    let perturbed = f.prox.map_weights(|i, j, w| w * 3.0 + (i.index() * j.index()) as f64);
    let (b, _) = run_encoder(&f, &params, &enc, &perturbed);
    let (c, _) = run_encoder(&f, &params, &enc, &ProximityGraph::empty(10, 0.5, 10));
    assert_eq!(a, b);
    assert_eq!(a, c);

    enc.ablation_kg_only = false;
    let params = ModelParams::init(10, f.kg.num_relations(), &enc, &DecoderConfig::for_dim(6), 4).unwrap();
    let (x, _) = run_encoder(&f, &params, &enc, &f.prox);
    let (y, _) = run_encoder(&f, &params, &enc, &perturbed);
    assert!(x.max_abs_diff(&y) > 1e-6, "the full model must depend on the graph");
}

#[test]
fn proximity_rows_sum_to_one() {
    for seed in 0..20 {
        let f = fixture(seed, 12);
        let plan = ProximityPlan::new(&f.prox);
        for (e, s) in plan.row_sums().into_iter().enumerate() {
            if f.prox.degree(EntityId(e as u32)) == 0 {
                assert_eq!(s, 0.0);
            } else {
                assert!((s - 1.0).abs() <= 1e-12, "entity {e}: {s}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Relabeling entities permutes the encoder output rows the same way.
    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>()) {
        let n = 8;
        let f = fixture(seed, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let p = |e: EntityId| perm[e.index()] as u32;
        let raw: Vec<Triple> = f.kg.raw_train().iter().map(|t| Triple::new(p(t.head), t.relation.0, p(t.tail))).collect();
        let kg2 = KnowledgeGraph::from_ids(n, 3, raw, vec![], vec![]).unwrap().augment_inverse().unwrap();
        let edges: Vec<_> = f.prox.edges().map(|(i, j, w)| (EntityId(p(i)), EntityId(p(j)), w)).collect();
        let prox2 = ProximityGraph::from_edges(n, 0.5, 10, edges).unwrap();

        let enc = config(Composition::Mlp, WeightScheme::Attention, 2, 1);
        let params = ModelParams::init(n, f.kg.num_relations(), &enc, &DecoderConfig::for_dim(6), seed).unwrap();
        let mut params2 = params.clone();
        let e = params.get("entity").unwrap();
        let e2 = params2.get_mut("entity").unwrap();
        for i in 0..n {
            e2.data_mut()[perm[i] * 6..perm[i] * 6 + 6].copy_from_slice(e.row(i));
        }
        let (a, _) = run_encoder(&f, &params, &enc, &f.prox);
        let f2 = Fixture { kg: kg2, prox: prox2.clone() };
        let (b, _) = run_encoder(&f2, &params2, &enc, &prox2);
        for i in 0..n {
            for k in 0..6 {
                prop_assert!((a.row(i)[k] - b.row(perm[i])[k]).abs() <= 1e-10);
            }
        }
    }
}
