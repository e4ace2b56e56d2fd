use cpgnn_core::autodiff::gradcheck;
use cpgnn_core::autodiff::{Tape, Tensor, TensorError};
use cpgnn_core::batch::QueryPlan;
use cpgnn_core::decoder::{bce_loss, conve_score, DecoderConfig, DropoutCtx};
use cpgnn_core::encoder::{encode, Composition, EncoderConfig, ProximityPlan, RelationalAdjacency, WeightScheme};
use cpgnn_core::model::ModelParams;
use cpgnn_core::proximity::{accumulate_spm, build_proximity_graph, extract_qa_pairs};
use cpgnn_core::synthetic::toy_kg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// ConvE forward written out loop by loop.
fn reference_scores(heads: &Tensor, rels: &Tensor, ents: &Tensor, params: &ModelParams, cfg: &DecoderConfig) -> Vec<Vec<f64>> {
    let (rh, rw, k) = (cfg.reshape_h, cfg.reshape_w, cfg.kernel);
    let (fh, fw) = (2 * rh - k + 1, rw - k + 1);
    let filters = params.get("dec.filters").unwrap();
    let fc_w = params.get("dec.fc_w").unwrap();
    let fc_b = params.get("dec.fc_b").unwrap();
    let bias = params.get("dec.entity_bias").unwrap();
    let d = rh * rw;
    (0..heads.shape()[0])
        .map(|b| {
            let pixel = |y: usize, x: usize| if y < rh { heads.row(b)[y * rw + x] } else { rels.row(b)[(y - rh) * rw + x] };
            let mut flat = Vec::new();
            for c in 0..cfg.filters {
                for y in 0..fh {
                    for x in 0..fw {
                        let mut s = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                s += filters.data()[c * k * k + ky * k + kx] * pixel(y + ky, x + kx);
                            }
                        }
                        flat.push(s.max(0.0));
                    }
                }
            }
            let hidden: Vec<f64> = (0..d)
                .map(|j| (flat.iter().enumerate().map(|(i, v)| v * fc_w.data()[i * d + j]).sum::<f64>() + fc_b.data()[j]).max(0.0))
                .collect();
            (0..ents.shape()[0])
                .map(|e| {
                    let s: f64 = hidden.iter().zip(ents.row(e)).map(|(a, b)| a * b).sum::<f64>() + bias.data()[e];
                    1.0 / (1.0 + (-s).exp())
                })
                .collect()
        })
        .collect()
}

#[test]
fn conve_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for d in [6, 8, 12] {
        let cfg = DecoderConfig::for_dim(d);
        let enc = EncoderConfig { dim: d, ..EncoderConfig::default() };
        let mut params = ModelParams::init(7, 4, &enc, &cfg, 3).unwrap();
        for name in ["dec.fc_b", "dec.entity_bias"] {
            let t = params.get_mut(name).unwrap();
            *t = random(&mut rng, &t.shape().to_vec());
        }
        let (heads, rels, ents) = (random(&mut rng, &[5, d]), random(&mut rng, &[5, d]), random(&mut rng, &[7, d]));
        let mut tape = Tape::new();
        let vars = params.insert_constants(&mut tape);
        let (h, r, e) = (tape.constant(heads.clone()), tape.constant(rels.clone()), tape.constant(ents.clone()));
        let p = conve_score(&mut tape, &params.layout().decoder, &vars, h, r, e, &cfg, DropoutCtx::eval()).unwrap();
        let want = reference_scores(&heads, &rels, &ents, &params, &cfg);
        for (b, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                let got = tape.value(p).row(b)[j];
                assert!((got - w).abs() <= 1e-10, "d {d}: ({b}, {j}) {got} vs {w}");
            }
        }
    }
}

#[test]
fn bce_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probs = Tensor::from_fn(&[4, 9], |i| if i == 3 { 0.0 } else if i == 7 { 1.0 } else { rng.gen_range(0.0..1.0) });
    let targets = Tensor::from_fn(&[4, 9], |i| [0.0, 1.0, 0.9, 0.011][i % 4]);
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let loss = bce_loss(&mut tape, p, targets.clone()).unwrap();
    let want: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&o, &t)| {
            let o = o.clamp(1e-7, 1.0 - 1e-7);
            -(t * o.ln() + (1.0 - t) * (1.0 - o).ln())
        })
        .sum::<f64>()
        / 36.0;
    assert!((tape.value(loss).item().unwrap() - want).abs() <= 1e-12);
}

/// The whole loss as a function of every parameter tensor, for finite differences.
#[test]
fn full_model_gradient_matches_finite_differences() {
    let raw = toy_kg();
    let kg = raw.augment_inverse().unwrap();
    let spm = accumulate_spm(&extract_qa_pairs(&raw), 10).unwrap();
    let g = build_proximity_graph(&spm, 0.5, kg.num_entities()).unwrap();
    assert!(g.edge_count() > 0);
    let plan = ProximityPlan::new(&g);
    let adj = RelationalAdjacency::from_kg(&kg, None);
    let queries = QueryPlan::from_kg(&kg).unwrap();
    let batch = queries.batch(&[0, 3, 7, 11, 20], 0.1);
    for (comp, scheme) in [
        (Composition::Additive, WeightScheme::Attention),
        (Composition::Mlp, WeightScheme::Gcn),
        (Composition::Multiplicative, WeightScheme::Prior),
    ] {
        let enc = EncoderConfig {
            dim: 8,
            layers_kg: 2,
            layers_prox: 1,
            composition: comp,
            weight_scheme: scheme,
            ablation_kg_only: false,
        };
        let mut dec = DecoderConfig::for_dim(8);
        dec.filters = 3;
        let params = ModelParams::init(8, kg.num_relations(), &enc, &dec, 21).unwrap();
        let layout = params.layout().clone();
        let err = |e: cpgnn_core::model::ModelError| TensorError::InvalidArgument(e.to_string());
        let check = gradcheck::check(params.tensors(), 1e-5, |tape, vars| {
            let out = encode(tape, &layout, vars, &adj, Some(&plan), &enc).map_err(err)?;
            let heads = tape.gather_rows(out.entities, batch.anchors.clone())?;
            let rels = tape.gather_rows(out.relations, batch.relations.clone())?;
            let ctx = DropoutCtx { seed: 4, step: 2, training: true };
            let p = conve_score(tape, &layout.decoder, vars, heads, rels, out.entities, &dec, ctx).map_err(err)?;
            bce_loss(tape, p, batch.targets.clone()).map_err(err)
        })
        .unwrap();
        assert!(check.max_rel_err <= 1e-4, "{comp:?}/{scheme:?}: {} at {:?}", check.max_rel_err, check.worst);
    }
}
