//! Trainable parameters of the full encoder-decoder model.

use cpgnn_autodiff::{splitmix64, Real, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::encoder::{Composition, EncoderConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected {expected} entities, got {found}")]
    VocabularyMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrLayerSlots {
    pub w: usize,
    /// Weight and bias of the MLP composition, when used.
    pub comp: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSlots {
    pub filters: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub entity_bias: usize,
}

/// Position of each named parameter in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entity: usize,
    pub relation: usize,
    pub gr: Vec<GrLayerSlots>,
    pub gp: Vec<usize>,
    pub mlp: MlpSlots,
    pub decoder: DecoderSlots,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

struct Builder {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Builder {
    /// Each parameter draws from its own stream keyed by name, so variants
    /// that add or drop parameters share the initialization of the rest.
    fn uniform(&mut self, name: String, shape: &[usize], bound: Real) -> usize {
        let key = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(key)));
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.push(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: Real) -> usize {
        self.push(name, Tensor::full(shape, value))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

/// `ln(p / (1 - p))` for `p = 1 / n`; zero for `n <= 2`.
fn prior_logit(n: usize) -> Real {
    if n <= 2 {
        0.0
    } else {
        -((n - 1) as Real).ln()
    }
}

impl ModelParams {
    /// Seeded initialization: embeddings and encoder transforms uniform in
    /// `±1/√d`, decoder weights uniform in `±1/√fan_in`, biases zero except
    /// the entity bias, which starts at the logit of a `1/n_e` base rate.
    pub fn init(
        n_entities: usize,
        n_relations: usize,
        enc: &EncoderConfig,
        dec: &DecoderConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        enc.validate_shape()?;
        dec.validate(enc.dim)?;
        let d = enc.dim;
        let bound = 1.0 / (d as Real).sqrt();
        let mut b = Builder {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let entity = b.uniform("entity".into(), &[n_entities, d], bound);
        let relation = b.uniform("relation".into(), &[n_relations, d], bound);
        let gr = (0..enc.layers_kg)
            .map(|l| {
                let w = b.uniform(format!("gr.{l}.w"), &[d, d], bound);
                let comp = (enc.composition == Composition::Mlp).then(|| {
                    (
                        b.uniform(format!("gr.{l}.comp_w"), &[2 * d, d], 1.0 / ((2 * d) as Real).sqrt()),
                        b.zeros(format!("gr.{l}.comp_b"), &[d]),
                    )
                });
                GrLayerSlots { w, comp }
            })
            .collect();
        let gp = if enc.ablation_kg_only {
            Vec::new()
        } else {
            (0..enc.layers_prox)
                .map(|l| b.uniform(format!("gp.{l}.w"), &[d, d], bound))
                .collect()
        };
        let mlp = MlpSlots {
            w1: b.uniform("rel_mlp.w1".into(), &[d, d], bound),
            b1: b.zeros("rel_mlp.b1".into(), &[d]),
            w2: b.uniform("rel_mlp.w2".into(), &[d, d], bound),
            b2: b.zeros("rel_mlp.b2".into(), &[d]),
        };
        let k = dec.kernel;
        let flat = dec.flat_features();
        let decoder = DecoderSlots {
            filters: b.uniform("dec.filters".into(), &[dec.filters, 1, k, k], 1.0 / ((k * k) as Real).sqrt()),
            fc_w: b.uniform("dec.fc_w".into(), &[flat, d], 1.0 / (flat as Real).sqrt()),
            fc_b: b.zeros("dec.fc_b".into(), &[d]),
            entity_bias: b.constant("dec.entity_bias".into(), &[n_entities], prior_logit(n_entities)),
        };
        Ok(Self {
            names: b.names,
            tensors: b.tensors,
            layout: Layout {
                entity,
                relation,
                gr,
                gp,
                mlp,
                decoder,
            },
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces all tensors, e.g. from a checkpoint. Names and shapes must match.
    pub fn load_tensors(&mut self, named: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        if named.len() != self.tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for ((name, t), (own_name, own)) in named.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != own_name || t.shape() != own.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} {:?} does not match {own_name} {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
        }
        self.tensors = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Records every tensor as a gradient-tracking leaf, in layout order.
    pub fn insert(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Records every tensor as a constant (inference).
    pub fn insert_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::WeightScheme;

    fn enc(ablation: bool, composition: Composition) -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            layers_kg: 2,
            layers_prox: 3,
            composition,
            weight_scheme: WeightScheme::Attention,
            ablation_kg_only: ablation,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dec = DecoderConfig::for_dim(8);
        let a = ModelParams::init(5, 4, &enc(false, Composition::Additive), &dec, 3).unwrap();
        let b = ModelParams::init(5, 4, &enc(false, Composition::Additive), &dec, 3).unwrap();
        let c = ModelParams::init(5, 4, &enc(false, Composition::Additive), &dec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.get("entity").unwrap().data().iter().all(|x| x.abs() <= bound));
        assert_eq!(a.get("gp.2.w").unwrap().shape(), &[8, 8]);
        assert!(a.get("dec.entity_bias").unwrap().data().iter().all(|&x| x == -(4.0 as Real).ln()));
    }

    #[test]
    fn ablation_has_no_proximity_weights() {
        let dec = DecoderConfig::for_dim(8);
        let p = ModelParams::init(5, 4, &enc(true, Composition::Mlp), &dec, 3).unwrap();
        assert!(p.layout().gp.is_empty());
        assert!(p.get("gp.0.w").is_none());
        assert_eq!(p.get("gr.1.comp_w").unwrap().shape(), &[16, 8]);
    }

    #[test]
    fn load_tensors_checks_names_and_shapes() {
        let dec = DecoderConfig::for_dim(8);
        let mut p = ModelParams::init(5, 4, &enc(true, Composition::Additive), &dec, 3).unwrap();
        let mut named: Vec<(String, Tensor)> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        assert!(p.load_tensors(named.clone()).is_ok());
        named[0].1 = Tensor::zeros(&[6, 8]);
        assert!(p.load_tensors(named).is_err());
    }
}
