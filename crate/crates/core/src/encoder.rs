//! The CP-GNN encoder: relation-aware message passing over the knowledge graph
//! followed by proximity message passing over the proximity graph.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use cpgnn_autodiff::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::kg::{KnowledgeGraph, Triple};
use crate::model::{GrLayerSlots, Layout, ModelError};
use crate::proximity::ProximityGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    Additive,
    Multiplicative,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    Prior,
    Gcn,
    Attention,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$variant),)+
                    other => Err(format!("unknown value {other:?}, expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}

str_enum!(Composition { Additive => "additive", Multiplicative => "multiplicative", Mlp => "mlp" });
str_enum!(WeightScheme { Prior => "prior", Gcn => "gcn", Attention => "attention" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers_kg: usize,
    pub layers_prox: usize,
    pub composition: Composition,
    pub weight_scheme: WeightScheme,
    /// Skip the proximity module entirely.
    pub ablation_kg_only: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 500,
            layers_kg: 1,
            layers_prox: 1,
            composition: Composition::Additive,
            weight_scheme: WeightScheme::Attention,
            ablation_kg_only: false,
        }
    }
}

impl EncoderConfig {
    pub(crate) fn validate_shape(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Directed message-passing edges `src --rel--> dst` with node degrees.
#[derive(Debug, Clone)]
pub struct RelationalAdjacency {
    n_entities: usize,
    src: Arc<[usize]>,
    rel: Arc<[usize]>,
    dst: Arc<[usize]>,
    in_degree: Vec<usize>,
    out_degree: Vec<usize>,
}

impl RelationalAdjacency {
    pub fn from_triples<'a>(n_entities: usize, triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let (mut src, mut rel, mut dst) = (Vec::new(), Vec::new(), Vec::new());
        let mut in_degree = vec![0; n_entities];
        let mut out_degree = vec![0; n_entities];
        for t in triples {
            src.push(t.head.index());
            rel.push(t.relation.index());
            dst.push(t.tail.index());
            out_degree[t.head.index()] += 1;
            in_degree[t.tail.index()] += 1;
        }
        Self {
            n_entities,
            src: src.into(),
            rel: rel.into(),
            dst: dst.into(),
            in_degree,
            out_degree,
        }
    }

    /// Adjacency over the (augmented) train split, restricted to `kept`
    /// indices when an edge-dropout view is given.
    pub fn from_kg(kg: &KnowledgeGraph, kept: Option<&[usize]>) -> Self {
        let train = kg.train();
        match kept {
            Some(idx) => Self::from_triples(kg.num_entities(), idx.iter().map(|&i| &train[i])),
            None => Self::from_triples(kg.num_entities(), train),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.n_entities
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn in_degree(&self, e: usize) -> usize {
        self.in_degree[e]
    }

    pub fn out_degree(&self, e: usize) -> usize {
        self.out_degree[e]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.src.len()).map(|i| (self.src[i], self.rel[i], self.dst[i]))
    }
}

/// Proximity-graph edges in directed form with the fixed softmax weights of
/// each destination's neighborhood.
#[derive(Debug, Clone)]
pub struct ProximityPlan {
    n_entities: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    weights: Arc<Tensor>,
}

impl ProximityPlan {
    pub fn new(graph: &ProximityGraph) -> Self {
        let n = graph.num_entities();
        let (mut src, mut dst, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n {
            let nbrs = graph.neighbors(crate::kg::EntityId(i as u32));
            if nbrs.is_empty() {
                continue;
            }
            let max = nbrs.iter().map(|&(_, w)| w).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = nbrs.iter().map(|&(_, w)| (w - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&(j, _), e) in nbrs.iter().zip(exps) {
                src.push(j.index());
                dst.push(i);
                weights.push((e / z) as Real);
            }
        }
        let len = weights.len();
        Self {
            n_entities: n,
            src: src.into(),
            dst: dst.into(),
            weights: Arc::new(Tensor::new(vec![len], weights).expect("length matches")),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.n_entities
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// `(src, dst, alpha)` for every directed proximity edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, Real)> + '_ {
        (0..self.src.len()).map(|i| (self.src[i], self.dst[i], self.weights.data()[i]))
    }

    /// Sum of incoming weights per entity; 1 for non-isolated entities.
    pub fn row_sums(&self) -> Vec<Real> {
        let mut sums = vec![0.0; self.n_entities];
        for (_, d, w) in self.edges() {
            sums[d] += w;
        }
        sums
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub entities: Var,
    pub relations: Var,
}

/// Fuses rows of entity and relation embeddings: `e + r`, `e * r`, or
/// `tanh([e ‖ r] W + b)`.
pub fn compose(
    tape: &mut Tape,
    e: Var,
    r: Var,
    mode: Composition,
    mlp: Option<(Var, Var)>,
) -> Result<Var, ModelError> {
    Ok(match mode {
        Composition::Additive => tape.add(e, r)?,
        Composition::Multiplicative => tape.mul(e, r)?,
        Composition::Mlp => {
            let (w, b) = mlp.ok_or_else(|| ModelError::Config("mlp composition needs weights".into()))?;
            let cat = tape.concat_cols(e, r)?;
            let lin = tape.matmul(cat, w)?;
            let lin = tape.add(lin, b)?;
            tape.tanh(lin)
        }
    })
}

/// Per-edge aggregation weights. `h` are the current entity states and `phi`
/// the composed messages, one row per edge.
pub fn relational_weights(
    tape: &mut Tape,
    adj: &RelationalAdjacency,
    h: Var,
    phi: Var,
    scheme: WeightScheme,
) -> Result<Var, ModelError> {
    let fixed = |f: &dyn Fn(usize, usize) -> Real| -> Tensor {
        let data: Vec<Real> = adj.edges().map(|(s, _, d)| f(s, d)).collect();
        Tensor::new(vec![data.len()], data).expect("length matches")
    };
    Ok(match scheme {
        WeightScheme::Prior => tape.constant(fixed(&|s, _| 1.0 / adj.out_degree[s] as Real)),
        WeightScheme::Gcn => tape.constant(fixed(&|s, d| {
            1.0 / ((adj.in_degree[d] * adj.out_degree[s]) as Real).sqrt()
        })),
        WeightScheme::Attention => {
            let hd = tape.gather_rows(h, adj.dst.clone())?;
            let prod = tape.mul(hd, phi)?;
            let scores = tape.row_sum(prod)?;
            tape.segment_softmax(scores, adj.dst.clone(), adj.n_entities)?
        }
    })
}

/// One relation-aware layer: `e' = tanh(n W) + e` with
/// `n_i = Σ_j α_ij φ(e_j, r_j)` over incoming edges.
pub fn gr_layer(
    tape: &mut Tape,
    h: Var,
    relations: Var,
    adj: &RelationalAdjacency,
    config: &EncoderConfig,
    weights: GrLayerVars,
) -> Result<Var, ModelError> {
    let hs = tape.gather_rows(h, adj.src.clone())?;
    let rs = tape.gather_rows(relations, adj.rel.clone())?;
    let phi = compose(tape, hs, rs, config.composition, weights.comp)?;
    let alpha = relational_weights(tape, adj, h, phi, config.weight_scheme)?;
    let n = tape.segment_weighted_sum(phi, alpha, adj.dst.clone(), adj.n_entities)?;
    let lin = tape.matmul(n, weights.w)?;
    let upd = tape.tanh(lin);
    Ok(tape.add(upd, h)?)
}

/// One proximity layer: `e' = tanh(n W) + e` with `n_i = Σ_j α_ij e_j` and
/// fixed softmax weights.
pub fn gp_layer(tape: &mut Tape, h: Var, plan: &ProximityPlan, w: Var) -> Result<Var, ModelError> {
    let hs = tape.gather_rows(h, plan.src.clone())?;
    let alpha = tape.constant((*plan.weights).clone());
    let n = tape.segment_weighted_sum(hs, alpha, plan.dst.clone(), plan.n_entities)?;
    let lin = tape.matmul(n, w)?;
    let upd = tape.tanh(lin);
    Ok(tape.add(upd, h)?)
}

#[derive(Debug, Clone, Copy)]
pub struct GrLayerVars {
    pub w: Var,
    pub comp: Option<(Var, Var)>,
}

impl GrLayerVars {
    fn from_slots(slots: &GrLayerSlots, vars: &[Var]) -> Self {
        Self {
            w: vars[slots.w],
            comp: slots.comp.map(|(w, b)| (vars[w], vars[b])),
        }
    }
}

/// Full encoder. `plan` may be `None` only in the knowledge-graph-only variant.
pub fn encode(
    tape: &mut Tape,
    layout: &Layout,
    vars: &[Var],
    adj: &RelationalAdjacency,
    plan: Option<&ProximityPlan>,
    config: &EncoderConfig,
) -> Result<EncoderOutput, ModelError> {
    let entities = vars[layout.entity];
    let relations = vars[layout.relation];
    let n_e = tape.value(entities).shape()[0];
    if adj.n_entities != n_e {
        return Err(ModelError::VocabularyMismatch {
            what: "relational adjacency",
            expected: n_e,
            found: adj.n_entities,
        });
    }
    let mut h = entities;
    for slots in &layout.gr {
        h = gr_layer(tape, h, relations, adj, config, GrLayerVars::from_slots(slots, vars))?;
    }
    if !config.ablation_kg_only {
        let plan = plan.ok_or_else(|| ModelError::Config("proximity graph required".into()))?;
        if plan.n_entities != n_e {
            return Err(ModelError::VocabularyMismatch {
                what: "proximity graph",
                expected: n_e,
                found: plan.n_entities,
            });
        }
        for &w in &layout.gp {
            h = gp_layer(tape, h, plan, vars[w])?;
        }
    }
    let m = &layout.mlp;
    let hidden = tape.matmul(relations, vars[m.w1])?;
    let hidden = tape.add(hidden, vars[m.b1])?;
    let hidden = tape.tanh(hidden);
    let out = tape.matmul(hidden, vars[m.w2])?;
    let out = tape.add(out, vars[m.b2])?;
    Ok(EncoderOutput {
        entities: h,
        relations: out,
    })
}
