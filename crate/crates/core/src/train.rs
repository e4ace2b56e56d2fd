//! Mini-batch training of the encoder-decoder with per-batch edge removal,
//! periodic validation and best-model tracking.

use std::time::Instant;

use cpgnn_autodiff::{splitmix64, Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{QueryBatch, QueryPlan};
use crate::decoder::{bce_loss, conve_score, DecoderConfig, DropoutCtx};
use crate::encoder::{encode, EncoderConfig, ProximityPlan, RelationalAdjacency};
use crate::eval::{rank_split, EvalCase, EvalError, FilterIndex, Metrics};
use crate::kg::{sample_edge_dropout, KgError, KnowledgeGraph, Split};
use crate::model::{DecoderSlots, ModelError, ModelParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::proximity::ProximityGraph;

const TAG_INIT: u64 = 1;
const TAG_EDGES: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_PROX: u64 = 4;

/// Independent seed for stream `tag` at position `counter`.
pub fn derive_seed(seed: u64, tag: u64, counter: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag ^ splitmix64(counter)))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Proximity(#[from] crate::proximity::ProximityError),
    #[error("training diverged: loss {loss} at epoch {epoch}, step {step}")]
    Divergence { epoch: u64, step: u64, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: Real,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub edge_drop_rate: f64,
    pub mask_proximity: bool,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Adam,
            epochs: 500,
            edge_drop_rate: 0.3,
            mask_proximity: false,
            eval_every: 10,
            eval_batch_size: 512,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(TrainError::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_drop_rate) {
            return Err(TrainError::Config(format!(
                "edge_drop_rate {} outside [0, 1]",
                self.edge_drop_rate
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Position in the training schedule. Together with the parameters and the
/// optimizer it fully determines the remaining trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    /// Current (zero-based) epoch.
    pub epoch: u64,
    /// Batches already taken in the current epoch.
    pub batch_in_epoch: u64,
    pub global_step: u64,
    /// Sum of batch losses in the current epoch.
    pub epoch_loss_sum: f64,
    pub best_valid_mrr: Option<f64>,
    pub best_epoch: Option<u64>,
    /// Seconds spent in earlier sessions.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub valid_mrr: Option<f64>,
    pub wall_time: f64,
}

pub struct Trainer<'a> {
    kg: &'a KnowledgeGraph,
    proximity: Option<&'a ProximityGraph>,
    full_plan: Option<ProximityPlan>,
    full_adj: RelationalAdjacency,
    queries: QueryPlan,
    filter: FilterIndex,
    enc: EncoderConfig,
    dec: DecoderConfig,
    cfg: TrainConfig,
    params: ModelParams,
    optimizer: Optimizer,
    state: TrainState,
    best: Option<ModelParams>,
    order: Option<(u64, Vec<usize>)>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Fresh run with parameters initialized from `cfg.seed`. The knowledge
    /// graph must be inverse-augmented; `proximity` may be `None` only for
    /// the knowledge-graph-only variant.
    pub fn new(
        kg: &'a KnowledgeGraph,
        proximity: Option<&'a ProximityGraph>,
        enc: EncoderConfig,
        dec: DecoderConfig,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        let params = ModelParams::init(
            kg.num_entities(),
            kg.num_relations(),
            &enc,
            &dec,
            derive_seed(cfg.seed, TAG_INIT, 0),
        )?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.tensors());
        let state = TrainState {
            seed: cfg.seed,
            epoch: 0,
            batch_in_epoch: 0,
            global_step: 0,
            epoch_loss_sum: 0.0,
            best_valid_mrr: None,
            best_epoch: None,
            wall_time: 0.0,
        };
        Self::from_parts(kg, proximity, enc, dec, cfg, params, optimizer, state)
    }

    /// Resumes from saved parameters, optimizer and schedule position.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kg: &'a KnowledgeGraph,
        proximity: Option<&'a ProximityGraph>,
        enc: EncoderConfig,
        dec: DecoderConfig,
        cfg: TrainConfig,
        params: ModelParams,
        optimizer: Optimizer,
        state: TrainState,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        dec.validate(enc.dim)?;
        if !kg.is_augmented() {
            return Err(KgError::NotAugmented.into());
        }
        if !enc.ablation_kg_only && proximity.is_none() {
            return Err(TrainError::Config("proximity graph required unless ablation_kg_only".into()));
        }
        if let Some(g) = proximity {
            if g.num_entities() != kg.num_entities() {
                return Err(ModelError::VocabularyMismatch {
                    what: "proximity graph",
                    expected: kg.num_entities(),
                    found: g.num_entities(),
                }
                .into());
            }
        }
        let proximity = if enc.ablation_kg_only { None } else { proximity };
        Ok(Self {
            kg,
            proximity,
            full_plan: proximity.map(ProximityPlan::new),
            full_adj: RelationalAdjacency::from_kg(kg, None),
            queries: QueryPlan::from_kg(kg)?,
            filter: FilterIndex::new(kg),
            enc,
            dec,
            cfg,
            params,
            optimizer,
            state,
            best: None,
            order: None,
            started: Instant::now(),
        })
    }

    /// Restores the best-so-far parameters of an interrupted run.
    pub fn with_best(mut self, best: Option<ModelParams>) -> Self {
        self.best = best;
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.enc
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.dec
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Parameters at the best validation MRR seen so far.
    pub fn best_params(&self) -> Option<&ModelParams> {
        self.best.as_ref()
    }

    pub fn queries(&self) -> &QueryPlan {
        &self.queries
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs as u64
    }

    /// Seconds of training across this and earlier sessions.
    pub fn wall_time(&self) -> f64 {
        self.state.wall_time + self.started.elapsed().as_secs_f64()
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step_on(&mut self, batch: &QueryBatch) -> Result<f64, TrainError> {
        let step = self.state.global_step;
        let seed = self.state.seed;
        let rate = self.cfg.edge_drop_rate;
        let adj = if rate > 0.0 {
            let kept = sample_edge_dropout(self.kg, derive_seed(seed, TAG_EDGES, step), rate)?;
            RelationalAdjacency::from_kg(self.kg, Some(&kept))
        } else {
            self.full_adj.clone()
        };
        let masked_plan = match self.proximity {
            Some(g) if self.cfg.mask_proximity && rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PROX, step));
                let kept: Vec<_> = g.edges().filter(|_| rng.gen::<f64>() >= rate).collect();
                let sub = ProximityGraph::from_edges(g.num_entities(), g.threshold(), g.m(), kept)
                    .expect("subset of a valid graph");
                Some(ProximityPlan::new(&sub))
            }
            _ => None,
        };
        let plan = masked_plan.as_ref().or(self.full_plan.as_ref());

        let mut tape = Tape::new();
        let vars = self.params.insert(&mut tape);
        let layout = self.params.layout();
        let out = encode(&mut tape, layout, &vars, &adj, plan, &self.enc)?;
        let heads = tape.gather_rows(out.entities, batch.anchors.clone()).map_err(ModelError::from)?;
        let rels = tape.gather_rows(out.relations, batch.relations.clone()).map_err(ModelError::from)?;
        let dropout = DropoutCtx {
            seed: derive_seed(seed, TAG_DROPOUT, 0),
            step,
            training: true,
        };
        let probs = conve_score(&mut tape, &layout.decoder, &vars, heads, rels, out.entities, &self.dec, dropout)?;
        let loss = bce_loss(&mut tape, probs, batch.targets.clone())?;
        let value = tape.value(loss).item().expect("scalar loss") as f64;
        if !value.is_finite() {
            return Err(TrainError::Divergence {
                epoch: self.state.epoch,
                step,
                loss: value,
            });
        }
        tape.backward(loss).map_err(ModelError::from)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| tape.grad(v).expect("parameters track gradients"))
            .collect();
        self.optimizer.step(self.params.tensors_mut(), &grads);
        self.state.global_step += 1;
        Ok(value)
    }

    /// Takes the next batch of the schedule. Returns the epoch record when
    /// this batch completes an epoch.
    pub fn step(&mut self) -> Result<Option<EpochRecord>, TrainError> {
        if self.is_finished() {
            return Ok(None);
        }
        let epoch = self.state.epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, self.queries.epoch_order(self.state.seed, epoch)));
        }
        let n_batches = self.queries.batches_per_epoch(self.cfg.batch_size) as u64;
        if n_batches > 0 {
            let order = &self.order.as_ref().expect("set above").1;
            let start = self.state.batch_in_epoch as usize * self.cfg.batch_size;
            let end = (start + self.cfg.batch_size).min(order.len());
            let batch = self.queries.batch(&order[start..end], self.dec.label_smoothing);
            let loss = self.step_on(&batch)?;
            self.state.epoch_loss_sum += loss;
            self.state.batch_in_epoch += 1;
        }
        if self.state.batch_in_epoch < n_batches {
            return Ok(None);
        }
        let train_loss = self.state.epoch_loss_sum / n_batches.max(1) as f64;
        let last = epoch + 1 == self.cfg.epochs as u64;
        let due = self.cfg.eval_every > 0 && (epoch + 1) % self.cfg.eval_every as u64 == 0;
        let valid_mrr = if (due || last) && !self.kg.valid().is_empty() {
            let (m, _) = self.evaluate(Split::Valid)?;
            Some(m.mrr)
        } else {
            None
        };
        if let Some(mrr) = valid_mrr {
            if self.state.best_valid_mrr.is_none_or(|b| mrr > b) {
                self.state.best_valid_mrr = Some(mrr);
                self.state.best_epoch = Some(epoch);
                self.best = Some(self.params.clone());
            }
        }
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        self.state.epoch_loss_sum = 0.0;
        Ok(Some(EpochRecord {
            epoch,
            train_loss,
            valid_mrr,
            wall_time: self.wall_time(),
        }))
    }

    /// Runs all remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while !self.is_finished() {
            if let Some(rec) = self.step()? {
                on_epoch(self, &rec)?;
            }
        }
        Ok(())
    }

    /// Filtered metrics of the current parameters on `split`.
    pub fn evaluate(&self, split: Split) -> Result<(Metrics, Vec<EvalCase>), TrainError> {
        evaluate_model(
            self.kg,
            self.proximity,
            &self.params,
            &self.enc,
            &self.dec,
            &self.filter,
            split,
            self.cfg.eval_batch_size,
        )
    }

    /// Train-split MRR over unique training queries, each ranked for every
    /// one of its answers with the other train answers filtered.
    pub fn train_mrr(&self) -> Result<f64, TrainError> {
        let predictor = Predictor::new(self.kg, self.proximity, &self.params, &self.enc, &self.dec)?;
        let mut total = 0.0;
        let mut n = 0usize;
        let all: Vec<usize> = (0..self.queries.len()).collect();
        for chunk in all.chunks(self.cfg.eval_batch_size) {
            let q: Vec<(usize, usize)> = chunk.iter().map(|&i| self.queries.queries()[i]).collect();
            let scores = predictor.score(&q)?;
            for (row, &i) in chunk.iter().enumerate() {
                let answers = self.queries.answers(i);
                for &t in answers {
                    let others: Vec<usize> = answers.iter().copied().filter(|&a| a != t).collect();
                    let r = crate::eval::filtered_rank(scores.row(row), t, &others)?;
                    total += 1.0 / r.rank;
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }
}

/// Encodes once with the full graph, then scores query batches against all
/// entities without dropout.
pub struct Predictor<'p> {
    params: &'p ModelParams,
    dec: DecoderConfig,
    entities: Tensor,
    relations: Tensor,
}

impl<'p> Predictor<'p> {
    pub fn new(
        kg: &KnowledgeGraph,
        proximity: Option<&ProximityGraph>,
        params: &'p ModelParams,
        enc: &EncoderConfig,
        dec: &DecoderConfig,
    ) -> Result<Self, TrainError> {
        let adj = RelationalAdjacency::from_kg(kg, None);
        let plan = if enc.ablation_kg_only { None } else { proximity.map(ProximityPlan::new) };
        let mut tape = Tape::new();
        let vars = params.insert_constants(&mut tape);
        let out = encode(&mut tape, params.layout(), &vars, &adj, plan.as_ref(), enc)?;
        Ok(Self {
            params,
            dec: dec.clone(),
            entities: tape.value(out.entities).clone(),
            relations: tape.value(out.relations).clone(),
        })
    }

    pub fn entities(&self) -> &Tensor {
        &self.entities
    }

    /// Probabilities `[queries, n_e]`.
    pub fn score(&self, queries: &[(usize, usize)]) -> Result<Tensor, ModelError> {
        let slots = &self.params.layout().decoder;
        let t = self.params.tensors();
        let mut tape = Tape::new();
        let vars = vec![
            tape.constant(t[slots.filters].clone()),
            tape.constant(t[slots.fc_w].clone()),
            tape.constant(t[slots.fc_b].clone()),
            tape.constant(t[slots.entity_bias].clone()),
        ];
        let local = DecoderSlots {
            filters: 0,
            fc_w: 1,
            fc_b: 2,
            entity_bias: 3,
        };
        let ent = tape.constant(self.entities.clone());
        let rel = tape.constant(self.relations.clone());
        let heads = tape.gather_rows(ent, queries.iter().map(|q| q.0).collect::<Vec<_>>())?;
        let rels = tape.gather_rows(rel, queries.iter().map(|q| q.1).collect::<Vec<_>>())?;
        let probs = conve_score(&mut tape, &local, &vars, heads, rels, ent, &self.dec, DropoutCtx::eval())?;
        Ok(tape.value(probs).clone())
    }
}

/// Filtered metrics and per-case ranks for `split` under `params`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    kg: &KnowledgeGraph,
    proximity: Option<&ProximityGraph>,
    params: &ModelParams,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    filter: &FilterIndex,
    split: Split,
    batch_size: usize,
) -> Result<(Metrics, Vec<EvalCase>), TrainError> {
    let predictor = Predictor::new(kg, proximity, params, enc, dec)?;
    let cases = rank_split(kg, split, filter, batch_size, |q| {
        predictor.score(q).map_err(|e| e.to_string())
    })?;
    Ok((Metrics::from_cases(split.as_str(), &cases), cases))
}
