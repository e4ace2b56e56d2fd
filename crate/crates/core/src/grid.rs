//! Hyper-parameter grid search: value sets per configuration key, expanded
//! into a Cartesian product of trials, run under a budget and ranked by
//! validation MRR.

use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, PUBLISHED_GRID};
use crate::kg::KnowledgeGraph;
use crate::proximity::{accumulate_spm, build_proximity_graph, extract_qa_pairs};
use crate::train::{TrainError, Trainer};

/// Ordered value sets, one per configuration key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    axes: Vec<(String, Vec<String>)>,
}

impl GridSpec {
    /// Parses `key = v1, v2, ...` lines; `#` starts a comment. Keys must be
    /// configuration keys and appear once; every value must parse.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        let mut probe = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = || ConfigError::Syntax {
                line: i + 1,
                text: raw.to_owned(),
            };
            let (k, v) = line.split_once('=').ok_or_else(syntax)?;
            let key = k.trim().to_owned();
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_owned()).collect();
            if values.iter().any(String::is_empty) {
                return Err(syntax());
            }
            if axes.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::Invalid(format!("grid key {key} listed twice")));
            }
            for value in &values {
                probe.set(&key, value)?;
            }
            axes.push((key, values));
        }
        Ok(Self { axes })
    }

    /// The default value sets of the search.
    pub fn published() -> Self {
        Self::parse(PUBLISHED_GRID).expect("published grid parses")
    }

    pub fn axes(&self) -> &[(String, Vec<String>)] {
        &self.axes
    }

    pub fn keys(&self) -> Vec<String> {
        self.axes.iter().map(|(k, _)| k.clone()).collect()
    }

    /// Number of trials in the full product.
    pub fn size(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// All combinations applied to `base`, the last key varying fastest.
    /// Each trial is validated.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>, ConfigError> {
        let mut out = Vec::with_capacity(self.size());
        let mut idx = vec![0usize; self.axes.len()];
        loop {
            let mut cfg = base.clone();
            for ((key, values), &i) in self.axes.iter().zip(&idx) {
                cfg.set(key, &values[i])?;
            }
            cfg.validate()?;
            out.push(cfg);
            let mut pos = self.axes.len();
            loop {
                if pos == 0 {
                    return Ok(out);
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < self.axes[pos].1.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
}

/// Limits on a search. Trials not started within the limits are skipped and
/// the report is flagged incomplete.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_trials: Option<usize>,
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub valid_mrr: f64,
    pub best_epoch: Option<u64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Done,
    Failed(String),
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub digest: String,
    /// Values of the grid keys, in grid order.
    pub settings: Vec<String>,
    pub status: TrialStatus,
    pub outcome: Option<TrialOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub keys: Vec<String>,
    pub trials: Vec<Trial>,
    /// Index of the trial with the highest validation MRR.
    pub best: Option<usize>,
    pub incomplete: bool,
}

impl GridReport {
    /// Trials sorted by validation MRR, best first; failed and skipped last.
    pub fn ranked(&self) -> Vec<&Trial> {
        let mut v: Vec<&Trial> = self.trials.iter().collect();
        let key = |t: &Trial| t.outcome.as_ref().map_or(f64::NEG_INFINITY, |o| o.valid_mrr);
        v.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.index.cmp(&b.index)));
        v
    }

    /// Ranked trial table. The first line is a `#` comment with the
    /// completeness flag.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let done = self.trials.iter().filter(|t| t.status == TrialStatus::Done).count();
        writeln!(
            w,
            "# complete={} trials_done={} trials_total={}",
            !self.incomplete,
            done,
            self.trials.len()
        )?;
        write!(w, "rank\ttrial\tstatus\tseed")?;
        for k in &self.keys {
            write!(w, "\t{k}")?;
        }
        writeln!(w, "\tvalid_mrr\tbest_epoch\twall_time\tconfig_digest")?;
        for (rank, t) in self.ranked().into_iter().enumerate() {
            let status = match &t.status {
                TrialStatus::Done => "done".to_owned(),
                TrialStatus::Failed(e) => format!("failed: {}", e.replace(['\t', '\n'], " ")),
                TrialStatus::Skipped => "skipped".to_owned(),
            };
            write!(w, "{}\t{}\t{}\t{}", rank + 1, t.index, status, t.seed)?;
            for s in &t.settings {
                write!(w, "\t{s}")?;
            }
            match &t.outcome {
                Some(o) => write!(
                    w,
                    "\t{:.6}\t{}\t{:.3}",
                    o.valid_mrr,
                    o.best_epoch.map_or("-".to_owned(), |e| e.to_string()),
                    o.wall_time
                )?,
                None => write!(w, "\t-\t-\t-")?,
            }
            writeln!(w, "\t{}", t.digest)?;
        }
        Ok(())
    }
}

fn setting(cfg: &ExperimentConfig, key: &str) -> String {
    let prefix = format!("{key} = ");
    cfg.to_text()
        .lines()
        .find_map(|l| l.strip_prefix(&prefix).map(str::to_owned))
        .unwrap_or_default()
}

/// Runs `runner` on every configuration within `budget`, sequentially or on
/// the rayon pool. Trial results do not depend on the execution order.
pub fn run_grid<F>(configs: &[ExperimentConfig], keys: &[String], budget: Budget, parallel: bool, runner: F) -> GridReport
where
    F: Fn(&ExperimentConfig) -> Result<TrialOutcome, String> + Sync,
{
    let start = Instant::now();
    let started = AtomicUsize::new(0);
    let run_one = |(index, cfg): (usize, &ExperimentConfig)| {
        let over_time = budget.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() >= s);
        let slot = started.fetch_add(1, Ordering::SeqCst);
        let over_count = budget.max_trials.is_some_and(|n| slot >= n);
        let (status, outcome) = if over_time || over_count {
            (TrialStatus::Skipped, None)
        } else {
            match runner(cfg) {
                Ok(o) => (TrialStatus::Done, Some(o)),
                Err(e) => (TrialStatus::Failed(e), None),
            }
        };
        Trial {
            index,
            seed: cfg.seed,
            digest: cfg.digest(),
            settings: keys.iter().map(|k| setting(cfg, k)).collect(),
            status,
            outcome,
        }
    };
    let trials: Vec<Trial> = if parallel {
        configs.par_iter().enumerate().map(run_one).collect()
    } else {
        configs.iter().enumerate().map(run_one).collect()
    };
    let incomplete = trials.iter().any(|t| t.status == TrialStatus::Skipped);
    let best = trials
        .iter()
        .filter_map(|t| t.outcome.as_ref().map(|o| (t.index, o.valid_mrr)))
        .filter(|(_, m)| m.is_finite())
        .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
            Some((_, b)) if b >= m => acc,
            _ => Some((i, m)),
        })
        .map(|(i, _)| i);
    GridReport {
        keys: keys.to_vec(),
        trials,
        best,
        incomplete,
    }
}

/// Builds the proximity graph for `config`, trains on `raw` and reports the
/// best validation MRR.
pub fn train_trial(raw: &KnowledgeGraph, config: &ExperimentConfig) -> Result<TrialOutcome, TrainError> {
    let kg = raw.augment_inverse()?;
    let graph = if config.ablation_kg_only {
        None
    } else {
        let spm = accumulate_spm(&extract_qa_pairs(raw), config.m)?;
        Some(build_proximity_graph(&spm, config.threshold, raw.num_entities())?)
    };
    let mut trainer = Trainer::new(
        &kg,
        graph.as_ref(),
        config.encoder_config(),
        config.decoder_config(),
        config.train_config(),
    )?;
    trainer.run(|_, _| Ok(()))?;
    let state = trainer.state();
    Ok(TrialOutcome {
        valid_mrr: state.best_valid_mrr.unwrap_or(f64::NAN),
        best_epoch: state.best_epoch,
        wall_time: trainer.wall_time(),
    })
}
