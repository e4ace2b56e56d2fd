//! The `cpgnn` command-line workbench: ingestion, proximity graph
//! construction, training with checkpoints, evaluation, N-type analysis and
//! grid search over flat `key = value` configurations.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cpgnn_core::checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
use cpgnn_core::config::{ConfigError, ExperimentConfig};
use cpgnn_core::eval::{ntype_mrr_breakdown, ntype_report, EvalError, FilterIndex};
use cpgnn_core::grid::{run_grid, train_trial, Budget, GridSpec};
use cpgnn_core::kg::{ingest_dataset, DatasetPaths, KgError, KnowledgeGraph, Split};
use cpgnn_core::model::{ModelError, ModelParams};
use cpgnn_core::proximity::{
    accumulate_spm, build_proximity_graph, extract_qa_pairs, proximity_stats, ProximityError, ProximityGraph,
    GRAPH_VERSION,
};
use cpgnn_core::train::{evaluate_model, TrainError, Trainer};
use log::{info, warn};
use serde_json::{json, Value};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Proximity(#[from] ProximityError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 4 for numeric divergence, 3 for
    /// missing, malformed or mismatched data and artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Train(TrainError::Divergence { .. }) => EXIT_DIVERGENCE,
            CliError::Train(TrainError::Config(_)) => EXIT_CONFIG,
            CliError::Model(ModelError::Config(_)) => EXIT_CONFIG,
            CliError::Checkpoint(CheckpointError::Train(TrainError::Divergence { .. })) => EXIT_DIVERGENCE,
            _ => EXIT_DATA,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

const CONFIG_HELP: &str = "\
CONFIGURATION
  Settings come from built-in defaults, then --config FILE, then --set KEY=VALUE
  and the dedicated flags, later sources winning. Files hold `key = value`
  lines with `#` comments. Keys and defaults:

    data_dir, output_dir = runs, seed = 42, m = 50, threshold = 1,
    dim = 500, layers_kg = 1, layers_prox = 1,
    composition = additive|multiplicative|mlp,
    weight_scheme = attention|gcn|prior, ablation_kg_only = false,
    reshape_h = 0 (auto), filters = 32, kernel = 3,
    input_dropout = 0.2, feature_dropout = 0.2, hidden_dropout = 0.3,
    label_smoothing = 0.1, batch_size = 256, learning_rate = 0.0003,
    optimizer = adam|sgd, epochs = 500, edge_drop_rate = 0.3,
    mask_proximity = false, eval_every = 10, eval_batch_size = 512,
    allow_off_grid = false

  Values outside the published search grid (batch_size, learning_rate, dim,
  layers_kg, layers_prox, edge_drop_rate, m, threshold) are rejected unless
  --off-grid or allow_off_grid = true is given.

EXIT CODES
  0 success, 2 configuration error, 3 data or artifact error,
  4 numeric divergence during training.";

#[derive(Debug, Parser)]
#[command(name = "cpgnn", version, about = "Knowledge graph completion with proximity-aware graph encoders", after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reads train/valid/test TSV files and reports vocabulary and split sizes.
    Ingest {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the interned graph as JSON to <output_dir>/kg.json.
        #[arg(long)]
        save_graph: bool,
    },
    /// Builds the proximity graph for (m, threshold) and stores it under a
    /// content-addressed name in the output directory.
    BuildProximity {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the edges as TSV next to the binary file.
        #[arg(long)]
        tsv: bool,
    },
    /// Trains a model, appending per-epoch metrics to <output_dir>/metrics.jsonl
    /// and writing <output_dir>/checkpoint.bin.
    ///
    /// Long runs: use --checkpoint-every to save periodically and --resume to
    /// continue from the last checkpoint; --stop-after limits one session so a
    /// full-size run can be spread over several invocations.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from <output_dir>/checkpoint.bin if it exists. The
        /// configuration must match the one the checkpoint was written with.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every N epochs (0: only at the end of the session).
        #[arg(long, default_value_t = 1, value_name = "N")]
        checkpoint_every: usize,
        /// Stop after N epochs in this session, leaving a resumable checkpoint.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
    },
    /// Computes filtered MRR, MR and Hits@{1,3,10} of a checkpoint.
    Evaluate {
        #[command(flatten)]
        checkpoint: CheckpointArgs,
        /// Split to rank.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Bins evaluation queries by their number of train answers; with
    /// --checkpoint also reports MRR per bin.
    Ntype {
        #[command(flatten)]
        common: CommonArgs,
        /// Split to analyse.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Checkpoint for the per-bin MRR breakdown.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rank with the final instead of the best-validation parameters.
        #[arg(long)]
        last: bool,
    },
    /// Runs every combination of a grid file and writes a ranked trial table
    /// to <output_dir>/grid.tsv.
    Grid {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid file of `key = v1, v2, ...` lines; defaults to the published grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Run at most N trials; the table is flagged incomplete otherwise.
        #[arg(long, value_name = "N")]
        max_trials: Option<usize>,
        /// Start no trial after this many seconds.
        #[arg(long, value_name = "SECONDS")]
        max_seconds: Option<f64>,
        /// Run trials concurrently on the thread pool.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset directory with train.txt, valid.txt and test.txt.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<String>,
    /// Directory for all outputs.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<String>,
    /// Seed for initialization, batch order and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accept hyper-parameters outside the published grid.
    #[arg(long)]
    pub off_grid: bool,
    /// Worker threads (default: all cores). Fix it for bit-reproducible training.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset directory, if it moved since training.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<String>,
    /// Directory for outputs; defaults to the checkpoint's directory.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<String>,
    /// Rank with the final instead of the best-validation parameters.
    #[arg(long)]
    pub last: bool,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

impl CommonArgs {
    /// Defaults, then the file, then `--set`, then dedicated flags; validated.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.off_grid {
            cfg.allow_off_grid = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_threads(n: Option<usize>) {
    if let Some(n) = n {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialised; --threads {n} ignored");
        }
    }
}

/// Run identification written into every output.
pub fn provenance(command: &str, cfg: &ExperimentConfig) -> Value {
    json!({
        "tool": "cpgnn",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "artifact_versions": {"checkpoint": CHECKPOINT_VERSION, "proximity_graph": GRAPH_VERSION},
        "config": cfg.to_text(),
    })
}

/// Provenance as `#` comment lines for tabular outputs.
fn provenance_comment(command: &str, cfg: &ExperimentConfig) -> String {
    let mut s = format!(
        "# cpgnn {} {command}\n# config_digest {}\n# seed {}\n# artifact_versions checkpoint={CHECKPOINT_VERSION} proximity_graph={GRAPH_VERSION}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.digest(),
        cfg.seed
    );
    for line in cfg.to_text().lines() {
        s.push_str("# config ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialise");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn load_kg(cfg: &ExperimentConfig) -> Result<KnowledgeGraph, CliError> {
    if cfg.data_dir.is_empty() {
        return Err(CliError::Usage("no dataset given: set data_dir or pass --data-dir".into()));
    }
    let t0 = Instant::now();
    let (kg, report) = ingest_dataset(&DatasetPaths::in_dir(&cfg.data_dir))?;
    info!(
        "ingested {}: {} entities, {} relations, {}/{}/{} triples in {:.2}s",
        cfg.data_dir,
        report.n_entities,
        report.n_relations,
        report.triples.train,
        report.triples.valid,
        report.triples.test,
        t0.elapsed().as_secs_f64()
    );
    Ok(kg)
}

/// Content-addressed location of the proximity graph for `cfg`.
pub fn proximity_path(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.output_dir).join(format!("proximity-{}.bin", cfg.proximity_digest()))
}

fn build_graph(raw: &KnowledgeGraph, cfg: &ExperimentConfig) -> Result<ProximityGraph, CliError> {
    let t0 = Instant::now();
    let qa = extract_qa_pairs(raw);
    let spm = accumulate_spm(&qa, cfg.m)?;
    let graph = build_proximity_graph(&spm, cfg.threshold, raw.num_entities())?;
    info!(
        "proximity graph (m = {}, threshold = {}): {} QA pairs, {} SPM entries, {} edges in {:.2}s",
        cfg.m,
        cfg.threshold,
        qa.len(),
        spm.len(),
        graph.edge_count(),
        t0.elapsed().as_secs_f64()
    );
    if graph.edge_count() == 0 {
        let max = spm.max_value().unwrap_or(0.0);
        warn!(
            "proximity graph is empty: threshold {} is not below the largest proximity value {max}",
            cfg.threshold
        );
    }
    Ok(graph)
}

fn save_graph(graph: &ProximityGraph, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        graph.write_binary(&mut w)?;
        w.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Loads the cached graph for `cfg` or builds and caches it.
fn proximity_for(raw: &KnowledgeGraph, cfg: &ExperimentConfig) -> Result<Option<ProximityGraph>, CliError> {
    if cfg.ablation_kg_only {
        return Ok(None);
    }
    let path = proximity_path(cfg);
    if path.exists() {
        let graph = ProximityGraph::read_binary(io::BufReader::new(File::open(&path).map_err(io_err(&path))?))?;
        if graph.m() != cfg.m || graph.threshold() != cfg.threshold || graph.num_entities() != raw.num_entities() {
            return Err(CliError::Proximity(ProximityError::Corrupt(format!(
                "{} does not match the configured dataset, m and threshold",
                path.display()
            ))));
        }
        info!("loaded proximity graph {} ({} edges)", path.display(), graph.edge_count());
        return Ok(Some(graph));
    }
    let graph = build_graph(raw, cfg)?;
    save_graph(&graph, &path)?;
    Ok(Some(graph))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { common, save_graph } => cmd_ingest(&common, save_graph),
        Command::BuildProximity { common, tsv } => cmd_build_proximity(&common, tsv),
        Command::Train {
            common,
            resume,
            checkpoint_every,
            stop_after,
        } => cmd_train(&common, resume, checkpoint_every, stop_after),
        Command::Evaluate { checkpoint, split } => cmd_evaluate(&checkpoint, split),
        Command::Ntype {
            common,
            split,
            checkpoint,
            last,
        } => cmd_ntype(&common, split, checkpoint.as_deref(), last),
        Command::Grid {
            common,
            grid,
            max_trials,
            max_seconds,
            parallel,
        } => cmd_grid(&common, grid.as_deref(), Budget { max_trials, max_seconds }, parallel),
    }
}

pub fn cmd_ingest(common: &CommonArgs, save: bool) -> Result<(), CliError> {
    set_threads(common.threads);
    let cfg = common.resolve()?;
    if cfg.data_dir.is_empty() {
        return Err(CliError::Usage("no dataset given: set data_dir or pass --data-dir".into()));
    }
    let t0 = Instant::now();
    let (kg, report) = ingest_dataset(&DatasetPaths::in_dir(&cfg.data_dir))?;
    let seconds = t0.elapsed().as_secs_f64();
    let out = output_dir(&cfg)?;
    let value = json!({
        "provenance": provenance("ingest", &cfg),
        "report": report,
        "seconds": seconds,
    });
    write_json(&out.join("ingest.json"), &value)?;
    if save {
        let path = out.join("kg.json");
        let w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        serde_json::to_writer(w, &json!({"provenance": provenance("ingest", &cfg), "graph": kg}))
            .map_err(|e| io_err(&path)(e.into()))?;
    }
    println!("{}", serde_json::to_string_pretty(&value["report"]).expect("json"));
    Ok(())
}

pub fn cmd_build_proximity(common: &CommonArgs, tsv: bool) -> Result<(), CliError> {
    set_threads(common.threads);
    let cfg = common.resolve()?;
    let raw = load_kg(&cfg)?;
    let out = output_dir(&cfg)?;
    let graph = build_graph(&raw, &cfg)?;
    let path = proximity_path(&cfg);
    save_graph(&graph, &path)?;
    let stats = proximity_stats(&graph);
    let value = json!({
        "provenance": provenance("build-proximity", &cfg),
        "graph_file": path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "stats": stats,
    });
    write_json(&path.with_extension("json"), &value)?;
    if tsv {
        let tsv_path = path.with_extension("tsv");
        let mut w = BufWriter::new(File::create(&tsv_path).map_err(io_err(&tsv_path))?);
        w.write_all(provenance_comment("build-proximity", &cfg).as_bytes()).map_err(io_err(&tsv_path))?;
        graph.write_tsv(&mut w).map_err(io_err(&tsv_path))?;
        w.flush().map_err(io_err(&tsv_path))?;
    }
    info!("wrote {} under {}", path.display(), out.display());
    println!("{}", serde_json::to_string_pretty(&value["stats"]).expect("json"));
    Ok(())
}

pub fn cmd_train(common: &CommonArgs, resume: bool, checkpoint_every: usize, stop_after: Option<usize>) -> Result<(), CliError> {
    set_threads(common.threads);
    let cfg = common.resolve()?;
    if cfg.is_degenerate_drop() {
        warn!("edge_drop_rate = 1 removes every message-passing edge in every batch");
    }
    let raw = load_kg(&cfg)?;
    let kg = raw.augment_inverse()?;
    let out = output_dir(&cfg)?;
    let graph = proximity_for(&raw, &cfg)?;
    let ckpt_path = out.join("checkpoint.bin");
    let log_path = out.join("metrics.jsonl");

    let resuming = resume && ckpt_path.exists();
    let mut trainer = if resuming {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        info!("resuming from {} at epoch {}", ckpt_path.display(), ckpt.state.epoch);
        ckpt.into_trainer(&kg, graph.as_ref(), &cfg)?
    } else {
        Trainer::new(&kg, graph.as_ref(), cfg.encoder_config(), cfg.decoder_config(), cfg.train_config())?
    };
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resuming)
            .truncate(!resuming)
            .open(&log_path)
            .map_err(io_err(&log_path))?,
    );
    let header = json!({"provenance": provenance("train", &cfg), "resumed_at_epoch": trainer.state().epoch});
    writeln!(log, "{header}").map_err(io_err(&log_path))?;

    let save = |t: &Trainer<'_>| Checkpoint::capture(t, &cfg).save(&ckpt_path);
    let mut session_epochs = 0usize;
    while !trainer.is_finished() {
        let Some(rec) = trainer.step()? else { continue };
        session_epochs += 1;
        writeln!(log, "{}", serde_json::to_string(&rec).expect("json")).map_err(io_err(&log_path))?;
        log.flush().map_err(io_err(&log_path))?;
        match rec.valid_mrr {
            Some(v) => info!("epoch {} loss {:.6} valid_mrr {:.4}", rec.epoch, rec.train_loss, v),
            None => info!("epoch {} loss {:.6}", rec.epoch, rec.train_loss),
        }
        if checkpoint_every > 0 && session_epochs % checkpoint_every == 0 {
            save(&trainer)?;
        }
        if stop_after.is_some_and(|n| session_epochs >= n) {
            break;
        }
    }
    save(&trainer)?;
    let st = trainer.state();
    let summary = json!({
        "finished": trainer.is_finished(),
        "epochs_done": st.epoch,
        "best_valid_mrr": st.best_valid_mrr,
        "best_epoch": st.best_epoch,
        "wall_time": trainer.wall_time(),
        "checkpoint": ckpt_path.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

/// Configuration, graph and parameters recovered from a checkpoint.
struct Restored {
    cfg: ExperimentConfig,
    raw: KnowledgeGraph,
    kg: KnowledgeGraph,
    graph: Option<ProximityGraph>,
    params: ModelParams,
}

fn restore(path: &Path, data_dir: Option<&str>, output: Option<&str>, last: bool) -> Result<Restored, CliError> {
    let ckpt = Checkpoint::load(path)?;
    let mut cfg = ExperimentConfig::parse(&ckpt.config_text)?;
    if let Some(d) = data_dir {
        cfg.data_dir = d.to_owned();
    }
    cfg.output_dir = match output {
        Some(o) => o.to_owned(),
        None => path.parent().map_or(".".into(), |p| p.display().to_string()),
    };
    let raw = load_kg(&cfg)?;
    let kg = raw.augment_inverse()?;
    output_dir(&cfg)?;
    let graph = proximity_for(&raw, &cfg)?;
    let named = match (last, ckpt.best) {
        (false, Some(best)) => best,
        _ => ckpt.params,
    };
    let mut params = ModelParams::init(
        kg.num_entities(),
        kg.num_relations(),
        &cfg.encoder_config(),
        &cfg.decoder_config(),
        0,
    )?;
    params.load_tensors(named)?;
    Ok(Restored {
        cfg,
        raw,
        kg,
        graph,
        params,
    })
}

pub fn cmd_evaluate(args: &CheckpointArgs, split: Split) -> Result<(), CliError> {
    set_threads(args.threads);
    if split == Split::Train {
        return Err(CliError::Usage("evaluate ranks the valid or test split".into()));
    }
    let r = restore(&args.checkpoint, args.data_dir.as_deref(), args.output_dir.as_deref(), args.last)?;
    let filter = FilterIndex::new(&r.kg);
    let t0 = Instant::now();
    let (metrics, cases) = evaluate_model(
        &r.kg,
        r.graph.as_ref(),
        &r.params,
        &r.cfg.encoder_config(),
        &r.cfg.decoder_config(),
        &filter,
        split,
        r.cfg.eval_batch_size,
    )?;
    info!("ranked {} queries in {:.2}s", cases.len(), t0.elapsed().as_secs_f64());
    let value = json!({
        "provenance": provenance("evaluate", &r.cfg),
        "parameters": if args.last { "last" } else { "best" },
        "metrics": metrics,
    });
    write_json(&Path::new(&r.cfg.output_dir).join(format!("metrics-{}.json", split.as_str())), &value)?;
    println!("{}", serde_json::to_string(&metrics).expect("json"));
    Ok(())
}

pub fn cmd_ntype(common: &CommonArgs, split: Split, checkpoint: Option<&Path>, last: bool) -> Result<(), CliError> {
    set_threads(common.threads);
    let (cfg, raw, ranked) = match checkpoint {
        Some(p) => {
            let r = restore(p, common.data_dir.as_deref(), common.output_dir.as_deref(), last)?;
            let filter = FilterIndex::new(&r.kg);
            let (_, cases) = evaluate_model(
                &r.kg,
                r.graph.as_ref(),
                &r.params,
                &r.cfg.encoder_config(),
                &r.cfg.decoder_config(),
                &filter,
                split,
                r.cfg.eval_batch_size,
            )?;
            (r.cfg, r.raw, Some(cases))
        }
        None => {
            let cfg = common.resolve()?;
            let raw = load_kg(&cfg)?;
            (cfg, raw, None)
        }
    };
    let t0 = Instant::now();
    let report = ntype_report(&raw, split);
    info!("binned {} cases in {:.2}s", report.total, t0.elapsed().as_secs_f64());
    let out = output_dir(&cfg)?;
    let mut table = Vec::new();
    report.write_tsv(&mut table).map_err(io_err(&out))?;
    let path = out.join(format!("ntype-{}.tsv", split.as_str()));
    fs::write(&path, provenance_comment("ntype", &cfg) + std::str::from_utf8(&table).expect("utf8")).map_err(io_err(&path))?;
    print!("{}", String::from_utf8_lossy(&table));
    if let Some(cases) = ranked {
        let mut s = String::from("range\tcount\tmrr\n");
        for b in ntype_mrr_breakdown(&cases) {
            s.push_str(&format!("{}\t{}\t{:.4}\n", b.label, b.count, b.mrr));
        }
        let mrr_path = out.join(format!("ntype-mrr-{}.tsv", split.as_str()));
        fs::write(&mrr_path, provenance_comment("ntype", &cfg) + &s).map_err(io_err(&mrr_path))?;
        print!("\n{s}");
    }
    Ok(())
}

pub fn cmd_grid(common: &CommonArgs, grid: Option<&Path>, budget: Budget, parallel: bool) -> Result<(), CliError> {
    set_threads(common.threads);
    let mut base_args = common.clone();
    base_args.off_grid = true;
    let base = base_args.resolve()?;
    let spec = match grid {
        Some(p) => GridSpec::parse(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => GridSpec::published(),
    };
    let mut configs = spec.expand(&base)?;
    if !common.off_grid && !base.allow_off_grid {
        for c in &mut configs {
            c.allow_off_grid = false;
            c.validate()?;
        }
    }
    let raw = load_kg(&base)?;
    let out = output_dir(&base)?;
    info!("grid of {} trials", configs.len());
    let report = run_grid(&configs, &spec.keys(), budget, parallel, |c| {
        let t = train_trial(&raw, c).map_err(|e| e.to_string());
        match &t {
            Ok(o) => info!("trial {} valid_mrr {:.4}", c.digest(), o.valid_mrr),
            Err(e) => warn!("trial {} failed: {e}", c.digest()),
        }
        t
    });
    let path = out.join("grid.tsv");
    let mut table = Vec::new();
    report.write_tsv(&mut table).map_err(io_err(&path))?;
    fs::write(&path, provenance_comment("grid", &base) + std::str::from_utf8(&table).expect("utf8")).map_err(io_err(&path))?;
    if report.incomplete {
        warn!("budget exhausted; trial table is incomplete");
    }
    print!("{}", String::from_utf8_lossy(&table));
    Ok(())
}
