//! Runs configured experiments: data preparation, training with scheduled
//! evaluation, repeats with derived seeds, grid search, and output files.
//!
//! Output directory layout:
//!
//! - `manifest.json`: resolved config, seed, per-repeat seeds, code version.
//! - `summary.csv`: final validation/test metrics, mean and sample std over repeats.
//! - `repeat_<i>/metrics.csv`: `round,split,metric,value,cumulative_params_communicated`.
//! - `repeat_<i>/params.bin`: final global parameters (see [`write_params`]).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{train_centralized_observed, CentralizedConfig};
use crate::config::{AlgorithmKind, ExperimentConfig, Task};
use crate::data::{
    build_corpus, gen_synthetic_corpus, gen_synthetic_mf, parse_movielens, parse_token_corpus,
    split_by_timestamp, split_users,
};
use crate::error::{Error, Result};
use crate::eval::{recon_eval, standard_eval, CommLedger, EvalMode, ReconEvalConfig};
use crate::model::{ClientDataset, MetricMap, Model};
use crate::models::{MatFacConfig, MatrixFactorization, NextWordModel, NwpConfig};
use crate::params::{Layout, Params};
use crate::rng::{derive_seed, stream};
use crate::server::{Algorithm, LocalStore, TrainConfig, Trainer};

/// Clients split into training, validation and test populations, plus the
/// model built for them.
pub struct Prepared {
    pub model: Box<dyn Model>,
    pub train: Vec<ClientDataset>,
    pub valid: Vec<ClientDataset>,
    pub test: Vec<ClientDataset>,
    /// Seen-user regime: the three parts are per-user timestamp splits of
    /// the same users. Otherwise they are disjoint user sets.
    pub seen_users: bool,
    /// Out-of-vocabulary token rate of a next-word corpus.
    pub oov_rate: Option<f64>,
}

/// Model, clients and (for text tasks) the out-of-vocabulary rate.
pub type LoadedTask = (Box<dyn Model>, Vec<ClientDataset>, Option<f64>);

/// Loads or generates the task's clients and builds the matching model.
pub fn load_task(cfg: &ExperimentConfig) -> Result<LoadedTask> {
    match cfg.task {
        Task::Matfac => {
            let path = cfg
                .data
                .ratings_path
                .as_ref()
                .ok_or_else(|| Error::config("data.ratings_path", "missing"))?;
            let d = parse_movielens(path)?;
            if d.clients.is_empty() {
                return Err(Error::Data(format!(
                    "{} contains no ratings",
                    path.display()
                )));
            }
            let model =
                MatrixFactorization::new(MatFacConfig::new(d.num_items, cfg.model.embed_dim))?;
            Ok((Box::new(model), d.clients, None))
        }
        Task::Synthetic => {
            let s = cfg
                .data
                .synthetic_mf
                .as_ref()
                .ok_or_else(|| Error::config("data.synthetic_mf", "missing"))?;
            let d = gen_synthetic_mf(s)?;
            let model =
                MatrixFactorization::new(MatFacConfig::new(s.num_items, cfg.model.embed_dim))?;
            Ok((Box::new(model), d.clients, None))
        }
        Task::OovNwp => {
            let records = match (&cfg.data.corpus_path, &cfg.data.synthetic_corpus) {
                (Some(path), _) => parse_token_corpus(&fs::read_to_string(path)?)?,
                (None, Some(s)) => gen_synthetic_corpus(s)?,
                (None, None) => return Err(Error::config("data.corpus_path", "missing")),
            };
            let m = &cfg.model;
            let nwp = NwpConfig::new(
                m.vocab_size,
                m.num_oov_buckets,
                m.embed_dim,
                m.context_window,
            );
            let corpus = build_corpus(&records, &nwp)?;
            if corpus.clients.is_empty() {
                return Err(Error::Data("corpus contains no sentences".into()));
            }
            let oov = corpus.stats.oov_rate();
            Ok((
                Box::new(NextWordModel::new(nwp)?),
                corpus.clients,
                Some(oov),
            ))
        }
    }
}

/// Loads the data and splits it for the config's evaluation regime. The
/// user split is drawn from the config seed, so repeats share it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (model, clients, oov_rate) = load_task(cfg)?;
    let seen_users = cfg.seen_users();
    let split = if seen_users {
        split_by_timestamp(&clients)
    } else {
        split_users(&clients, &mut stream(cfg.seed, 0, u64::MAX, "user_split"))
    };
    Ok(Prepared {
        model,
        train: split.train,
        valid: split.valid,
        test: split.test,
        seen_users,
        oov_rate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub cumulative_params_communicated: u64,
}

/// Result of one training run and its evaluations.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub global: Params,
    pub locals: Option<LocalStore>,
    pub ledger: CommLedger,
    /// Metrics at the last scheduled evaluation, keyed `<mode>.<metric>`.
    pub final_valid: MetricMap,
    pub final_test: MetricMap,
}

impl RunResult {
    /// `(round, cumulative params, value)` for one validation metric.
    pub fn curve(&self, metric: &str) -> Vec<(usize, u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == "valid" && r.metric == metric)
            .map(|r| (r.round, r.cumulative_params_communicated, r.value))
            .collect()
    }
}

pub fn mode_name(mode: &EvalMode) -> &'static str {
    match mode {
        EvalMode::StandardEval => "standard_eval",
        EvalMode::ReconEval { .. } => "recon_eval",
    }
}

/// Scores `clients` under one evaluation mode. ReconEval reconstructs with
/// the config's evaluation split and client hyperparameters.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &dyn Model,
    g: &Params,
    locals: Option<&LocalStore>,
    clients: &[ClientDataset],
    mode: &EvalMode,
    seed: u64,
) -> Result<MetricMap> {
    let name = mode_name(mode);
    let mut out = MetricMap::new();
    match mode {
        EvalMode::StandardEval => {
            let store = locals.ok_or_else(|| {
                Error::Evaluation("standard_eval needs stored local parameters".into())
            })?;
            let report = standard_eval(model, g, store, clients)?;
            for (k, v) in report.metrics {
                out.insert(format!("{name}.{k}"), v);
            }
            for (k, v) in report.client_macro {
                out.insert(format!("{name}.{k}_client_macro"), v);
            }
        }
        EvalMode::ReconEval {
            repeats,
            clients_per_repeat,
        } => {
            let rc = ReconEvalConfig {
                repeats: *repeats,
                clients_per_repeat: *clients_per_repeat,
                split: cfg.eval_split,
                hyper: cfg.client_hyper,
                seed,
            };
            let report = recon_eval(model, g, clients, &rc)?;
            for (k, v) in report.mean {
                out.insert(format!("{name}.{k}"), v);
            }
            for (k, v) in report.std {
                out.insert(format!("{name}.{k}_std"), v);
            }
            for (k, v) in report.macro_mean {
                out.insert(format!("{name}.{k}_client_macro"), v);
            }
        }
    }
    Ok(out)
}

struct Recorder<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Prepared,
    seed: u64,
    total: usize,
    rows: Vec<MetricsRow>,
    final_valid: MetricMap,
    final_test: MetricMap,
}

impl Recorder<'_> {
    fn train_rows(&mut self, round: usize, cumulative: u64, metrics: &MetricMap) {
        for (k, v) in metrics {
            self.push(round, "train", k, *v, cumulative);
        }
    }

    fn push(&mut self, round: usize, split: &str, metric: &str, value: f64, cumulative: u64) {
        self.rows.push(MetricsRow {
            round,
            split: split.to_owned(),
            metric: metric.to_owned(),
            value,
            cumulative_params_communicated: cumulative,
        });
    }

    /// Validation at scheduled rounds; test as well after the last round.
    fn checkpoint(
        &mut self,
        round: usize,
        cumulative: u64,
        g: &Params,
        locals: Option<&LocalStore>,
    ) -> Result<()> {
        let last = round == self.total;
        let every = self.cfg.eval_every;
        if !(round == 0 || last || (every > 0 && round.is_multiple_of(every))) {
            return Ok(());
        }
        let model = self.data.model.as_ref();
        let parts: [(&str, &[ClientDataset], bool); 2] = [
            ("valid", &self.data.valid, true),
            ("test", &self.data.test, last),
        ];
        for (split, clients, due) in parts {
            if !due || clients.is_empty() {
                continue;
            }
            let mut all = MetricMap::new();
            for mode in &self.cfg.eval {
                let seed = derive_seed(self.seed, &format!("eval_{split}"), round as u64);
                all.extend(evaluate(self.cfg, model, g, locals, clients, mode, seed)?);
            }
            for (k, v) in &all {
                self.push(round, split, k, *v, cumulative);
            }
            if last {
                match split {
                    "valid" => self.final_valid = all,
                    _ => self.final_test = all,
                }
            }
        }
        Ok(())
    }
}

/// One training run with seed `seed` on prepared data.
pub fn run_once(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<RunResult> {
    let model = data.model.as_ref();
    let mut rec = Recorder {
        cfg,
        data,
        seed,
        total: 0,
        rows: Vec::new(),
        final_valid: MetricMap::new(),
        final_test: MetricMap::new(),
    };
    match cfg.algorithm {
        AlgorithmKind::Fedrecon | AlgorithmKind::Fedavg => {
            let algorithm = if cfg.algorithm == AlgorithmKind::Fedrecon {
                Algorithm::FedRecon
            } else {
                Algorithm::FedAvg
            };
            let tc = TrainConfig {
                algorithm,
                rounds: cfg.rounds,
                clients_per_round: cfg.clients_per_round,
                split: cfg.split,
                hyper: cfg.client_hyper,
                server_opt: cfg.server_opt,
                seed,
            };
            rec.total = cfg.rounds;
            let mut trainer = Trainer::new(model, &data.train, tc)?;
            rec.checkpoint(0, 0, trainer.global(), trainer.locals())?;
            for _ in 0..cfg.rounds {
                let report = trainer.step_round()?;
                let done = report.round + 1;
                let cumulative = trainer.ledger().total();
                rec.train_rows(done, cumulative, &report.train_metrics);
                rec.checkpoint(done, cumulative, trainer.global(), trainer.locals())?;
            }
            let (global, locals, ledger) = trainer.into_parts();
            Ok(RunResult {
                seed,
                rows: rec.rows,
                global,
                locals,
                ledger,
                final_valid: rec.final_valid,
                final_test: rec.final_test,
            })
        }
        AlgorithmKind::Centralized => {
            let cc = CentralizedConfig {
                epochs: cfg.centralized.epochs,
                batch_size: cfg.centralized.batch_size,
                rate: cfg.centralized.rate,
                seed,
            };
            rec.total = cc.epochs;
            // Same initial state train_centralized starts from.
            let g0 = model.init_global(&mut stream(seed, 0, u64::MAX, "global_init"));
            let l0 = LocalStore::initialize(model, &data.train, seed);
            rec.checkpoint(0, 0, &g0, Some(&l0))?;
            let mut failure = None;
            let out = train_centralized_observed(model, &data.train, &cc, |epoch, g, l, loss| {
                let done = epoch + 1;
                rec.push(done, "train", "loss", loss, 0);
                if let Err(e) = rec.checkpoint(done, 0, g, Some(l)) {
                    failure = Some(e.to_string());
                    return Err(e);
                }
                Ok(())
            })?;
            debug_assert!(failure.is_none());
            Ok(RunResult {
                seed,
                rows: rec.rows,
                global: out.global,
                locals: Some(out.locals),
                ledger: CommLedger::default(),
                final_valid: rec.final_valid,
                final_test: rec.final_test,
            })
        }
    }
}

/// Final metric aggregated over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub split: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub repeat_seeds: Vec<u64>,
    pub code_version: String,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config: cfg.clone(),
            seed: cfg.seed,
            repeat_seeds: repeat_seeds(cfg),
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.config.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutcome {
    pub fn mean(&self, split: &str, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.mean)
    }
}

/// Seeds of the independent reruns, derived from the config seed.
pub fn repeat_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.repeats as u64)
        .map(|i| derive_seed(cfg.seed, "repeat", i))
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut by_key: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (split, map) in [("valid", &r.final_valid), ("test", &r.final_test)] {
            for (k, v) in map {
                by_key.entry((split, k)).or_default().push(*v);
            }
        }
    }
    by_key
        .into_iter()
        .map(|((split, metric), values)| {
            let (mean, std) = mean_std(&values);
            SummaryRow {
                split: split.to_owned(),
                metric: metric.to_owned(),
                mean,
                std,
                repeats: values.len(),
            }
        })
        .collect()
}

/// All repeats on already prepared data; writes nothing.
pub fn run_prepared(cfg: &ExperimentConfig, data: &Prepared) -> Result<ExperimentOutcome> {
    let runs = repeat_seeds(cfg)
        .into_iter()
        .map(|seed| run_once(cfg, data, seed))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&runs);
    Ok(ExperimentOutcome { runs, summary })
}

/// Prepares data, runs every repeat and, when `output_dir` is set, writes
/// the manifest, metrics and parameters.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let outcome = run_prepared(cfg, &data)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(cfg, &outcome, dir)?;
    }
    Ok(outcome)
}

pub fn write_outputs(
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&Manifest::new(cfg))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    write_csv(&outcome.summary, &dir.join("summary.csv"))?;
    for (i, run) in outcome.runs.iter().enumerate() {
        let sub = repeat_dir(dir, i);
        fs::create_dir_all(&sub)?;
        write_csv(&run.rows, &sub.join("metrics.csv"))?;
        write_params(&run.global, &sub.join("params.bin"))?;
    }
    Ok(())
}

pub fn repeat_dir(dir: &Path, repeat: usize) -> PathBuf {
    dir.join(format!("repeat_{repeat}"))
}

/// Serializes rows with a header line and RFC 4180 quoting.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub format: String,
    pub blocks: Vec<BlockHeader>,
    /// Number of f64 values following the header.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

pub const PARAMS_FORMAT: &str = "fedrecon-params-v1";

/// One line of JSON header (block names and shapes, value count), a
/// newline, then the values as little-endian 64-bit floats in block order.
pub fn write_params(p: &Params, path: &Path) -> Result<()> {
    let header = ParamsHeader {
        format: PARAMS_FORMAT.to_owned(),
        blocks: p
            .layout_arc()
            .blocks()
            .iter()
            .map(|b| BlockHeader {
                name: b.name.clone(),
                shape: b.shape.clone(),
            })
            .collect(),
        count: p.len(),
    };
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in p.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Params> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: ParamsHeader = serde_json::from_str(line.trim_end()).map_err(|e| {
        Error::Data(format!(
            "{}: unreadable parameter header: {e}",
            path.display()
        ))
    })?;
    if header.format != PARAMS_FORMAT {
        return Err(Error::Data(format!(
            "unknown parameter file format {:?}",
            header.format
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.count * 8 {
        return Err(Error::Data(format!(
            "parameter file holds {} bytes of values, header says {} values",
            bytes.len(),
            header.count
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let layout = Layout::new(header.blocks.into_iter().map(|b| (b.name, b.shape)))?;
    Params::from_values(Arc::new(layout), values)
}

/// One evaluated grid point.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub overrides: Value,
    pub config: ExperimentConfig,
    /// Mean final validation value of the selection metric.
    pub validation: Option<f64>,
    /// Why the point was excluded (divergence), if it was.
    pub excluded: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub metric: String,
    pub higher_is_better: bool,
    pub points: Vec<GridPoint>,
    pub best: usize,
    pub best_outcome: ExperimentOutcome,
}

impl GridResult {
    pub fn best_config(&self) -> &ExperimentConfig {
        &self.points[self.best].config
    }
}

/// Learning-rate grid for the config's task and algorithm, in a fixed order.
pub fn default_grid(cfg: &ExperimentConfig) -> Vec<Value> {
    if cfg.algorithm == AlgorithmKind::Centralized {
        return [0.1, 0.3, 1.0, 3.0]
            .iter()
            .map(|r| serde_json::json!({"centralized": {"rate": r}}))
            .collect();
    }
    let (servers, recons, updates): (&[f64], &[f64], &[f64]) = if cfg.task.is_matfac() {
        (&[0.1, 0.5, 1.0], &[0.1, 0.5], &[0.1, 0.5])
    } else {
        (&[0.01, 0.1, 0.3], &[0.3, 1.0], &[0.3, 1.0])
    };
    let mut out = Vec::new();
    for s in servers {
        for r in recons {
            for u in updates {
                out.push(serde_json::json!({
                    "server_opt": {"eta_s": s},
                    "client_hyper": {"eta_r": r, "eta_u": u},
                }));
            }
        }
    }
    out
}

/// Validation key used for model selection.
pub fn selection_key(cfg: &ExperimentConfig, model: &dyn Model) -> (String, bool) {
    let (metric, higher) = model.selection_metric();
    (format!("{}.{metric}", mode_name(&cfg.eval[0])), higher)
}

/// Runs every grid point (all repeats) and selects the best mean final
/// validation value; ties go to the earlier point. Points whose training
/// diverges are excluded and reported.
pub fn grid_search(cfg: &ExperimentConfig, data: &Prepared, grid: &[Value]) -> Result<GridResult> {
    if grid.is_empty() {
        return Err(Error::config("grid", "needs at least one point"));
    }
    if data.valid.is_empty() {
        return Err(Error::config(
            "grid",
            "selection needs a non-empty validation split",
        ));
    }
    let (metric, higher) = selection_key(cfg, data.model.as_ref());
    let mut points = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, ExperimentOutcome)> = None;
    for overrides in grid {
        let config = cfg.with(overrides.clone())?;
        let (validation, excluded) = match run_prepared(&config, data) {
            Ok(outcome) => match outcome.mean("valid", &metric) {
                Some(v) if v.is_finite() => {
                    let better = match &best {
                        None => true,
                        Some((_, b, _)) => (higher && v > *b) || (!higher && v < *b),
                    };
                    if better {
                        best = Some((points.len(), v, outcome));
                    }
                    (Some(v), None)
                }
                Some(v) => (None, Some(format!("non-finite validation {metric} = {v}"))),
                None => {
                    return Err(Error::Evaluation(format!(
                        "validation metric {metric} missing"
                    )))
                }
            },
            Err(e) if e.exit_code() == 3 => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        points.push(GridPoint {
            overrides: overrides.clone(),
            config,
            validation,
            excluded,
        });
    }
    let (best, _, best_outcome) =
        best.ok_or_else(|| Error::Numerical("every grid point diverged".into()))?;
    Ok(GridResult {
        metric,
        higher_is_better: higher,
        points,
        best,
        best_outcome,
    })
}

/// Smallest cumulative parameter count at which `curve` reaches `level`.
pub fn params_to_reach(
    curve: &[(usize, u64, f64)],
    level: f64,
    higher_is_better: bool,
) -> Option<u64> {
    curve
        .iter()
        .find(|(_, _, v)| {
            if higher_is_better {
                *v >= level
            } else {
                *v <= level
            }
        })
        .map(|(_, p, _)| *p)
}
