//! Reproduction recipes: fixed experiment families that regenerate the
//! MovieLens comparison table, the next-word mechanism table, the
//! step-count ablations and the communication curves.
//!
//! Every recipe takes a resolved base config and returns plain rows; the
//! `write` helpers turn them into CSV files.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::baselines::{finetune_eval_clients, FinetuneConfig, FinetuneKind};
use crate::config::{AlgorithmKind, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{per_client_params, relative_to, sweep_recon_steps, EvalMode, ReconEvalConfig};
use crate::experiment::{
    default_grid, grid_search, mode_name, prepare, run_prepared, write_csv, ExperimentOutcome,
    Prepared,
};
use crate::rng::derive_seed;
use crate::server::Algorithm;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecipeOptions {
    /// Select each row's learning rates by grid search on validation.
    pub grid: bool,
    /// Extra overrides applied to FedAvg rows when no grid is run.
    pub fedavg_overrides: Option<Value>,
}

impl RecipeOptions {
    /// Options for `base`'s task. Without a grid, FedAvg on matrix
    /// factorization uses an update rate of 0.1: at the shared default of 0.5
    /// its jointly trained user embeddings diverge.
    pub fn for_task(base: &ExperimentConfig, grid: bool) -> Self {
        let fedavg_overrides = base
            .task
            .is_matfac()
            .then(|| json!({"client_hyper": {"eta_u": 0.1}}));
        Self {
            grid,
            fedavg_overrides,
        }
    }
}

/// One evaluated grid point, flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub row: String,
    pub overrides: String,
    pub validation: Option<f64>,
    pub selected: bool,
    pub excluded: Option<String>,
}

/// Config chosen for one table row together with its outcome.
struct Selected {
    config: ExperimentConfig,
    outcome: Option<ExperimentOutcome>,
    note: Option<String>,
}

fn select(
    row: &str,
    cfg: ExperimentConfig,
    data: &Prepared,
    grid: Option<Vec<Value>>,
    log: &mut Vec<GridRow>,
) -> Result<Selected> {
    let Some(grid) = grid else {
        return Ok(match run_prepared(&cfg, data) {
            Ok(outcome) => Selected {
                config: cfg,
                outcome: Some(outcome),
                note: None,
            },
            Err(e) if e.exit_code() == 3 => Selected {
                config: cfg,
                outcome: None,
                note: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        });
    };
    match grid_search(&cfg, data, &grid) {
        Ok(result) => {
            for (i, p) in result.points.iter().enumerate() {
                log.push(GridRow {
                    row: row.to_owned(),
                    overrides: p.overrides.to_string(),
                    validation: p.validation,
                    selected: i == result.best,
                    excluded: p.excluded.clone(),
                });
            }
            Ok(Selected {
                config: result.best_config().clone(),
                outcome: Some(result.best_outcome),
                note: None,
            })
        }
        Err(e) if e.exit_code() == 3 => Ok(Selected {
            config: cfg,
            outcome: None,
            note: Some(e.to_string()),
        }),
        Err(e) => Err(e),
    }
}

/// Server and client-update rates only; FedAvg has no reconstruction rate.
pub fn fedavg_grid(cfg: &ExperimentConfig) -> Vec<Value> {
    let (servers, updates): (&[f64], &[f64]) = if cfg.task.is_matfac() {
        (&[0.1, 0.5, 1.0], &[0.1, 0.5])
    } else {
        (&[0.01, 0.1, 0.3], &[0.3, 1.0])
    };
    servers
        .iter()
        .flat_map(|s| {
            updates
                .iter()
                .map(move |u| json!({"server_opt": {"eta_s": s}, "client_hyper": {"eta_u": u}}))
        })
        .collect()
}

fn recon_mode(base: &ExperimentConfig) -> EvalMode {
    base.eval
        .iter()
        .copied()
        .find(|m| matches!(m, EvalMode::ReconEval { .. }))
        .unwrap_or(EvalMode::ReconEval {
            repeats: 50,
            clients_per_repeat: 50,
        })
}

fn eval_json(mode: EvalMode) -> Value {
    json!([mode])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub row: String,
    pub algorithm: String,
    pub eval: String,
    pub rmse: f64,
    pub rmse_std: f64,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub repeats: usize,
    pub config: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Table1 {
    pub rows: Vec<Table1Row>,
    pub grid: Vec<GridRow>,
}

impl Table1 {
    pub fn get(&self, row: &str) -> Option<&Table1Row> {
        self.rows.iter().find(|r| r.row == row)
    }
}

pub const CENTRALIZED_STANDARD: &str = "Centralized + Standard Eval";
pub const CENTRALIZED_RECON: &str = "Centralized + ReconEval";
pub const FEDAVG_STANDARD: &str = "FedAvg + Standard Eval";
pub const FEDAVG_RECON: &str = "FedAvg + ReconEval";
pub const FEDRECON: &str = "FedRecon";

fn table1_row(row: &str, sel: &Selected) -> Table1Row {
    let mode = mode_name(&sel.config.eval[0]);
    let stat = |metric: &str| -> (f64, f64, usize) {
        sel.outcome
            .as_ref()
            .and_then(|o| {
                o.summary
                    .iter()
                    .find(|r| r.split == "test" && r.metric == format!("{mode}.{metric}"))
            })
            .map_or((f64::NAN, f64::NAN, 0), |r| (r.mean, r.std, r.repeats))
    };
    let (rmse, rmse_std, repeats) = stat("rmse");
    let (accuracy, accuracy_std, _) = stat("accuracy");
    Table1Row {
        row: row.to_owned(),
        algorithm: sel.config.algorithm.as_str().to_owned(),
        eval: mode.to_owned(),
        rmse,
        rmse_std,
        accuracy,
        accuracy_std,
        repeats,
        config: sel.config.to_json().to_string(),
        note: sel.note.clone(),
    }
}

/// The five matrix-factorization rows: centralized and FedAvg under both
/// evaluations, and FedRecon under reconstruction evaluation.
///
/// Baselines scored with ReconEval reconstruct with FedRecon's selected
/// reconstruction steps and rate.
pub fn table1(base: &ExperimentConfig, opts: &RecipeOptions) -> Result<Table1> {
    if !base.task.is_matfac() {
        return Err(Error::config(
            "task",
            "table1 needs a matrix-factorization task",
        ));
    }
    let recon = recon_mode(base);
    let recon_cfg = base.with(json!({"eval": eval_json(recon)}))?;
    // FedRecon keeps no locals; the seen-user rows set their own algorithm.
    let standard_cfg =
        base.with(json!({"algorithm": "fedavg", "eval": [{"kind": "standard_eval"}]}))?;
    let unseen = prepare(&recon_cfg)?;
    let seen = prepare(&standard_cfg)?;
    let mut out = Table1::default();

    let fedrecon_cfg = recon_cfg.with(json!({"algorithm": "fedrecon"}))?;
    let grid = opts.grid.then(|| default_grid(&fedrecon_cfg));
    let fedrecon = select(FEDRECON, fedrecon_cfg, &unseen, grid, &mut out.grid)?;
    let chosen = fedrecon.config.client_hyper;
    let recon_hyper = json!({"client_hyper": {"k_r": chosen.k_r, "eta_r": chosen.eta_r}});

    let fedavg_extra = if opts.grid {
        None
    } else {
        opts.fedavg_overrides.clone()
    };
    let rows: [(&str, &ExperimentConfig, &Prepared, AlgorithmKind); 4] = [
        (
            CENTRALIZED_STANDARD,
            &standard_cfg,
            &seen,
            AlgorithmKind::Centralized,
        ),
        (
            CENTRALIZED_RECON,
            &recon_cfg,
            &unseen,
            AlgorithmKind::Centralized,
        ),
        (FEDAVG_STANDARD, &standard_cfg, &seen, AlgorithmKind::Fedavg),
        (FEDAVG_RECON, &recon_cfg, &unseen, AlgorithmKind::Fedavg),
    ];
    let mut selected = Vec::new();
    for (name, cfg, data, alg) in rows {
        let mut cfg = cfg.with(json!({"algorithm": alg}))?;
        if !cfg.seen_users() {
            cfg = cfg.with(recon_hyper.clone())?;
        }
        if alg == AlgorithmKind::Fedavg {
            if let Some(extra) = &fedavg_extra {
                cfg = cfg.with(extra.clone())?;
            }
        }
        let grid = opts.grid.then(|| match alg {
            AlgorithmKind::Fedavg => fedavg_grid(&cfg),
            _ => default_grid(&cfg),
        });
        selected.push((name, select(name, cfg, data, grid, &mut out.grid)?));
    }
    for (name, sel) in &selected {
        out.rows.push(table1_row(name, sel));
    }
    out.rows.push(table1_row(FEDRECON, &fedrecon));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Row {
    pub row: String,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub repeats: usize,
    /// Parameters sent plus received by one client in one round.
    pub params_per_client_round: u64,
    pub communication: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Table2 {
    pub rows: Vec<Table2Row>,
    pub grid: Vec<GridRow>,
    pub oov_rate: Option<f64>,
}

impl Table2 {
    pub fn get(&self, row: &str) -> Option<&Table2Row> {
        self.rows.iter().find(|r| r.row == row)
    }
}

pub const NWP_FEDAVG: &str = "FedAvg (1 OOV)";
pub const NWP_FEDRECON_1: &str = "FedRecon (1 OOV)";
pub const NWP_FEDRECON_500: &str = "FedRecon (500 OOV)";
pub const NWP_OOV_FINETUNE: &str = "OOV Finetuning (500 OOV)";
pub const NWP_FULL_FINETUNE: &str = "Full Finetuning (500 OOV)";
pub const NWP_FEDRECON_FINETUNE: &str = "FedRecon+Finetune (500 OOV)";
pub const NWP_NO_SPLIT: &str = "FedRecon No Split (500 OOV)";
pub const NWP_JOINT: &str = "FedRecon Joint Training (500 OOV)";

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

fn comm(cfg: &ExperimentConfig, data: &Prepared) -> (u64, String) {
    let g = data.model.global_layout().len();
    let l = data.model.local_layout().len();
    let (alg, label) = match cfg.algorithm {
        AlgorithmKind::Fedrecon => (Algorithm::FedRecon, format!("2|g| = 2*{g}")),
        _ => (Algorithm::FedAvg, format!("2|l| + 2|g| = 2*{l} + 2*{g}")),
    };
    let (down, up) = per_client_params(alg, g, l);
    (down + up, label)
}

/// Next-word mechanism rows on the configured corpus: the OOV-bucket
/// comparison, finetuning baselines, and the no-split and joint-training
/// variants, each with its per-client communication.
pub fn table2_mech(base: &ExperimentConfig, opts: &RecipeOptions) -> Result<Table2> {
    if base.task.is_matfac() {
        return Err(Error::config(
            "task",
            "table2-mech needs the next-word task",
        ));
    }
    if base.seen_users() {
        return Err(Error::config(
            "eval",
            "table2-mech evaluates held-out users with recon_eval",
        ));
    }
    let mut out = Table2::default();
    let buckets = |n: usize| json!({"model": {"num_oov_buckets": n}});
    let fedavg_extra = if opts.grid {
        None
    } else {
        opts.fedavg_overrides.clone()
    };

    let run =
        |name: &str, cfg: ExperimentConfig, out: &mut Table2| -> Result<(Selected, Prepared)> {
            let data = prepare(&cfg)?;
            if out.oov_rate.is_none() {
                out.oov_rate = data.oov_rate;
            }
            let grid = opts.grid.then(|| match cfg.algorithm {
                AlgorithmKind::Fedavg => fedavg_grid(&cfg),
                _ => default_grid(&cfg),
            });
            let sel = select(name, cfg, &data, grid, &mut out.grid)?;
            Ok((sel, data))
        };
    let plain_row = |name: &str, sel: &Selected, data: &Prepared| -> Table2Row {
        let mode = mode_name(&sel.config.eval[0]);
        let key = format!("{mode}.accuracy");
        let stat = sel
            .outcome
            .as_ref()
            .and_then(|o| {
                o.summary
                    .iter()
                    .find(|r| r.split == "test" && r.metric == key)
            })
            .map_or((f64::NAN, f64::NAN, 0), |r| (r.mean, r.std, r.repeats));
        let (params, label) = comm(&sel.config, data);
        Table2Row {
            row: name.to_owned(),
            accuracy: stat.0,
            accuracy_std: stat.1,
            repeats: stat.2,
            params_per_client_round: params,
            communication: label,
            note: sel.note.clone(),
        }
    };

    let mut fedavg_cfg = base
        .with(json!({"algorithm": "fedavg"}))?
        .with(buckets(0))?;
    if let Some(extra) = &fedavg_extra {
        fedavg_cfg = fedavg_cfg.with(extra.clone())?;
    }
    let (sel, data) = run(NWP_FEDAVG, fedavg_cfg, &mut out)?;
    out.rows.push(plain_row(NWP_FEDAVG, &sel, &data));

    let fedrecon_cfg = base.with(json!({"algorithm": "fedrecon"}))?;
    let (sel, data) = run(NWP_FEDRECON_1, fedrecon_cfg.with(buckets(1))?, &mut out)?;
    out.rows.push(plain_row(NWP_FEDRECON_1, &sel, &data));
    let (recon500, recon_data) = run(NWP_FEDRECON_500, fedrecon_cfg.with(buckets(500))?, &mut out)?;
    out.rows
        .push(plain_row(NWP_FEDRECON_500, &recon500, &recon_data));

    let mut fedavg500 = base
        .with(json!({"algorithm": "fedavg"}))?
        .with(buckets(500))?;
    if let Some(extra) = &fedavg_extra {
        fedavg500 = fedavg500.with(extra.clone())?;
    }
    let (avg500, avg_data) = run("FedAvg (500 OOV)", fedavg500, &mut out)?;
    for (name, kind, sel, data) in [
        (
            NWP_OOV_FINETUNE,
            FinetuneKind::FinetuneLocalOnly,
            &avg500,
            &avg_data,
        ),
        (
            NWP_FULL_FINETUNE,
            FinetuneKind::FinetuneFull,
            &avg500,
            &avg_data,
        ),
        (
            NWP_FEDRECON_FINETUNE,
            FinetuneKind::FedreconPlusFinetune,
            &recon500,
            &recon_data,
        ),
    ] {
        out.rows.push(finetune_row(name, kind, sel, data)?);
    }

    for (name, variant) in [
        (NWP_NO_SPLIT, json!({"split": {"kind": "no_split"}})),
        (NWP_JOINT, json!({"client_hyper": {"joint_training": true}})),
    ] {
        let (sel, data) = run(name, recon500.config.with(variant)?, &mut out)?;
        out.rows.push(plain_row(name, &sel, &data));
    }
    Ok(out)
}

fn finetune_row(
    name: &str,
    kind: FinetuneKind,
    sel: &Selected,
    data: &Prepared,
) -> Result<Table2Row> {
    let cfg = &sel.config;
    let hyper = cfg.client_hyper;
    let fc = FinetuneConfig {
        kind,
        steps: hyper.k_r,
        rate: if kind == FinetuneKind::FinetuneLocalOnly {
            hyper.eta_r
        } else {
            hyper.eta_u
        },
        batch_size: hyper.batch_size,
        recon: hyper,
    };
    let (params, label) = comm(cfg, data);
    let Some(outcome) = &sel.outcome else {
        return Ok(Table2Row {
            row: name.to_owned(),
            accuracy: f64::NAN,
            accuracy_std: f64::NAN,
            repeats: 0,
            params_per_client_round: params,
            communication: label,
            note: sel.note.clone(),
        });
    };
    let mut values = Vec::new();
    for run in &outcome.runs {
        let report = finetune_eval_clients(
            data.model.as_ref(),
            &run.global,
            run.locals.as_ref(),
            &data.test,
            &cfg.eval_split,
            &fc,
            derive_seed(run.seed, "finetune_test", cfg.rounds as u64),
        )?;
        values.push(report.metrics.get("accuracy").copied().unwrap_or(f64::NAN));
    }
    let (accuracy, accuracy_std) = mean_std(&values);
    Ok(Table2Row {
        row: name.to_owned(),
        accuracy,
        accuracy_std,
        repeats: values.len(),
        params_per_client_round: params,
        communication: label,
        note: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig3Row {
    /// `recon_steps` re-evaluates the base model; `update_steps` retrains.
    pub panel: String,
    pub steps: usize,
    pub is_base: bool,
    pub accuracy: f64,
    pub rmse: Option<f64>,
    pub relative_accuracy: f64,
}

pub const FIG3_RECON_STEPS: [usize; 5] = [0, 1, 2, 5, 10];
pub const FIG3_UPDATE_STEPS: [usize; 4] = [1, 2, 5, 10];

/// Step-count ablations around a FedRecon base config. Reconstruction steps
/// are varied at evaluation time only; update steps require retraining at
/// the same round budget. Accuracy is the held-out test ReconEval mean.
pub fn fig3(base: &ExperimentConfig) -> Result<Vec<Fig3Row>> {
    let cfg = base.with(json!({"algorithm": "fedrecon"}))?;
    if cfg.seen_users() {
        return Err(Error::config(
            "eval",
            "fig3 evaluates held-out users with recon_eval",
        ));
    }
    let EvalMode::ReconEval {
        repeats,
        clients_per_repeat,
    } = cfg.eval[0]
    else {
        unreachable!("recon_eval checked above");
    };
    let data = prepare(&cfg)?;
    let outcome = run_prepared(&cfg, &data)?;
    let base_k_r = cfg.client_hyper.k_r;
    let mut steps: Vec<usize> = FIG3_RECON_STEPS.to_vec();
    if !steps.contains(&base_k_r) {
        steps.push(base_k_r);
    }
    let mut acc = vec![Vec::new(); steps.len()];
    let mut rmse = vec![Vec::new(); steps.len()];
    for run in &outcome.runs {
        let rc = ReconEvalConfig {
            repeats,
            clients_per_repeat,
            split: cfg.eval_split,
            hyper: cfg.client_hyper,
            seed: derive_seed(run.seed, "eval_test", cfg.rounds as u64),
        };
        for (i, (_, report)) in
            sweep_recon_steps(data.model.as_ref(), &run.global, &data.test, &rc, &steps)?
                .into_iter()
                .enumerate()
        {
            acc[i].push(report.mean.get("accuracy").copied().unwrap_or(f64::NAN));
            if let Some(v) = report.mean.get("rmse") {
                rmse[i].push(*v);
            }
        }
    }
    let base_idx = steps
        .iter()
        .position(|&s| s == base_k_r)
        .expect("base step count included");
    let base_acc = mean_std(&acc[base_idx]).0;
    let mut rows = Vec::new();
    for (i, &k) in steps.iter().enumerate() {
        let a = mean_std(&acc[i]).0;
        rows.push(Fig3Row {
            panel: "recon_steps".into(),
            steps: k,
            is_base: i == base_idx,
            accuracy: a,
            rmse: (!rmse[i].is_empty()).then(|| mean_std(&rmse[i]).0),
            relative_accuracy: relative_to(a, base_acc),
        });
    }

    let key = format!("{}.accuracy", mode_name(&cfg.eval[0]));
    let rmse_key = format!("{}.rmse", mode_name(&cfg.eval[0]));
    let base_k_u = cfg.client_hyper.k_u;
    let base_update = outcome.mean("test", &key).unwrap_or(f64::NAN);
    let mut ku: Vec<usize> = FIG3_UPDATE_STEPS.to_vec();
    if !ku.contains(&base_k_u) {
        ku.push(base_k_u);
    }
    for k in ku {
        let o = if k == base_k_u {
            outcome.clone()
        } else {
            run_prepared(&cfg.with(json!({"client_hyper": {"k_u": k}}))?, &data)?
        };
        let a = o.mean("test", &key).unwrap_or(f64::NAN);
        rows.push(Fig3Row {
            panel: "update_steps".into(),
            steps: k,
            is_base: k == base_k_u,
            accuracy: a,
            rmse: o.mean("test", &rmse_key),
            relative_accuracy: relative_to(a, base_update),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub algorithm: String,
    pub round: usize,
    pub cumulative_params_communicated: u64,
    pub metric: String,
    /// Mean over repeats of the validation value.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachRow {
    pub level: f64,
    pub fedrecon_params: Option<u64>,
    pub fedavg_params: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct Fig4 {
    pub metric: String,
    pub higher_is_better: bool,
    pub curves: Vec<CurveRow>,
    pub reach: Vec<ReachRow>,
}

impl Fig4 {
    /// True when FedRecon reaches every listed level with strictly fewer
    /// cumulative parameters than FedAvg (or FedAvg never reaches it).
    pub fn fedrecon_dominates(&self) -> bool {
        !self.reach.is_empty()
            && self
                .reach
                .iter()
                .all(|r| match (r.fedrecon_params, r.fedavg_params) {
                    (Some(a), Some(b)) => a < b,
                    (Some(_), None) => true,
                    (None, _) => false,
                })
    }
}

fn mean_curve(outcome: &ExperimentOutcome, metric: &str) -> Vec<(usize, u64, f64)> {
    let curves: Vec<_> = outcome.runs.iter().map(|r| r.curve(metric)).collect();
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, &(round, cum, _))| {
            let vals: Vec<f64> = curves
                .iter()
                .filter_map(|c| c.get(i).map(|p| p.2))
                .collect();
            (round, cum, mean_std(&vals).0)
        })
        .collect()
}

/// Validation metric against cumulative parameters communicated for FedRecon
/// and FedAvg on held-out users, plus the cost of reaching each level that
/// either curve attains above both starting values.
pub fn fig4(base: &ExperimentConfig, opts: &RecipeOptions) -> Result<Fig4> {
    let cfg = base.with(json!({"algorithm": "fedrecon"}))?;
    if cfg.seen_users() {
        return Err(Error::config(
            "eval",
            "fig4 evaluates held-out users with recon_eval",
        ));
    }
    let data = prepare(&cfg)?;
    let (metric, higher) = data.model.selection_metric();
    let key = format!("{}.{metric}", mode_name(&cfg.eval[0]));
    let mut log = Vec::new();
    let fedrecon = select(
        FEDRECON,
        cfg.clone(),
        &data,
        opts.grid.then(|| default_grid(&cfg)),
        &mut log,
    )?;
    let mut avg_cfg = cfg.with(json!({"algorithm": "fedavg"}))?;
    if !opts.grid {
        if let Some(extra) = &opts.fedavg_overrides {
            avg_cfg = avg_cfg.with(extra.clone())?;
        }
    }
    let grid = opts.grid.then(|| fedavg_grid(&avg_cfg));
    let fedavg = select("FedAvg", avg_cfg, &data, grid, &mut log)?;
    let mut out = Fig4 {
        metric: key.clone(),
        higher_is_better: higher,
        ..Fig4::default()
    };
    let mut curves = Vec::new();
    for (name, sel) in [("fedrecon", &fedrecon), ("fedavg", &fedavg)] {
        let outcome = sel.outcome.as_ref().ok_or_else(|| {
            Error::Numerical(format!(
                "{name} diverged: {}",
                sel.note.clone().unwrap_or_default()
            ))
        })?;
        let curve = mean_curve(outcome, &key);
        for &(round, cum, value) in &curve {
            out.curves.push(CurveRow {
                algorithm: name.to_owned(),
                round,
                cumulative_params_communicated: cum,
                metric: key.clone(),
                value,
            });
        }
        curves.push(curve);
    }
    let start = |c: &[(usize, u64, f64)]| c.first().map_or(f64::NAN, |p| p.2);
    let floor = if higher {
        start(&curves[0]).max(start(&curves[1]))
    } else {
        start(&curves[0]).min(start(&curves[1]))
    };
    let mut levels: Vec<f64> = curves
        .iter()
        .flatten()
        .map(|p| p.2)
        .filter(|v| v.is_finite() && if higher { *v > floor } else { *v < floor })
        .collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for level in levels {
        out.reach.push(ReachRow {
            level,
            fedrecon_params: crate::experiment::params_to_reach(&curves[0], level, higher),
            fedavg_params: crate::experiment::params_to_reach(&curves[1], level, higher),
        });
    }
    Ok(out)
}

pub fn write_table1(t: &Table1, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&t.rows, &dir.join("table1.csv"))?;
    write_csv(&t.grid, &dir.join("table1_grid.csv"))
}

pub fn write_table2(t: &Table2, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&t.rows, &dir.join("table2_mech.csv"))?;
    write_csv(&t.grid, &dir.join("table2_mech_grid.csv"))
}

pub fn write_fig3(rows: &[Fig3Row], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(rows, &dir.join("fig3.csv"))
}

pub fn write_fig4(f: &Fig4, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&f.curves, &dir.join("fig4_curves.csv"))?;
    write_csv(&f.reach, &dir.join("fig4_reach.csv"))
}
