//! Evaluation of trained models and communication accounting.
//!
//! StandardEval scores clients with local blocks stored at training time.
//! ReconEval never reads stored locals: each evaluated client rebuilds them
//! from its support split and is scored on its query split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{reconstruct, split_dataset, ClientHyper, SplitPolicy};
use crate::error::{Error, Result};
use crate::model::{ClientDataset, MetricMap, MetricSums, Model};
use crate::params::Params;
use crate::rng::{stream, RngScope};
use crate::server::{sample_clients, Algorithm, LocalStore};

/// Metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    /// Every example weighted equally.
    pub metrics: MetricMap,
    /// Unweighted mean of per-client metrics.
    pub client_macro: MetricMap,
    pub num_clients: usize,
    pub num_examples: usize,
}

#[derive(Default)]
struct EvalAccumulator {
    pooled: MetricSums,
    per_client: BTreeMap<String, (f64, f64)>,
    clients: usize,
    examples: usize,
}

impl EvalAccumulator {
    fn add(&mut self, sums: &MetricSums, examples: usize) {
        self.pooled.merge(sums);
        for (name, value) in sums.finalize() {
            let e = self.per_client.entry(name).or_insert((0.0, 0.0));
            e.0 += value;
            e.1 += 1.0;
        }
        self.clients += 1;
        self.examples += examples;
    }

    fn finish(self) -> EvalReport {
        EvalReport {
            metrics: self.pooled.finalize(),
            client_macro: self
                .per_client
                .into_iter()
                .map(|(k, (s, n))| (k, s / n))
                .collect(),
            num_clients: self.clients,
            num_examples: self.examples,
        }
    }
}

/// Scores every example of every client with that client's stored locals.
pub fn standard_eval(
    model: &dyn Model,
    g: &Params,
    locals: &LocalStore,
    clients: &[ClientDataset],
) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::default();
    for c in clients {
        if c.is_empty() {
            continue;
        }
        let l = locals.get(c.client_id).ok_or_else(|| {
            Error::Evaluation(format!(
                "client {} has no stored local parameters",
                c.client_id
            ))
        })?;
        let examples = c.all();
        acc.add(&model.metrics(g, l, &examples)?, examples.len());
    }
    if acc.clients == 0 {
        return Err(Error::Evaluation(
            "no clients with examples to evaluate".into(),
        ));
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconEvalConfig {
    pub repeats: usize,
    /// Clients sampled per repeat; 0 or anything above the population means all.
    pub clients_per_repeat: usize,
    pub split: SplitPolicy,
    /// Only `k_r`, `eta_r` and `batch_size` are used.
    pub hyper: ClientHyper,
    pub seed: u64,
}

impl ReconEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("eval.repeats", "must be at least 1"));
        }
        self.split.validate()?;
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconEvalReport {
    /// Across-repeat mean of the example-weighted metrics.
    pub mean: MetricMap,
    /// Across-repeat sample standard deviation (0 for a single repeat).
    pub std: MetricMap,
    /// Across-repeat mean of the client-macro metrics.
    pub macro_mean: MetricMap,
    pub repeats: Vec<EvalReport>,
}

/// Reconstruction evaluation of `clients`, which need not have been seen in
/// training. Pure in `(g, clients, cfg)`.
pub fn recon_eval(
    model: &dyn Model,
    g: &Params,
    clients: &[ClientDataset],
    cfg: &ReconEvalConfig,
) -> Result<ReconEvalReport> {
    cfg.validate()?;
    let usable: Vec<&ClientDataset> = clients.iter().filter(|c| !c.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Evaluation(
            "no clients with examples to evaluate".into(),
        ));
    }
    let ids: Vec<u64> = (0..usable.len() as u64).collect();
    let per_repeat = match cfg.clients_per_repeat {
        0 => usable.len(),
        m => m.min(usable.len()),
    };
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats as u64 {
        let picked = if per_repeat == usable.len() {
            ids.clone()
        } else {
            sample_clients(
                &ids,
                per_repeat,
                &mut stream(cfg.seed, r, u64::MAX, "eval_sample"),
            )?
        };
        let mut acc = EvalAccumulator::default();
        for i in picked {
            let data = usable[i as usize];
            let scope = RngScope::new(cfg.seed, r, data.client_id);
            let split = split_dataset(data, &cfg.split, &mut scope.rng("split"))?;
            let support = split.support();
            let query = split.query();
            let recon = reconstruct(model, g, &support, &cfg.hyper, scope)?;
            acc.add(&model.metrics(g, &recon.local, &query)?, query.len());
        }
        repeats.push(acc.finish());
    }
    let (mean, std) = mean_std(repeats.iter().map(|r| &r.metrics));
    let (macro_mean, _) = mean_std(repeats.iter().map(|r| &r.client_macro));
    Ok(ReconEvalReport {
        mean,
        std,
        macro_mean,
        repeats,
    })
}

fn mean_std<'a>(maps: impl Iterator<Item = &'a MetricMap>) -> (MetricMap, MetricMap) {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for m in maps {
        for (k, v) in m {
            values.entry(k.as_str()).or_default().push(*v);
        }
    }
    let mut mean = MetricMap::new();
    let mut std = MetricMap::new();
    for (k, vs) in values {
        let n = vs.len() as f64;
        let mu = vs.iter().sum::<f64>() / n;
        let var = if vs.len() > 1 {
            vs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.insert(k.to_string(), mu);
        std.insert(k.to_string(), var.sqrt());
    }
    (mean, std)
}

/// How a trained model is scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalMode {
    StandardEval,
    ReconEval {
        repeats: usize,
        clients_per_repeat: usize,
    },
}

/// Re-evaluates a fixed `g` with each reconstruction step count.
pub fn sweep_recon_steps(
    model: &dyn Model,
    g: &Params,
    clients: &[ClientDataset],
    base: &ReconEvalConfig,
    steps: &[usize],
) -> Result<Vec<(usize, ReconEvalReport)>> {
    steps
        .iter()
        .map(|&k_r| {
            let cfg = ReconEvalConfig {
                hyper: ClientHyper { k_r, ..base.hyper },
                ..*base
            };
            Ok((k_r, recon_eval(model, g, clients, &cfg)?))
        })
        .collect()
}

/// `value / base`; a zero base yields 0 for a zero value and infinity otherwise.
pub fn relative_to(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        value / base
    }
}

/// Parameters sent to and received from one client in one round.
pub fn per_client_params(algorithm: Algorithm, global_len: usize, local_len: usize) -> (u64, u64) {
    let each_way = match algorithm {
        Algorithm::FedRecon => global_len,
        Algorithm::FedAvg => global_len + local_len,
    } as u64;
    (each_way, each_way)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommEntry {
    pub algorithm: Algorithm,
    pub round: usize,
    pub clients: usize,
    pub global_len: usize,
    pub local_len: usize,
    pub params_down: u64,
    pub params_up: u64,
}

impl CommEntry {
    pub fn total(&self) -> u64 {
        self.params_down + self.params_up
    }
}

/// Per-round record of parameters communicated, counted in scalars.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CommLedger {
    entries: Vec<CommEntry>,
}

impl CommLedger {
    /// Records one round and returns its total.
    pub fn record_round(
        &mut self,
        algorithm: Algorithm,
        round: usize,
        clients: usize,
        global_len: usize,
        local_len: usize,
    ) -> u64 {
        let (down, up) = per_client_params(algorithm, global_len, local_len);
        let entry = CommEntry {
            algorithm,
            round,
            clients,
            global_len,
            local_len,
            params_down: down * clients as u64,
            params_up: up * clients as u64,
        };
        self.entries.push(entry);
        entry.total()
    }

    pub fn entries(&self) -> &[CommEntry] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(CommEntry::total).sum()
    }

    /// Running total after each recorded round.
    pub fn cumulative(&self) -> Vec<u64> {
        self.entries
            .iter()
            .scan(0u64, |acc, e| {
                *acc += e.total();
                Some(*acc)
            })
            .collect()
    }
}

/// Running total of communicated parameters per round report.
pub fn comm_ledger_report(reports: &[crate::server::RoundReport]) -> Vec<u64> {
    reports
        .iter()
        .scan(0u64, |acc, r| {
            *acc += r.comm_params_this_round;
            Some(*acc)
        })
        .collect()
}
