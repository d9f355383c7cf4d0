//! Round orchestration: client sampling, per-client updates, weighted
//! aggregation and the server optimizer.
//!
//! FedRecon and the FedAvg baseline share this loop; they differ only in
//! [`Algorithm`]. Under FedRecon a client reconstructs its local blocks and
//! returns a global delta. Under FedAvg the server holds the local blocks
//! too: user-specific blocks are overwritten by their owner's update, shared
//! blocks are aggregated like the global ones.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::client::{
    client_update, fedrecon_client_round, ClientHyper, ClientUpdateResult, SplitPolicy,
};
use crate::error::{Error, Result};
use crate::eval::CommLedger;
use crate::model::{ClientDataset, LocalKind, MetricMap, MetricSums, Model};
use crate::params::{Layout, Params};
use crate::rng::{stream, RngScope, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Yogi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerOptConfig {
    pub kind: OptimizerKind,
    pub eta_s: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.99
    }
    pub fn tau() -> f64 {
        1e-3
    }
}

impl ServerOptConfig {
    pub fn sgd(eta_s: f64) -> Self {
        Self::new(OptimizerKind::Sgd, eta_s)
    }

    pub fn new(kind: OptimizerKind, eta_s: f64) -> Self {
        Self {
            kind,
            eta_s,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            tau: defaults::tau(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_s > 0.0 && self.eta_s.is_finite()) {
            return Err(Error::config("server_opt.eta_s", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("server_opt.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("server_opt.beta2", "must lie in [0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("server_opt.tau", "must be positive"));
        }
        Ok(())
    }
}

/// Server optimizer fed with the pseudo-gradient `d = -weighted_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptimizer {
    pub config: ServerOptConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl ServerOptimizer {
    pub fn new(config: ServerOptConfig, dim: usize) -> Self {
        let (m, v) = match config.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            _ => (vec![0.0; dim], vec![config.tau * config.tau; dim]),
        };
        Self {
            config,
            first_moment: m,
            second_moment: v,
        }
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// Applies one server step to `g` in place.
    pub fn step(&mut self, g: &mut [f64], weighted_delta: &[f64]) -> Result<()> {
        if g.len() != weighted_delta.len() {
            return Err(Error::Shape(format!(
                "server step: {} parameters vs {} delta values",
                g.len(),
                weighted_delta.len()
            )));
        }
        let ServerOptConfig {
            kind,
            eta_s,
            beta1,
            beta2,
            tau,
        } = self.config;
        match kind {
            OptimizerKind::Sgd => {
                for (x, d) in g.iter_mut().zip(weighted_delta) {
                    *x += eta_s * d;
                }
            }
            OptimizerKind::Adagrad | OptimizerKind::Yogi => {
                if self.first_moment.len() != g.len() {
                    return Err(Error::Shape(
                        "optimizer state does not match parameters".into(),
                    ));
                }
                let state = self
                    .first_moment
                    .iter_mut()
                    .zip(self.second_moment.iter_mut());
                for ((x, delta), (m, v)) in g.iter_mut().zip(weighted_delta).zip(state) {
                    let d = -delta;
                    let d2 = d * d;
                    *m = beta1 * *m + (1.0 - beta1) * d;
                    if kind == OptimizerKind::Adagrad {
                        *v += d2;
                    } else {
                        *v -= (1.0 - beta2) * d2 * sign(*v - d2);
                    }
                    *x -= eta_s * *m / (v.sqrt() + tau);
                }
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform sample of `m` ids without replacement, returned in ascending order.
pub fn sample_clients(population: &[u64], m: usize, rng: &mut StreamRng) -> Result<Vec<u64>> {
    if m == 0 {
        return Err(Error::config("clients_per_round", "must be at least 1"));
    }
    if m > population.len() {
        return Err(Error::config(
            "clients_per_round",
            format!("{m} exceeds the population of {}", population.len()),
        ));
    }
    let mut ids: Vec<u64> = index::sample(rng, population.len(), m)
        .into_iter()
        .map(|i| population[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub weighted_delta: Vec<f64>,
    pub total_weight: f64,
}

/// `Σ (n_i / n) Δ_i`, summed in ascending client id order.
pub fn aggregate(results: &[ClientUpdateResult], layout: &Layout) -> Result<Aggregate> {
    if results.is_empty() {
        return Err(Error::Round {
            round: 0,
            message: "no client results to aggregate".into(),
        });
    }
    let mut ordered: Vec<&ClientUpdateResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.client_id);
    let total: usize = ordered.iter().map(|r| r.n_i).sum();
    if total == 0 {
        return Err(Error::Round {
            round: 0,
            message: "total aggregation weight is zero".into(),
        });
    }
    let n = total as f64;
    let mut out = vec![0.0; layout.len()];
    for r in ordered {
        r.delta.add_into(layout, r.n_i as f64 / n, &mut out);
    }
    Ok(Aggregate {
        weighted_delta: out,
        total_weight: n,
    })
}

/// Dense reference path for [`aggregate`]: `(client_id, n_i, delta)` triples.
pub fn aggregate_dense(results: &[(u64, usize, Vec<f64>)]) -> Result<Aggregate> {
    let mut ordered: Vec<&(u64, usize, Vec<f64>)> = results.iter().collect();
    ordered.sort_by_key(|r| r.0);
    let Some(first) = ordered.first() else {
        return Err(Error::Round {
            round: 0,
            message: "no client results to aggregate".into(),
        });
    };
    let total: usize = ordered.iter().map(|r| r.1).sum();
    if total == 0 {
        return Err(Error::Round {
            round: 0,
            message: "total aggregation weight is zero".into(),
        });
    }
    let n = total as f64;
    let mut out = vec![0.0; first.2.len()];
    for (_, n_i, delta) in ordered {
        let w = *n_i as f64 / n;
        for (o, d) in out.iter_mut().zip(delta) {
            *o += w * d;
        }
    }
    Ok(Aggregate {
        weighted_delta: out,
        total_weight: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Local blocks are reconstructed on the client and never leave it.
    #[serde(rename = "fedrecon")]
    FedRecon,
    /// Every block is server state.
    #[serde(rename = "fedavg")]
    FedAvg,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::FedRecon => "fedrecon",
            Algorithm::FedAvg => "fedavg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub split: SplitPolicy,
    pub hyper: ClientHyper,
    pub server_opt: ServerOptConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round", "must be at least 1"));
        }
        self.split.validate()?;
        self.hyper.validate()?;
        self.server_opt.validate()
    }
}

/// Local blocks held outside the clients (trained baselines).
#[derive(Debug, Clone, PartialEq)]
pub enum LocalStore {
    PerClient(BTreeMap<u64, Params>),
    Shared(Params),
}

impl LocalStore {
    pub fn get(&self, client: u64) -> Option<&Params> {
        match self {
            LocalStore::PerClient(map) => map.get(&client),
            LocalStore::Shared(l) => Some(l),
        }
    }

    /// Fresh locals for every client (per-client models) or one shared block.
    pub fn initialize(model: &dyn Model, clients: &[ClientDataset], seed: u64) -> Self {
        match model.local_kind() {
            LocalKind::UserSpecific => LocalStore::PerClient(
                clients
                    .iter()
                    .map(|c| {
                        let scope = RngScope::new(seed, 0, c.client_id);
                        (c.client_id, model.init_local(&mut scope.rng("local_init")))
                    })
                    .collect(),
            ),
            LocalKind::Shared => LocalStore::Shared(
                model.init_local(&mut RngScope::new(seed, 0, u64::MAX).rng("local_init")),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub sampled_clients: Vec<u64>,
    pub total_weight: f64,
    pub delta_norm: f64,
    pub train_metrics: MetricMap,
    pub comm_params_this_round: u64,
}

/// Stateful driver for one training run.
pub struct Trainer<'a> {
    model: &'a dyn Model,
    clients: &'a [ClientDataset],
    index: HashMap<u64, usize>,
    population: Vec<u64>,
    cfg: TrainConfig,
    global: Params,
    optimizer: ServerOptimizer,
    locals: Option<LocalStore>,
    local_optimizer: Option<ServerOptimizer>,
    round: usize,
    ledger: CommLedger,
    last_delta: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a dyn Model,
        clients: &'a [ClientDataset],
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.is_empty() {
            return Err(Error::config("data", "training population is empty"));
        }
        if cfg.clients_per_round > clients.len() {
            return Err(Error::config(
                "clients_per_round",
                format!(
                    "{} exceeds the population of {}",
                    cfg.clients_per_round,
                    clients.len()
                ),
            ));
        }
        let mut index = HashMap::with_capacity(clients.len());
        for (i, c) in clients.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Data(format!(
                    "client {} has no examples",
                    c.client_id
                )));
            }
            if index.insert(c.client_id, i).is_some() {
                return Err(Error::Data(format!("duplicate client id {}", c.client_id)));
            }
        }
        let mut population: Vec<u64> = clients.iter().map(|c| c.client_id).collect();
        population.sort_unstable();
        let global = model.init_global(&mut stream(cfg.seed, 0, u64::MAX, "global_init"));
        let optimizer = ServerOptimizer::new(cfg.server_opt, global.len());
        let (locals, local_optimizer) = match cfg.algorithm {
            Algorithm::FedRecon => (None, None),
            Algorithm::FedAvg => {
                let store = LocalStore::initialize(model, clients, cfg.seed);
                let opt = matches!(store, LocalStore::Shared(_))
                    .then(|| ServerOptimizer::new(cfg.server_opt, model.local_layout().len()));
                (Some(store), opt)
            }
        };
        Ok(Self {
            model,
            clients,
            index,
            population,
            cfg,
            global,
            optimizer,
            locals,
            local_optimizer,
            round: 0,
            ledger: CommLedger::default(),
            last_delta: Vec::new(),
        })
    }

    pub fn global(&self) -> &Params {
        &self.global
    }

    pub fn locals(&self) -> Option<&LocalStore> {
        self.locals.as_ref()
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Weighted delta applied in the most recent round.
    pub fn last_weighted_delta(&self) -> &[f64] {
        &self.last_delta
    }

    pub fn into_parts(self) -> (Params, Option<LocalStore>, CommLedger) {
        (self.global, self.locals, self.ledger)
    }

    pub fn step_round(&mut self) -> Result<RoundReport> {
        let t = self.round;
        let mut rng = stream(self.cfg.seed, t as u64, u64::MAX, "sample_clients");
        let sampled = sample_clients(&self.population, self.cfg.clients_per_round, &mut rng)?;
        let results = match self.cfg.algorithm {
            Algorithm::FedRecon => self.fedrecon_updates(t, &sampled)?,
            Algorithm::FedAvg => self.fedavg_updates(t, &sampled)?,
        };

        let layout = self.global.layout_arc().clone();
        let agg = aggregate(&results, &layout).map_err(|e| with_round(e, t))?;
        self.optimizer
            .step(self.global.values_mut(), &agg.weighted_delta)?;
        if !self.global.is_finite() {
            return Err(Error::Numerical(format!(
                "round {t}: non-finite global parameters"
            )));
        }
        self.apply_locals(&results, agg.total_weight)?;

        let mut metrics = MetricSums::new();
        for r in &results {
            metrics.merge(&r.query_metrics);
        }
        let local_len = self.model.local_layout().len();
        let comm = self.ledger.record_round(
            self.cfg.algorithm,
            t,
            sampled.len(),
            self.global.len(),
            local_len,
        );
        let delta_norm = agg.weighted_delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        self.last_delta = agg.weighted_delta;
        self.round += 1;
        Ok(RoundReport {
            round: t,
            sampled_clients: sampled,
            total_weight: agg.total_weight,
            delta_norm,
            train_metrics: metrics.finalize(),
            comm_params_this_round: comm,
        })
    }

    fn fedrecon_updates(&self, t: usize, sampled: &[u64]) -> Result<Vec<ClientUpdateResult>> {
        sampled
            .iter()
            .map(|&id| {
                let data = &self.clients[self.index[&id]];
                let scope = RngScope::new(self.cfg.seed, t as u64, id);
                fedrecon_client_round(
                    self.model,
                    &self.global,
                    data,
                    &self.cfg.split,
                    &self.cfg.hyper,
                    scope,
                )
                .map_err(|e| e.in_client(t, id))
            })
            .collect()
    }

    fn fedavg_updates(&self, t: usize, sampled: &[u64]) -> Result<Vec<ClientUpdateResult>> {
        let store = self
            .locals
            .as_ref()
            .expect("fedavg keeps server-side locals");
        let hyper = ClientHyper {
            joint_training: true,
            ..self.cfg.hyper
        };
        sampled
            .iter()
            .map(|&id| {
                let data = &self.clients[self.index[&id]];
                let l = store.get(id).expect("every client has stored locals");
                let scope = RngScope::new(self.cfg.seed, t as u64, id);
                client_update(self.model, &self.global, l, &data.all(), &hyper, scope)
                    .map_err(|e| e.in_client(t, id))
            })
            .collect()
    }

    fn apply_locals(&mut self, results: &[ClientUpdateResult], total_weight: f64) -> Result<()> {
        match self.locals.as_mut() {
            None => Ok(()),
            Some(LocalStore::PerClient(map)) => {
                for r in results {
                    if let Some(l) = &r.local {
                        map.insert(r.client_id, l.clone());
                    }
                }
                Ok(())
            }
            Some(LocalStore::Shared(shared)) => {
                let mut ordered: Vec<&ClientUpdateResult> = results.iter().collect();
                ordered.sort_by_key(|r| r.client_id);
                let mut delta = vec![0.0; shared.len()];
                for r in ordered {
                    let Some(l) = &r.local else { continue };
                    let w = r.n_i as f64 / total_weight;
                    for ((d, new), old) in delta.iter_mut().zip(l.values()).zip(shared.values()) {
                        *d += w * (new - old);
                    }
                }
                let opt = self
                    .local_optimizer
                    .as_mut()
                    .expect("shared locals have an optimizer");
                opt.step(shared.values_mut(), &delta)
            }
        }
    }
}

fn with_round(e: Error, round: usize) -> Error {
    match e {
        Error::Round { message, .. } => Error::Round { round, message },
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub global: Params,
    pub locals: Option<LocalStore>,
    pub reports: Vec<RoundReport>,
    pub ledger: CommLedger,
}

/// Runs all configured rounds, calling `observer` after each one.
pub fn run_training(
    model: &dyn Model,
    clients: &[ClientDataset],
    cfg: TrainConfig,
    mut observer: impl FnMut(&Trainer<'_>, &RoundReport) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, clients, cfg)?;
    let mut reports = Vec::with_capacity(trainer.cfg.rounds);
    for _ in 0..trainer.cfg.rounds {
        let report = trainer.step_round()?;
        observer(&trainer, &report)?;
        reports.push(report);
    }
    let (global, locals, ledger) = trainer.into_parts();
    Ok(TrainOutcome {
        global,
        locals,
        reports,
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::SplitKind;
    use crate::model::Example;
    use crate::models::{MatFacConfig, MatrixFactorization};
    use crate::params::RowSparse;
    use std::sync::Arc;

    fn result(id: u64, n_i: usize, delta: RowSparse) -> ClientUpdateResult {
        ClientUpdateResult {
            client_id: id,
            delta,
            n_i,
            support_loss_trace: vec![],
            update_loss_trace: vec![],
            query_metrics: MetricSums::new(),
            local: None,
        }
    }

    fn scalar_delta(v: f64) -> RowSparse {
        let mut d = RowSparse::new();
        d.row_mut(0, 0, 1)[0] = v;
        d
    }

    #[test]
    fn sampling_is_forced_and_deterministic() {
        assert_eq!(
            sample_clients(&[42], 1, &mut stream(0, 0, 0, "s")).unwrap(),
            vec![42]
        );
        let pop: Vec<u64> = (0..6040).collect();
        let a = sample_clients(&pop, 100, &mut stream(9, 3, 0, "s")).unwrap();
        let b = sample_clients(&pop, 100, &mut stream(9, 3, 0, "s")).unwrap();
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn oversampling_is_config_error() {
        let err = sample_clients(&[1, 2], 3, &mut stream(0, 0, 0, "s"));
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn aggregation_examples() {
        let layout = Layout::new([("x", vec![1])]).unwrap();
        let one = aggregate(&[result(1, 5, scalar_delta(3.5))], &layout).unwrap();
        assert_eq!(one.weighted_delta, vec![3.5]);
        let two = aggregate(
            &[
                result(1, 1, scalar_delta(4.0)),
                result(2, 3, scalar_delta(0.0)),
            ],
            &layout,
        )
        .unwrap();
        assert_eq!(two.weighted_delta, vec![1.0]);
        assert_eq!(two.total_weight, 4.0);
        assert!(matches!(aggregate(&[], &layout), Err(Error::Round { .. })));
    }

    #[test]
    fn sgd_follows_delta() {
        let mut opt = ServerOptimizer::new(ServerOptConfig::sgd(1.0), 1);
        let mut g = vec![1.0];
        opt.step(&mut g, &[2.0]).unwrap();
        assert_eq!(g, vec![3.0]);
        opt.step(&mut g, &[0.0]).unwrap();
        assert_eq!(g, vec![3.0]);
    }

    #[test]
    fn adagrad_first_step_closed_form() {
        let mut cfg = ServerOptConfig::new(OptimizerKind::Adagrad, 1.0);
        cfg.beta1 = 0.0;
        let mut opt = ServerOptimizer::new(cfg, 1);
        let mut g = vec![0.0];
        // Pseudo-gradient d = 3 means weighted_delta = -3.
        opt.step(&mut g, &[-3.0]).unwrap();
        let expected = -3.0 / (3.0 + 1e-3);
        assert!(((g[0] - expected) / expected).abs() < 1e-6, "{}", g[0]);
        let exact = -3.0 / ((9.0 + 1e-6_f64).sqrt() + 1e-3);
        assert_eq!(g[0], exact);
    }

    #[test]
    fn zero_delta_moves_adaptive_by_at_most_stale_momentum() {
        for kind in [OptimizerKind::Adagrad, OptimizerKind::Yogi] {
            let cfg = ServerOptConfig::new(kind, 0.5);
            let mut opt = ServerOptimizer::new(cfg, 2);
            let mut g = vec![0.0, 0.0];
            opt.step(&mut g, &[1.0, -2.0]).unwrap();
            let before = g.clone();
            let m_prev = opt.first_moment.clone();
            opt.step(&mut g, &[0.0, 0.0]).unwrap();
            for i in 0..2 {
                let bound = cfg.eta_s * (cfg.beta1 * m_prev[i]).abs() / cfg.tau;
                assert!((g[i] - before[i]).abs() <= bound + 1e-15);
            }
            assert!(opt.second_moment().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn yogi_second_moment_stays_positive() {
        let mut opt = ServerOptimizer::new(ServerOptConfig::new(OptimizerKind::Yogi, 0.1), 3);
        let mut g = vec![0.0; 3];
        let mut rng = stream(1, 0, 0, "y");
        for _ in 0..200 {
            let d: Vec<f64> = (0..3)
                .map(|_| crate::rng::gaussian(&mut rng, 5.0))
                .collect();
            opt.step(&mut g, &d).unwrap();
            assert!(opt.second_moment().iter().all(|&v| v > 0.0));
        }
    }

    fn tiny_population(n: u64) -> (MatrixFactorization, Vec<ClientDataset>) {
        let m = MatrixFactorization::new(MatFacConfig::new(4, 2)).unwrap();
        let clients = (0..n)
            .map(|u| {
                let exs = (0..4)
                    .map(|j| Example::rating(j, 1.0 + ((u as usize + j) % 5) as f64, j as i64))
                    .collect();
                ClientDataset::new(u, exs)
            })
            .collect();
        (m, clients)
    }

    fn cfg(algorithm: Algorithm, rounds: usize, m: usize) -> TrainConfig {
        TrainConfig {
            algorithm,
            rounds,
            clients_per_round: m,
            split: SplitPolicy::new(SplitKind::HalfDisjoint),
            hyper: ClientHyper {
                k_r: 2,
                k_u: 1,
                eta_r: 0.1,
                eta_u: 0.1,
                batch_size: 10,
                joint_training: false,
            },
            server_opt: ServerOptConfig::sgd(1.0),
            seed: 5,
        }
    }

    #[test]
    fn zero_rounds_return_initialization() {
        let (m, clients) = tiny_population(3);
        let out =
            run_training(&m, &clients, cfg(Algorithm::FedRecon, 0, 1), |_, _| Ok(())).unwrap();
        assert!(out.reports.is_empty());
        let init = m.init_global(&mut stream(5, 0, u64::MAX, "global_init"));
        assert_eq!(out.global, init);
    }

    #[test]
    fn one_round_one_client_applies_its_delta() {
        let (m, clients) = tiny_population(1);
        let c = cfg(Algorithm::FedRecon, 1, 1);
        let out = run_training(&m, &clients, c.clone(), |_, _| Ok(())).unwrap();
        let g0 = m.init_global(&mut stream(5, 0, u64::MAX, "global_init"));
        let res = fedrecon_client_round(
            &m,
            &g0,
            &clients[0],
            &c.split,
            &c.hyper,
            RngScope::new(5, 0, 0),
        )
        .unwrap();
        let mut expected = g0.clone();
        expected.axpy_sparse(1.0, &res.delta);
        assert_eq!(out.global, expected);
        assert_eq!(out.reports[0].comm_params_this_round, 2 * 8);
    }

    #[test]
    fn fedavg_leaves_unsampled_locals_alone() {
        let (m, clients) = tiny_population(4);
        let mut trainer = Trainer::new(&m, &clients, cfg(Algorithm::FedAvg, 1, 1)).unwrap();
        let before = trainer.locals().unwrap().clone();
        let report = trainer.step_round().unwrap();
        let sampled = report.sampled_clients[0];
        for c in &clients {
            let changed = trainer.locals().unwrap().get(c.client_id) != before.get(c.client_id);
            assert_eq!(changed, c.client_id == sampled);
        }
        assert_eq!(report.comm_params_this_round, 2 * (8 + 2));
    }

    #[test]
    fn trainer_rejects_oversized_rounds() {
        let (m, clients) = tiny_population(2);
        assert!(Trainer::new(&m, &clients, cfg(Algorithm::FedRecon, 1, 3)).is_err());
        let _ = Arc::clone(m.global_layout());
    }
}
