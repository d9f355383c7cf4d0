//! Comparison algorithms: centralized SGD, FedAvg over every block, and
//! finetuning evaluations.

use serde::{Deserialize, Serialize};

use crate::client::{minibatches, reconstruct, split_dataset, ClientHyper, SplitPolicy};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::{ClientDataset, Example, MetricMap, MetricSums, Model};
use crate::params::{Overlay, Params, RowSparse};
use crate::rng::{shuffled, stream, RngScope};
use crate::server::{run_training, Algorithm, LocalStore, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralizedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rate: f64,
    pub seed: u64,
}

impl CentralizedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("centralized.batch_size", "must be positive"));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::config("centralized.rate", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CentralizedOutcome {
    pub global: Params,
    pub locals: LocalStore,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD on the union of all clients' examples.
///
/// The minibatch loss is the mean over its examples; each owner's local
/// blocks receive the gradient of their share of that mean.
pub fn train_centralized(
    model: &dyn Model,
    clients: &[ClientDataset],
    cfg: &CentralizedConfig,
) -> Result<CentralizedOutcome> {
    train_centralized_observed(model, clients, cfg, |_, _, _, _| Ok(()))
}

/// [`train_centralized`], calling `observer(epoch, global, locals, mean loss)`
/// after each epoch.
pub fn train_centralized_observed(
    model: &dyn Model,
    clients: &[ClientDataset],
    cfg: &CentralizedConfig,
    mut observer: impl FnMut(usize, &Params, &LocalStore, f64) -> Result<()>,
) -> Result<CentralizedOutcome> {
    cfg.validate()?;
    let pool: Vec<(usize, &Example)> = clients
        .iter()
        .enumerate()
        .flat_map(|(c, d)| d.examples.iter().map(move |e| (c, e)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Data(
            "centralized training needs at least one example".into(),
        ));
    }
    let mut global = model.init_global(&mut stream(cfg.seed, 0, u64::MAX, "global_init"));
    let mut locals = LocalStore::initialize(model, clients, cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled(
            pool.len(),
            &mut stream(cfg.seed, epoch as u64, u64::MAX, "centralized_shuffle"),
        );
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut members: Vec<(usize, &Example)> = chunk.iter().map(|&i| pool[i]).collect();
            members.sort_by_key(|(c, _)| *c);
            let mut owners: Vec<(usize, Vec<&Example>)> = Vec::new();
            for (c, e) in members {
                match owners.last_mut() {
                    Some((o, exs)) if *o == c => exs.push(e),
                    _ => owners.push((c, vec![e])),
                }
            }
            let b = chunk.len() as f64;
            let mut grad_g = RowSparse::new();
            let mut grad_l: Vec<(u64, f64, Vec<f64>)> = Vec::with_capacity(owners.len());
            let mut batch_loss = 0.0;
            for (c, exs) in &owners {
                let id = clients[*c].client_id;
                let l = locals.get(id).expect("locals initialized for every client");
                let share = exs.len() as f64 / b;
                let (loss, gg) = model.loss_grad_global(&global, l, exs)?;
                let gl = model.grad_local(&global, l, exs)?;
                batch_loss += share * loss;
                accumulate(&mut grad_g, share, &gg);
                grad_l.push((id, share, gl));
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "centralized epoch {epoch}: non-finite loss"
                )));
            }
            global.axpy_sparse(-cfg.rate, &grad_g);
            apply_local_grads(&mut locals, cfg.rate, grad_l)?;
            loss_sum += batch_loss;
            batches += 1;
        }
        if !global.is_finite() {
            return Err(Error::Numerical(format!(
                "centralized epoch {epoch}: non-finite parameters"
            )));
        }
        let mean = loss_sum / batches as f64;
        observer(epoch, &global, &locals, mean)?;
        epoch_losses.push(mean);
    }
    Ok(CentralizedOutcome {
        global,
        locals,
        epoch_losses,
    })
}

fn accumulate(dst: &mut RowSparse, scale: f64, src: &RowSparse) {
    for r in src.rows() {
        let row = dst.row_mut(r.block, r.row, r.values.len());
        for (d, s) in row.iter_mut().zip(&r.values) {
            *d += scale * s;
        }
    }
}

fn apply_local_grads(
    locals: &mut LocalStore,
    rate: f64,
    grads: Vec<(u64, f64, Vec<f64>)>,
) -> Result<()> {
    match locals {
        LocalStore::PerClient(map) => {
            for (id, share, g) in grads {
                let l = map
                    .get_mut(&id)
                    .expect("locals initialized for every client");
                l.axpy(-rate * share, &g)?;
            }
        }
        LocalStore::Shared(l) => {
            let mut total = vec![0.0; l.len()];
            for (_, share, g) in grads {
                for (t, v) in total.iter_mut().zip(&g) {
                    *t += share * v;
                }
            }
            l.axpy(-rate, &total)?;
        }
    }
    Ok(())
}

/// The shared round loop with every block treated as server state.
pub fn train_fedavg(
    model: &dyn Model,
    clients: &[ClientDataset],
    mut cfg: TrainConfig,
) -> Result<TrainOutcome> {
    cfg.algorithm = Algorithm::FedAvg;
    run_training(model, clients, cfg, |_, _| Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneKind {
    /// Steps only the local blocks on the support set.
    FinetuneLocalOnly,
    /// Steps global and local blocks jointly on the support set.
    FinetuneFull,
    /// Reconstructs the local blocks, then steps the global blocks.
    FedreconPlusFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub kind: FinetuneKind,
    pub steps: usize,
    pub rate: f64,
    pub batch_size: usize,
    /// Reconstruction settings for `FedreconPlusFinetune`.
    pub recon: ClientHyper,
}

/// Finetunes copies of the trained parameters on `client`'s support split
/// and scores the result on its query split.
///
/// `stored_local` is the trained local state for the two plain finetuning
/// kinds; when absent, fresh locals are drawn as reconstruction would.
pub fn finetune_eval(
    model: &dyn Model,
    g: &Params,
    stored_local: Option<&Params>,
    client: &ClientDataset,
    cfg: &FinetuneConfig,
    scope: RngScope,
) -> Result<MetricSums> {
    let support = client.support();
    let query = client.query();
    if query.is_empty() {
        return Err(Error::Data(format!(
            "client {} has an empty query set",
            client.client_id
        )));
    }
    let mut local = match (cfg.kind, stored_local) {
        (FinetuneKind::FedreconPlusFinetune, _) => {
            reconstruct(model, g, &support, &cfg.recon, scope)?.local
        }
        (_, Some(l)) => l.clone(),
        (_, None) => model.init_local(&mut scope.rng("local_init")),
    };
    let mut working = Overlay::new(g);
    if cfg.steps > 0 && !support.is_empty() {
        let batches = minibatches(
            &support,
            cfg.batch_size,
            cfg.steps,
            &mut scope.rng("finetune_batches"),
        );
        for (step, batch) in batches.iter().enumerate() {
            let step_global = cfg.kind != FinetuneKind::FinetuneLocalOnly;
            let step_local = cfg.kind != FinetuneKind::FedreconPlusFinetune;
            let grad_g = if step_global {
                Some(model.grad_global(&working, &local, batch)?)
            } else {
                None
            };
            if step_local {
                let gl = model.grad_local(&working, &local, batch)?;
                local.axpy(-cfg.rate, &gl)?;
            }
            if let Some(gg) = grad_g {
                working.apply(-cfg.rate, &gg);
            }
            if !local.is_finite() || !working.is_finite() {
                return Err(Error::Numerical(format!(
                    "finetuning step {step}: non-finite parameters"
                )));
            }
        }
    }
    model.metrics(&working, &local, &query)
}

/// [`finetune_eval`] over many clients, split with `policy`.
pub fn finetune_eval_clients(
    model: &dyn Model,
    g: &Params,
    locals: Option<&LocalStore>,
    clients: &[ClientDataset],
    policy: &SplitPolicy,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut pooled = MetricSums::new();
    let mut macro_sum: MetricMap = MetricMap::new();
    let mut macro_count: MetricMap = MetricMap::new();
    let mut examples = 0;
    let mut evaluated = 0;
    for c in clients.iter().filter(|c| !c.is_empty()) {
        let scope = RngScope::new(seed, 0, c.client_id);
        let split = split_dataset(c, policy, &mut scope.rng("split"))?;
        let stored = locals.and_then(|store| store.get(c.client_id));
        let sums = finetune_eval(model, g, stored, &split, cfg, scope)?;
        pooled.merge(&sums);
        for (k, v) in sums.finalize() {
            *macro_sum.entry(k.clone()).or_insert(0.0) += v;
            *macro_count.entry(k).or_insert(0.0) += 1.0;
        }
        examples += split.query_idx.len();
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Evaluation(
            "no clients with examples to evaluate".into(),
        ));
    }
    Ok(EvalReport {
        metrics: pooled.finalize(),
        client_macro: macro_sum
            .into_iter()
            .map(|(k, s)| {
                let n = macro_count[&k];
                (k, s / n)
            })
            .collect(),
        num_clients: evaluated,
        num_examples: examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::SplitKind;
    use crate::models::{MatFacConfig, MatrixFactorization};

    fn mf() -> MatrixFactorization {
        MatrixFactorization::new(MatFacConfig::new(3, 2)).unwrap()
    }

    #[test]
    fn one_example_full_batch_is_one_sgd_step() {
        let m = mf();
        let clients = [ClientDataset::new(9, vec![Example::rating(1, 4.0, 0)])];
        let cfg = CentralizedConfig {
            epochs: 1,
            batch_size: 10,
            rate: 0.2,
            seed: 3,
        };
        let out = train_centralized(&m, &clients, &cfg).unwrap();
        let g0 = m.init_global(&mut stream(3, 0, u64::MAX, "global_init"));
        let l0 = LocalStore::initialize(&m, &clients, 3)
            .get(9)
            .unwrap()
            .clone();
        let ex = [&clients[0].examples[0]];
        let mut g1 = g0.clone();
        g1.axpy_sparse(-0.2, &m.grad_global(&g0, &l0, &ex).unwrap());
        let mut l1 = l0.clone();
        l1.axpy(-0.2, &m.grad_local(&g0, &l0, &ex).unwrap())
            .unwrap();
        assert_eq!(out.global, g1);
        assert_eq!(out.locals.get(9).unwrap(), &l1);
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let m = mf();
        let clients: Vec<ClientDataset> = (0..3)
            .map(|u| ClientDataset::new(u, vec![Example::rating(u as usize, 2.0, 0)]))
            .collect();
        let cfg = CentralizedConfig {
            epochs: 2,
            batch_size: 2,
            rate: 0.0,
            seed: 1,
        };
        let out = train_centralized(&m, &clients, &cfg).unwrap();
        assert_eq!(
            out.global,
            m.init_global(&mut stream(1, 0, u64::MAX, "global_init"))
        );
        assert_eq!(out.locals, LocalStore::initialize(&m, &clients, 1));
    }

    fn split_client() -> ClientDataset {
        let exs = (0..6)
            .map(|j| Example::rating(j % 3, 1.0 + j as f64 % 5.0, j as i64))
            .collect();
        let c = ClientDataset::new(2, exs);
        split_dataset(
            &c,
            &SplitPolicy::new(SplitKind::HalfDisjoint),
            &mut stream(0, 0, 2, "split"),
        )
        .unwrap()
    }

    fn ft(kind: FinetuneKind, steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            kind,
            steps,
            rate: 0.1,
            batch_size: 2,
            recon: ClientHyper {
                k_r: 3,
                k_u: 1,
                eta_r: 0.1,
                eta_u: 0.1,
                batch_size: 2,
                joint_training: false,
            },
        }
    }

    #[test]
    fn zero_steps_is_plain_evaluation() {
        let m = mf();
        let mut rng = stream(4, 0, 0, "p");
        let g = m.init_global(&mut rng);
        let l = m.init_local(&mut rng);
        let c = split_client();
        for kind in [FinetuneKind::FinetuneLocalOnly, FinetuneKind::FinetuneFull] {
            let got =
                finetune_eval(&m, &g, Some(&l), &c, &ft(kind, 0), RngScope::new(1, 0, 2)).unwrap();
            assert_eq!(got, m.metrics(&g, &l, &c.query()).unwrap());
        }
    }

    #[test]
    fn finetuning_never_mutates_inputs() {
        let m = mf();
        let mut rng = stream(5, 0, 0, "p");
        let g = m.init_global(&mut rng);
        let l = m.init_local(&mut rng);
        let (g0, l0) = (g.clone(), l.clone());
        let c = split_client();
        for kind in [
            FinetuneKind::FinetuneLocalOnly,
            FinetuneKind::FinetuneFull,
            FinetuneKind::FedreconPlusFinetune,
        ] {
            finetune_eval(&m, &g, Some(&l), &c, &ft(kind, 5), RngScope::new(1, 0, 2)).unwrap();
            assert_eq!(g, g0);
            assert_eq!(l, l0);
        }
    }
}
