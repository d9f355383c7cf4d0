//! Client-side computations of one training round: dataset split,
//! reconstruction of the local blocks, and the update of the global blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{relative_error, ClientDataset, Example, MetricSums, Model};
use crate::params::{Overlay, Params, RowSparse};
use crate::rng::{shuffled, RngScope, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Random permutation, first `ceil(f * n)` examples support, rest query.
    HalfDisjoint,
    /// Earliest `ceil(f * n)` examples by timestamp support, the rest query.
    ByTimestampHalf,
    /// Support and query are both the full dataset.
    NoSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPolicy {
    pub kind: SplitKind,
    #[serde(default = "default_support_fraction")]
    pub support_fraction: f64,
}

fn default_support_fraction() -> f64 {
    0.5
}

impl SplitPolicy {
    pub fn new(kind: SplitKind) -> Self {
        Self {
            kind,
            support_fraction: default_support_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.support_fraction > 0.0 && self.support_fraction <= 1.0) {
            return Err(Error::config(
                "split.support_fraction",
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }
}

/// Populates `support_idx` / `query_idx` according to `policy`.
///
/// A split that would leave either side empty (a single example, or a
/// support fraction of 1) falls back to using every example for both.
pub fn split_dataset(
    data: &ClientDataset,
    policy: &SplitPolicy,
    rng: &mut StreamRng,
) -> Result<ClientDataset> {
    policy.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Data(format!(
            "client {} has no examples",
            data.client_id
        )));
    }
    let support_len = ((policy.support_fraction * n as f64).ceil() as usize).min(n);
    let ordered = match policy.kind {
        SplitKind::NoSplit => None,
        _ if n == 1 || support_len == n => None,
        SplitKind::HalfDisjoint => Some(shuffled(n, rng)),
        SplitKind::ByTimestampHalf => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by_key(|&i| data.examples[i].timestamp);
            Some(idx)
        }
    };
    let mut out = data.clone();
    match ordered {
        None => {
            out.support_idx = (0..n).collect();
            out.query_idx = (0..n).collect();
        }
        Some(order) => {
            let (s, q) = order.split_at(support_len);
            out.support_idx = s.to_vec();
            out.query_idx = q.to_vec();
        }
    }
    Ok(out)
}

/// Step counts and rates for reconstruction and the client update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientHyper {
    pub k_r: usize,
    pub k_u: usize,
    pub eta_r: f64,
    pub eta_u: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub joint_training: bool,
}

impl ClientHyper {
    pub fn validate(&self) -> Result<()> {
        if self.k_u == 0 {
            return Err(Error::config("client_hyper.k_u", "must be at least 1"));
        }
        if !(self.eta_r > 0.0 && self.eta_r.is_finite()) {
            return Err(Error::config("client_hyper.eta_r", "must be positive"));
        }
        if !(self.eta_u > 0.0 && self.eta_u.is_finite()) {
            return Err(Error::config("client_hyper.eta_u", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("client_hyper.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// One pass over a seeded shuffle of `items` in minibatches of
/// `batch_size`, stopping after `max_steps` batches. The last batch of the
/// pass may be short.
pub fn minibatches<'a>(
    items: &[&'a Example],
    batch_size: usize,
    max_steps: usize,
    rng: &mut StreamRng,
) -> Vec<Vec<&'a Example>> {
    shuffled(items.len(), rng)
        .chunks(batch_size.max(1))
        .take(max_steps)
        .map(|chunk| chunk.iter().map(|&i| items[i]).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub local: Params,
    /// Support-batch loss before each step.
    pub loss_trace: Vec<f64>,
}

fn non_finite(what: &str, step: usize) -> Error {
    Error::Numerical(format!("non-finite {what} at step {step}"))
}

/// Fresh local blocks followed by up to `k_r` gradient steps (one pass over
/// the support set) with the global blocks frozen.
pub fn reconstruct(
    model: &dyn Model,
    g: &Params,
    support: &[&Example],
    hyper: &ClientHyper,
    scope: RngScope,
) -> Result<Reconstruction> {
    let mut local = model.init_local(&mut scope.rng("local_init"));
    let mut loss_trace = Vec::with_capacity(hyper.k_r);
    if hyper.k_r == 0 || support.is_empty() {
        return Ok(Reconstruction { local, loss_trace });
    }
    let batches = minibatches(
        support,
        hyper.batch_size,
        hyper.k_r,
        &mut scope.rng("recon_batches"),
    );
    for (step, batch) in batches.iter().enumerate() {
        let (loss, grad) = model.loss_grad_local(g, &local, batch)?;
        if !loss.is_finite() {
            return Err(non_finite("reconstruction loss", step));
        }
        local.axpy(-hyper.eta_r, &grad)?;
        if !local.is_finite() {
            return Err(non_finite("reconstruction gradient", step));
        }
        loss_trace.push(loss);
    }
    Ok(Reconstruction { local, loss_trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateResult {
    pub client_id: u64,
    /// `g_i - g` on the rows the client touched.
    pub delta: RowSparse,
    /// Number of query examples, the aggregation weight.
    pub n_i: usize,
    pub support_loss_trace: Vec<f64>,
    pub update_loss_trace: Vec<f64>,
    /// Query metrics of the reconstructed model before the update.
    pub query_metrics: MetricSums,
    /// Final local blocks when they were trained jointly with the global ones.
    pub local: Option<Params>,
}

/// Up to `k_u` gradient steps (one pass over the query set) on the global
/// blocks.
///
/// `l` is held constant unless `joint_training` is set, in which case it is
/// stepped at the same point and rate as the global blocks.
pub fn client_update(
    model: &dyn Model,
    g: &Params,
    l: &Params,
    query: &[&Example],
    hyper: &ClientHyper,
    scope: RngScope,
) -> Result<ClientUpdateResult> {
    if query.is_empty() {
        return Err(Error::Data(format!(
            "client {} has an empty query set",
            scope.client
        )));
    }
    let query_metrics = model.metrics(g, l, query)?;
    let mut working = Overlay::new(g);
    let mut local = hyper.joint_training.then(|| l.clone());
    let mut trace = Vec::with_capacity(hyper.k_u);
    let batches = minibatches(
        query,
        hyper.batch_size,
        hyper.k_u,
        &mut scope.rng("update_batches"),
    );
    for (step, batch) in batches.iter().enumerate() {
        let current_l = local.as_ref().unwrap_or(l);
        let (loss, grad) = model.loss_grad_global(&working, current_l, batch)?;
        if !loss.is_finite() {
            return Err(non_finite("update loss", step));
        }
        if let Some(local) = local.as_mut() {
            let grad_l = model.grad_local(&working, local, batch)?;
            local.axpy(-hyper.eta_u, &grad_l)?;
            if !local.is_finite() {
                return Err(non_finite("joint local update", step));
            }
        }
        working.apply(-hyper.eta_u, &grad);
        if !working.is_finite() {
            return Err(non_finite("update gradient", step));
        }
        trace.push(loss);
    }
    Ok(ClientUpdateResult {
        client_id: scope.client,
        delta: working.into_delta(),
        n_i: query.len(),
        support_loss_trace: Vec::new(),
        update_loss_trace: trace,
        query_metrics,
        local,
    })
}

/// One client's full round: split, reconstruct, update.
pub fn fedrecon_client_round(
    model: &dyn Model,
    g: &Params,
    data: &ClientDataset,
    policy: &SplitPolicy,
    hyper: &ClientHyper,
    scope: RngScope,
) -> Result<ClientUpdateResult> {
    let split = split_dataset(data, policy, &mut scope.rng("split"))?;
    let support = split.support();
    let query = split.query();
    let recon = reconstruct(model, g, &support, hyper, scope)?;
    let mut result = client_update(model, g, &recon.local, &query, hyper, scope)?;
    result.support_loss_trace = recon.loss_trace;
    Ok(result)
}

/// Outcome of comparing a single-step client update with gradients of the
/// query loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradientReport {
    /// Max relative error between `delta / -eta_u` and finite differences of
    /// the query loss in `g` at the reconstructed (fixed) local blocks.
    pub first_order_max_rel_error: f64,
    /// `delta / -eta_u`.
    pub first_order_grad: Vec<f64>,
    /// Finite differences of `g -> f(g ∥ R(support, g))`, rebuilding the local
    /// blocks from the same initialization at every probe.
    pub meta_grad: Vec<f64>,
    /// Largest coordinate of `meta_grad - first_order_grad`: the dropped
    /// Jacobian terms.
    pub dropped_terms_max_abs: f64,
    /// `|meta_grad - first_order_grad| / |meta_grad|` in the 2-norm.
    pub dropped_terms_rel_norm: f64,
}

impl MetaGradientReport {
    pub fn first_order_passes(&self, tol: f64) -> bool {
        self.first_order_max_rel_error < tol
    }
}

/// Checks that a `k_u = 1`, full-batch client update is exactly a first-order
/// meta-gradient step, and measures the terms that step drops.
///
/// `client` must already carry its support/query split.
pub fn verify_first_order_meta_gradient(
    model: &dyn Model,
    g: &Params,
    client: &ClientDataset,
    hyper: &ClientHyper,
    scope: RngScope,
    eps: f64,
) -> Result<MetaGradientReport> {
    if hyper.k_u != 1 {
        return Err(Error::config(
            "client_hyper.k_u",
            "meta-gradient check needs k_u = 1",
        ));
    }
    let support = client.support();
    let query = client.query();
    if hyper.batch_size < query.len() {
        return Err(Error::config(
            "client_hyper.batch_size",
            "meta-gradient check needs a full-batch query",
        ));
    }
    let recon = reconstruct(model, g, &support, hyper, scope)?;
    let update = client_update(model, g, &recon.local, &query, hyper, scope)?;
    let first_order: Vec<f64> = update
        .delta
        .to_dense(g.layout_arc())
        .into_iter()
        .map(|d| d / -hyper.eta_u)
        .collect();

    let fixed_local = central_differences(g, eps, |probe| model.loss(probe, &recon.local, &query))?;
    let first_order_max_rel_error = first_order
        .iter()
        .zip(&fixed_local)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max);

    let meta_grad = central_differences(g, eps, |probe| {
        let l = reconstruct(model, probe, &support, hyper, scope)?.local;
        model.loss(probe, &l, &query)
    })?;
    let diff: Vec<f64> = meta_grad
        .iter()
        .zip(&first_order)
        .map(|(m, f)| m - f)
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(MetaGradientReport {
        first_order_max_rel_error,
        dropped_terms_max_abs: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        dropped_terms_rel_norm: norm(&diff) / norm(&meta_grad).max(1e-12),
        first_order_grad: first_order,
        meta_grad,
    })
}

fn central_differences(
    g: &Params,
    eps: f64,
    mut f: impl FnMut(&Params) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = g.clone();
    (0..g.len())
        .map(|j| {
            let orig = probe.values()[j];
            probe.values_mut()[j] = orig + eps;
            let plus = f(&probe)?;
            probe.values_mut()[j] = orig - eps;
            let minus = f(&probe)?;
            probe.values_mut()[j] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss probing coordinate {j}"
                )));
            }
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect()
}
