//! The model abstraction shared by every algorithm, plus client datasets and
//! metric accumulation.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, ParamSource, Params, RowSparse};
use crate::rng::{gaussian, StreamRng};

/// Standard deviation of the Gaussian used for fresh local parameters.
pub const LOCAL_INIT_STDDEV: f64 = 0.1;

/// An input token as seen by a next-word model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputToken {
    /// Row of the global embedding table (core vocabulary or a special token).
    Vocab(u32),
    /// Out-of-vocabulary token, carried as the FNV-1a hash of its text.
    Unknown(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    /// Dense item id for matrix factorization.
    Item(usize),
    /// Preceding tokens, oldest first.
    Context(Vec<InputToken>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Rating(f64),
    Token(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Features,
    pub target: Target,
    pub weight: f64,
    pub timestamp: i64,
}

impl Example {
    pub fn rating(item: usize, rating: f64, timestamp: i64) -> Self {
        Self {
            features: Features::Item(item),
            target: Target::Rating(rating),
            weight: 1.0,
            timestamp,
        }
    }

    pub fn next_token(context: Vec<InputToken>, target: u32, timestamp: i64) -> Self {
        Self {
            features: Features::Context(context),
            target: Target::Token(target),
            weight: 1.0,
            timestamp,
        }
    }
}

/// One client's examples and its current support/query partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: u64,
    pub examples: Vec<Example>,
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

impl ClientDataset {
    /// A dataset with no split applied yet (support and query empty).
    pub fn new(client_id: u64, examples: Vec<Example>) -> Self {
        Self {
            client_id,
            examples,
            support_idx: Vec::new(),
            query_idx: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn all(&self) -> Vec<&Example> {
        self.examples.iter().collect()
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&Example> {
        idx.iter().map(|&i| &self.examples[i]).collect()
    }

    pub fn support(&self) -> Vec<&Example> {
        self.select(&self.support_idx)
    }

    pub fn query(&self) -> Vec<&Example> {
        self.select(&self.query_idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Scalar(f64),
    Class(u32),
}

/// Whether a model's local block is per-user state or a shared block that
/// merely stays on the device (e.g. hashed OOV rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalKind {
    UserSpecific,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Reduce {
    Mean,
    RootMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tally {
    sum: f64,
    count: f64,
    reduce: Reduce,
}

/// Running sums for metrics, mergeable across clients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSums {
    tallies: BTreeMap<&'static str, Tally>,
}

pub type MetricMap = BTreeMap<String, f64>;

impl MetricSums {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_mean(&mut self, name: &'static str, sum: f64, count: f64) {
        self.add(name, sum, count, Reduce::Mean);
    }

    /// Reported as `sqrt(sum / count)`, e.g. RMSE from a squared-error sum.
    pub fn add_root_mean(&mut self, name: &'static str, sum: f64, count: f64) {
        self.add(name, sum, count, Reduce::RootMean);
    }

    fn add(&mut self, name: &'static str, sum: f64, count: f64, reduce: Reduce) {
        let t = self.tallies.entry(name).or_insert(Tally {
            sum: 0.0,
            count: 0.0,
            reduce,
        });
        t.sum += sum;
        t.count += count;
    }

    pub fn merge(&mut self, other: &MetricSums) {
        for (name, t) in &other.tallies {
            self.add(name, t.sum, t.count, t.reduce);
        }
    }

    pub fn count(&self, name: &str) -> f64 {
        self.tallies.get(name).map_or(0.0, |t| t.count)
    }

    /// Metrics with a zero count are omitted.
    pub fn finalize(&self) -> MetricMap {
        self.tallies
            .iter()
            .filter(|(_, t)| t.count > 0.0)
            .map(|(name, t)| {
                let mean = t.sum / t.count;
                let value = match t.reduce {
                    Reduce::Mean => mean,
                    Reduce::RootMean => mean.sqrt(),
                };
                (name.to_string(), value)
            })
            .collect()
    }
}

/// A task model with analytic gradients for its global and local blocks.
///
/// `loss` is the weighted mean of per-example losses over the batch, so its
/// scale does not depend on batch size. Gradients are of that mean.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn global_layout(&self) -> &Arc<Layout>;
    fn local_layout(&self) -> &Arc<Layout>;
    fn local_kind(&self) -> LocalKind;

    fn init_global(&self, rng: &mut StreamRng) -> Params;

    fn init_local(&self, rng: &mut StreamRng) -> Params {
        let mut l = Params::zeros(self.local_layout().clone());
        l.values_mut()
            .iter_mut()
            .for_each(|v| *v = gaussian(rng, LOCAL_INIT_STDDEV));
        l
    }

    fn loss(&self, g: &dyn ParamSource, l: &Params, batch: &[&Example]) -> Result<f64>;
    fn predict(&self, g: &dyn ParamSource, l: &Params, example: &Example) -> Result<Prediction>;
    fn grad_local(&self, g: &dyn ParamSource, l: &Params, batch: &[&Example]) -> Result<Vec<f64>>;
    fn grad_global(&self, g: &dyn ParamSource, l: &Params, batch: &[&Example])
        -> Result<RowSparse>;
    fn metrics(&self, g: &dyn ParamSource, l: &Params, examples: &[&Example])
        -> Result<MetricSums>;

    fn loss_grad_local(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
    ) -> Result<(f64, Vec<f64>)> {
        Ok((self.loss(g, l, batch)?, self.grad_local(g, l, batch)?))
    }

    fn loss_grad_global(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
    ) -> Result<(f64, RowSparse)> {
        Ok((self.loss(g, l, batch)?, self.grad_global(g, l, batch)?))
    }

    /// Name of the metric used for model selection and whether larger is better.
    fn selection_metric(&self) -> (&'static str, bool);
}

pub(crate) fn batch_weight(batch: &[&Example]) -> f64 {
    batch.iter().map(|e| e.weight).sum()
}

/// Largest relative deviation between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err_local: f64,
    pub max_rel_err_global: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.max_rel_err_local.max(self.max_rel_err_global)
    }
}

/// `|a - b| / max(1e-8, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-8_f64.max(a.abs()).max(b.abs())
}

/// Compares analytic gradients against central differences
/// `(loss(x + eps e_j) - loss(x - eps e_j)) / (2 eps)` on every coordinate.
#[allow(clippy::needless_range_loop)]
pub fn check_gradients(
    model: &dyn Model,
    g: &Params,
    l: &Params,
    batch: &[&Example],
    eps: f64,
) -> Result<GradCheckReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::config("eps", "must be positive"));
    }
    if batch.is_empty() {
        return Err(Error::Data("gradient check needs a non-empty batch".into()));
    }
    let finite = |v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numerical(format!(
                "non-finite loss {v} during gradient check"
            )))
        }
    };
    finite(model.loss(g, l, batch)?)?;

    let analytic_l = model.grad_local(g, l, batch)?;
    let mut max_local = 0.0_f64;
    let mut probe = l.clone();
    for j in 0..l.len() {
        let orig = probe.values()[j];
        probe.values_mut()[j] = orig + eps;
        let plus = finite(model.loss(g, &probe, batch)?)?;
        probe.values_mut()[j] = orig - eps;
        let minus = finite(model.loss(g, &probe, batch)?)?;
        probe.values_mut()[j] = orig;
        max_local = max_local.max(relative_error(analytic_l[j], (plus - minus) / (2.0 * eps)));
    }

    let analytic_g = model.grad_global(g, l, batch)?.to_dense(g.layout());
    let mut max_global = 0.0_f64;
    let mut probe = g.clone();
    for j in 0..g.len() {
        let orig = probe.values()[j];
        probe.values_mut()[j] = orig + eps;
        let plus = finite(model.loss(&probe, l, batch)?)?;
        probe.values_mut()[j] = orig - eps;
        let minus = finite(model.loss(&probe, l, batch)?)?;
        probe.values_mut()[j] = orig;
        max_global = max_global.max(relative_error(analytic_g[j], (plus - minus) / (2.0 * eps)));
    }

    Ok(GradCheckReport {
        max_rel_err_local: max_local,
        max_rel_err_global: max_global,
    })
}
