//! Matrix factorization `R ≈ P Qᵀ` with the item matrix `Q` global and the
//! user embedding `P_u` local.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::round_rating;
use crate::error::{Error, Result};
use crate::model::{
    batch_weight, Example, Features, LocalKind, MetricSums, Model, Prediction, Target,
};
use crate::params::{Layout, ParamSource, Params, RowSparse};
use crate::rng::{gaussian, StreamRng};

const ITEMS: usize = 0;
const GLOBAL_INIT_STDDEV: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatFacConfig {
    pub num_items: usize,
    pub embed_dim: usize,
    pub rating_min: f64,
    pub rating_max: f64,
}

impl MatFacConfig {
    pub fn new(num_items: usize, embed_dim: usize) -> Self {
        Self {
            num_items,
            embed_dim,
            rating_min: 1.0,
            rating_max: 5.0,
        }
    }
}

pub struct MatrixFactorization {
    cfg: MatFacConfig,
    global: Arc<Layout>,
    local: Arc<Layout>,
}

impl MatrixFactorization {
    pub fn new(cfg: MatFacConfig) -> Result<Self> {
        if cfg.num_items == 0 {
            return Err(Error::config("num_items", "must be positive"));
        }
        if cfg.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if cfg.rating_min.is_nan() || cfg.rating_max.is_nan() || cfg.rating_min >= cfg.rating_max {
            return Err(Error::config("rating_min", "must be below rating_max"));
        }
        let global = Layout::new([("item_embeddings", vec![cfg.num_items, cfg.embed_dim])])?;
        let local = Layout::new([("user_embedding", vec![cfg.embed_dim])])?;
        Ok(Self {
            cfg,
            global: Arc::new(global),
            local: Arc::new(local),
        })
    }

    pub fn config(&self) -> &MatFacConfig {
        &self.cfg
    }

    fn unpack(&self, ex: &Example) -> Result<(usize, f64)> {
        match (&ex.features, ex.target) {
            (Features::Item(j), Target::Rating(r)) if *j < self.cfg.num_items => Ok((*j, r)),
            (Features::Item(j), Target::Rating(_)) => Err(Error::Data(format!(
                "item id {j} out of range for {} items",
                self.cfg.num_items
            ))),
            _ => Err(Error::Data(
                "matrix factorization expects (item, rating) examples".into(),
            )),
        }
    }

    fn score(&self, g: &dyn ParamSource, l: &Params, item: usize) -> f64 {
        dot(l.values(), g.row(ITEMS, item))
    }

    /// Per-example residual scaled by `2 w / W`, the factor shared by both gradients.
    fn residuals(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
    ) -> Result<(f64, Vec<(usize, f64)>)> {
        let total = batch_weight(batch);
        let mut loss = 0.0;
        let mut out = Vec::with_capacity(batch.len());
        if total <= 0.0 {
            return Ok((0.0, out));
        }
        for ex in batch {
            let (j, r) = self.unpack(ex)?;
            let err = self.score(g, l, j) - r;
            loss += ex.weight * err * err;
            out.push((j, 2.0 * ex.weight * err / total));
        }
        Ok((loss / total, out))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Model for MatrixFactorization {
    fn name(&self) -> &str {
        "matfac"
    }

    fn global_layout(&self) -> &Arc<Layout> {
        &self.global
    }

    fn local_layout(&self) -> &Arc<Layout> {
        &self.local
    }

    fn local_kind(&self) -> LocalKind {
        LocalKind::UserSpecific
    }

    fn init_global(&self, rng: &mut StreamRng) -> Params {
        let mut g = Params::zeros(self.global.clone());
        g.values_mut()
            .iter_mut()
            .for_each(|v| *v = gaussian(rng, GLOBAL_INIT_STDDEV));
        g
    }

    fn loss(&self, g: &dyn ParamSource, l: &Params, batch: &[&Example]) -> Result<f64> {
        Ok(self.residuals(g, l, batch)?.0)
    }

    fn predict(&self, g: &dyn ParamSource, l: &Params, example: &Example) -> Result<Prediction> {
        match example.features {
            Features::Item(j) if j < self.cfg.num_items => {
                Ok(Prediction::Scalar(self.score(g, l, j)))
            }
            Features::Item(j) => Err(Error::Data(format!("item id {j} out of range"))),
            Features::Context(_) => Err(Error::Data(
                "matrix factorization expects item features".into(),
            )),
        }
    }

    fn grad_local(&self, g: &dyn ParamSource, l: &Params, batch: &[&Example]) -> Result<Vec<f64>> {
        Ok(self.loss_grad_local(g, l, batch)?.1)
    }

    fn grad_global(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
    ) -> Result<RowSparse> {
        Ok(self.loss_grad_global(g, l, batch)?.1)
    }

    fn loss_grad_local(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
    ) -> Result<(f64, Vec<f64>)> {
        let (loss, res) = self.residuals(g, l, batch)?;
        let mut grad = vec![0.0; self.cfg.embed_dim];
        for (j, c) in res {
            for (gk, qk) in grad.iter_mut().zip(g.row(ITEMS, j)) {
                *gk += c * qk;
            }
        }
        Ok((loss, grad))
    }

    fn loss_grad_global(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
    ) -> Result<(f64, RowSparse)> {
        let (loss, res) = self.residuals(g, l, batch)?;
        let mut grad = RowSparse::new();
        for (j, c) in res {
            let row = grad.row_mut(ITEMS, j, self.cfg.embed_dim);
            for (gk, pk) in row.iter_mut().zip(l.values()) {
                *gk += c * pk;
            }
        }
        Ok((loss, grad))
    }

    fn metrics(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        examples: &[&Example],
    ) -> Result<MetricSums> {
        let clamp = Some((self.cfg.rating_min, self.cfg.rating_max));
        let (mut sq, mut hits, mut hits_clamped) = (0.0, 0.0, 0.0);
        for ex in examples {
            let (j, r) = self.unpack(ex)?;
            let p = self.score(g, l, j);
            sq += (p - r).powi(2);
            hits += f64::from(u8::from(round_rating(p, None) == r));
            hits_clamped += f64::from(u8::from(round_rating(p, clamp) == r));
        }
        let n = examples.len() as f64;
        let mut m = MetricSums::new();
        m.add_root_mean("rmse", sq, n);
        m.add_mean("loss", sq, n);
        m.add_mean("accuracy", hits, n);
        m.add_mean("accuracy_clamped", hits_clamped, n);
        Ok(m)
    }

    fn selection_metric(&self) -> (&'static str, bool) {
        ("rmse", false)
    }
}
