//! Log-linear next-word model with hashed local OOV embeddings.
//!
//! The context representation is the mean of the input embeddings of the
//! last `context_window` tokens, followed by an affine map to logits over
//! the special tokens plus the core vocabulary. Core and special embedding
//! rows and the affine map are global. Tokens outside the core vocabulary
//! look up one of `num_oov_buckets` local rows by `hash mod buckets`; with
//! zero buckets they fall back to the single global `oov` row.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    batch_weight, Example, Features, InputToken, LocalKind, MetricSums, Model, Prediction, Target,
};
use crate::params::{Layout, ParamSource, Params, RowSparse};
use crate::rng::{gaussian, StreamRng};

/// Reserved token ids; core vocabulary ids start at [`special::COUNT`].
pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const OOV: u32 = 3;
    pub const COUNT: u32 = 4;
}

const EMBED: usize = 0;
const WEIGHTS: usize = 1;
const BIAS: usize = 2;
const OOV_ROWS: usize = 0;
const GLOBAL_INIT_STDDEV: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NwpConfig {
    pub vocab_size: usize,
    pub num_oov_buckets: usize,
    pub embed_dim: usize,
    pub context_window: usize,
    pub max_sentence_len: usize,
}

impl NwpConfig {
    pub const SENTENCE_LEN: usize = 20;

    pub fn new(
        vocab_size: usize,
        num_oov_buckets: usize,
        embed_dim: usize,
        context_window: usize,
    ) -> Self {
        Self {
            vocab_size,
            num_oov_buckets,
            embed_dim,
            context_window,
            max_sentence_len: Self::SENTENCE_LEN,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.vocab_size + special::COUNT as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if self.context_window == 0 {
            return Err(Error::config("context_window", "must be positive"));
        }
        if self.max_sentence_len != Self::SENTENCE_LEN {
            return Err(Error::config("max_sentence_len", "is fixed at 20 tokens"));
        }
        Ok(())
    }
}

pub struct NextWordModel {
    cfg: NwpConfig,
    global: Arc<Layout>,
    local: Arc<Layout>,
}

#[derive(Clone, Copy)]
enum RowRef {
    Global(usize),
    Local(usize),
}

struct Forward {
    rows: Vec<RowRef>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl NextWordModel {
    pub fn new(cfg: NwpConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.num_classes();
        let d = cfg.embed_dim;
        let global = Layout::new([
            ("embeddings", vec![c, d]),
            ("output_weights", vec![c, d]),
            ("output_bias", vec![c]),
        ])?;
        let local = if cfg.num_oov_buckets > 0 {
            Layout::new([("oov_embeddings", vec![cfg.num_oov_buckets, d])])?
        } else {
            Layout::empty()
        };
        Ok(Self {
            cfg,
            global: Arc::new(global),
            local: Arc::new(local),
        })
    }

    pub fn config(&self) -> &NwpConfig {
        &self.cfg
    }

    /// Row an input token reads its embedding from.
    fn resolve(&self, token: InputToken) -> Result<RowRef> {
        match token {
            InputToken::Vocab(id) if (id as usize) < self.cfg.num_classes() => {
                Ok(RowRef::Global(id as usize))
            }
            InputToken::Vocab(id) => {
                Err(Error::Data(format!("token id {id} outside the vocabulary")))
            }
            InputToken::Unknown(_) if self.cfg.num_oov_buckets == 0 => {
                Ok(RowRef::Global(special::OOV as usize))
            }
            InputToken::Unknown(h) => Ok(RowRef::Local(
                (h % self.cfg.num_oov_buckets as u64) as usize,
            )),
        }
    }

    fn target(&self, ex: &Example) -> Result<usize> {
        match ex.target {
            Target::Token(t) if (t as usize) < self.cfg.num_classes() => Ok(t as usize),
            Target::Token(t) => Err(Error::Data(format!("target id {t} outside the vocabulary"))),
            Target::Rating(_) => Err(Error::Data("next-word model expects token targets".into())),
        }
    }

    fn forward(&self, g: &dyn ParamSource, l: &Params, ex: &Example) -> Result<Forward> {
        let Features::Context(ctx) = &ex.features else {
            return Err(Error::Data(
                "next-word model expects context features".into(),
            ));
        };
        let d = self.cfg.embed_dim;
        let window = &ctx[ctx.len().saturating_sub(self.cfg.context_window)..];
        let rows = window
            .iter()
            .map(|&t| self.resolve(t))
            .collect::<Result<Vec<_>>>()?;
        let mut hidden = vec![0.0; d];
        if !rows.is_empty() {
            let inv = 1.0 / rows.len() as f64;
            for &r in &rows {
                let emb = match r {
                    RowRef::Global(i) => g.row(EMBED, i),
                    RowRef::Local(i) => l.row(OOV_ROWS, i),
                };
                for (h, e) in hidden.iter_mut().zip(emb) {
                    *h += inv * e;
                }
            }
        }
        let bias = g.row(BIAS, 0);
        let logits = (0..self.cfg.num_classes())
            .map(|c| {
                bias[c]
                    + g.row(WEIGHTS, c)
                        .iter()
                        .zip(&hidden)
                        .map(|(w, h)| w * h)
                        .sum::<f64>()
            })
            .collect();
        Ok(Forward {
            rows,
            hidden,
            logits,
        })
    }

    /// Softmax probabilities and `-log p[target]`.
    fn softmax_nll(logits: &[f64], target: usize) -> (Vec<f64>, f64) {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let nll = sum.ln() + max - logits[target];
        (exps.into_iter().map(|e| e / sum).collect(), nll)
    }

    /// Shared backward pass; writes into whichever gradient sinks are given.
    fn backward(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
        mut global: Option<&mut RowSparse>,
        mut local: Option<&mut Vec<f64>>,
    ) -> Result<f64> {
        let total = batch_weight(batch);
        if total <= 0.0 {
            return Ok(0.0);
        }
        let d = self.cfg.embed_dim;
        let c = self.cfg.num_classes();
        let mut loss = 0.0;
        // Output-layer gradients are dense; accumulate them here and hand
        // them to the sparse sink once per batch.
        let mut dw = if global.is_some() {
            vec![0.0; c * d]
        } else {
            Vec::new()
        };
        let mut db = if global.is_some() {
            vec![0.0; c]
        } else {
            Vec::new()
        };
        for ex in batch {
            let target = self.target(ex)?;
            let fwd = self.forward(g, l, ex)?;
            let (mut dlogits, nll) = Self::softmax_nll(&fwd.logits, target);
            loss += ex.weight * nll;
            dlogits[target] -= 1.0;
            let scale = ex.weight / total;
            dlogits.iter_mut().for_each(|v| *v *= scale);

            let mut dhidden = vec![0.0; d];
            for (k, &dz) in dlogits.iter().enumerate() {
                for (dh, w) in dhidden.iter_mut().zip(g.row(WEIGHTS, k)) {
                    *dh += dz * w;
                }
            }
            if global.is_some() {
                for (k, &dz) in dlogits.iter().enumerate() {
                    for (gw, h) in dw[k * d..(k + 1) * d].iter_mut().zip(&fwd.hidden) {
                        *gw += dz * h;
                    }
                }
                for (gb, dz) in db.iter_mut().zip(&dlogits) {
                    *gb += dz;
                }
            }
            if fwd.rows.is_empty() {
                continue;
            }
            let inv = 1.0 / fwd.rows.len() as f64;
            for &r in &fwd.rows {
                let sink: Option<&mut [f64]> = match r {
                    RowRef::Global(i) => {
                        global.as_deref_mut().map(|grad| grad.row_mut(EMBED, i, d))
                    }
                    RowRef::Local(i) => local
                        .as_deref_mut()
                        .map(|grad| &mut grad[i * d..(i + 1) * d]),
                };
                if let Some(sink) = sink {
                    for (s, dh) in sink.iter_mut().zip(&dhidden) {
                        *s += inv * dh;
                    }
                }
            }
        }
        if let Some(grad) = global {
            for k in 0..c {
                for (gw, v) in grad
                    .row_mut(WEIGHTS, k, d)
                    .iter_mut()
                    .zip(&dw[k * d..(k + 1) * d])
                {
                    *gw += v;
                }
            }
            for (gb, v) in grad.row_mut(BIAS, 0, c).iter_mut().zip(&db) {
                *gb += v;
            }
        }
        Ok(loss / total)
    }
}

impl Model for NextWordModel {
    fn name(&self) -> &str {
        "oov_nwp"
    }

    fn global_layout(&self) -> &Arc<Layout> {
        &self.global
    }

    fn local_layout(&self) -> &Arc<Layout> {
        &self.local
    }

    fn local_kind(&self) -> LocalKind {
        LocalKind::Shared
    }

    fn init_global(&self, rng: &mut StreamRng) -> Params {
        let mut g = Params::zeros(self.global.clone());
        for b in [EMBED, WEIGHTS] {
            g.block_mut(b)
                .iter_mut()
                .for_each(|v| *v = gaussian(rng, GLOBAL_INIT_STDDEV));
        }
        g
    }

    fn loss(&self, g: &dyn ParamSource, l: &Params, batch: &[&Example]) -> Result<f64> {
        let total = batch_weight(batch);
        if total <= 0.0 {
            return Ok(0.0);
        }
        let mut loss = 0.0;
        for ex in batch {
            let target = self.target(ex)?;
            let fwd = self.forward(g, l, ex)?;
            loss += ex.weight * Self::softmax_nll(&fwd.logits, target).1;
        }
        Ok(loss / total)
    }

    fn predict(&self, g: &dyn ParamSource, l: &Params, example: &Example) -> Result<Prediction> {
        let fwd = self.forward(g, l, example)?;
        Ok(Prediction::Class(argmax(&fwd.logits) as u32))
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
        let mut grad = vec![0.0; l.len()];
        let loss = self.backward(g, l, batch, None, Some(&mut grad))?;
        Ok((loss, grad))
    }

    fn loss_grad_global(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        batch: &[&Example],
    ) -> Result<(f64, RowSparse)> {
        let mut grad = RowSparse::new();
        let loss = self.backward(g, l, batch, Some(&mut grad), None)?;
        Ok((loss, grad))
    }

    fn metrics(
        &self,
        g: &dyn ParamSource,
        l: &Params,
        examples: &[&Example],
    ) -> Result<MetricSums> {
        let (mut nll, mut hits, mut counted) = (0.0, 0.0, 0.0);
        for ex in examples {
            let target = self.target(ex)?;
            let fwd = self.forward(g, l, ex)?;
            nll += Self::softmax_nll(&fwd.logits, target).1;
            if target >= special::COUNT as usize {
                counted += 1.0;
                hits += f64::from(u8::from(argmax(&fwd.logits) == target));
            }
        }
        let mut m = MetricSums::new();
        m.add_mean("loss", nll, examples.len() as f64);
        m.add_mean("accuracy", hits, counted);
        Ok(m)
    }

    fn selection_metric(&self) -> (&'static str, bool) {
        ("accuracy", true)
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::fnv1a64;
    use crate::model::check_gradients;
    use crate::rng::stream;

    fn tiny(buckets: usize) -> NextWordModel {
        NextWordModel::new(NwpConfig::new(5, buckets, 3, 2)).unwrap()
    }

    fn word(i: u32) -> InputToken {
        InputToken::Vocab(special::COUNT + i)
    }

    fn unknown(s: &str) -> InputToken {
        InputToken::Unknown(fnv1a64(s.as_bytes()))
    }

    fn toy_batch() -> Vec<Example> {
        vec![
            Example::next_token(
                vec![InputToken::Vocab(special::BOS), word(0)],
                special::COUNT + 1,
                0,
            ),
            Example::next_token(vec![word(1), unknown("zyx")], special::COUNT + 2, 1),
            Example::next_token(vec![unknown("qq"), unknown("zyx")], special::EOS, 2),
            Example::next_token(vec![word(4)], special::COUNT + 3, 3),
        ]
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = tiny(3);
        let batch = toy_batch();
        let refs: Vec<&Example> = batch.iter().collect();
        for seed in 0..20 {
            let mut rng = stream(seed, 0, 0, "gc");
            let g = m.init_global(&mut rng);
            let l = m.init_local(&mut rng);
            let report = check_gradients(&m, &g, &l, &refs, 1e-5).unwrap();
            assert!(report.max() < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn in_vocab_batches_leave_local_gradient_zero() {
        let m = tiny(4);
        let batch = [Example::next_token(
            vec![word(0), word(1)],
            special::COUNT + 2,
            0,
        )];
        let refs: Vec<&Example> = batch.iter().collect();
        let mut rng = stream(1, 0, 0, "t");
        let g = m.init_global(&mut rng);
        let l = m.init_local(&mut rng);
        assert!(m
            .grad_local(&g, &l, &refs)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn colliding_tokens_share_a_bucket() {
        let m = tiny(1);
        let a = m.resolve(unknown("alpha")).unwrap();
        let b = m.resolve(unknown("beta")).unwrap();
        assert!(matches!((a, b), (RowRef::Local(0), RowRef::Local(0))));
    }

    #[test]
    fn zero_buckets_fall_back_to_global_oov_row() {
        let m = tiny(0);
        assert!(m.local_layout().is_empty());
        assert!(matches!(
            m.resolve(unknown("alpha")).unwrap(),
            RowRef::Global(3)
        ));
        let batch = toy_batch();
        let refs: Vec<&Example> = batch.iter().collect();
        let mut rng = stream(2, 0, 0, "t");
        let g = m.init_global(&mut rng);
        let l = m.init_local(&mut rng);
        assert!(check_gradients(&m, &g, &l, &refs, 1e-5).unwrap().max() < 1e-4);
    }

    #[test]
    fn uniform_logits_give_log_num_classes() {
        let m = tiny(2);
        let g = Params::zeros(m.global_layout().clone());
        let l = Params::zeros(m.local_layout().clone());
        let batch = toy_batch();
        let refs: Vec<&Example> = batch.iter().collect();
        let loss = m.loss(&g, &l, &refs).unwrap();
        assert!((loss - (m.config().num_classes() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_ignores_special_targets() {
        let m = tiny(2);
        let g = Params::zeros(m.global_layout().clone());
        let l = Params::zeros(m.local_layout().clone());
        let batch = [
            Example::next_token(vec![word(0)], special::EOS, 0),
            Example::next_token(vec![word(0)], special::OOV, 0),
        ];
        let refs: Vec<&Example> = batch.iter().collect();
        let m = m.metrics(&g, &l, &refs).unwrap();
        assert_eq!(m.count("accuracy"), 0.0);
        assert!(!m.finalize().contains_key("accuracy"));
    }

    #[test]
    fn first_reconstruction_step_does_not_increase_support_loss() {
        let m = tiny(3);
        let batch = toy_batch();
        let refs: Vec<&Example> = batch.iter().collect();
        for seed in 0..50 {
            let mut rng = stream(seed, 0, 0, "convex");
            let g = m.init_global(&mut rng);
            let mut l = m.init_local(&mut rng);
            let (before, grad) = m.loss_grad_local(&g, &l, &refs).unwrap();
            l.axpy(-1e-2, &grad).unwrap();
            assert!(m.loss(&g, &l, &refs).unwrap() <= before);
        }
    }
}
