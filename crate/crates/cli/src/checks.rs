//! Gradient and meta-gradient self-checks on small generated problems.

use fedrecon::client::{
    split_dataset, verify_first_order_meta_gradient, ClientHyper, SplitKind, SplitPolicy,
};
use fedrecon::config::{ExperimentConfig, Task};
use fedrecon::experiment::load_task;
use fedrecon::rng::{gaussian, stream, RngScope};
use fedrecon::{check_gradients, ClientDataset, Error, Model, Params, Result};
use serde_json::json;

/// Examples per checked client; enough for a support/query split, few
/// enough that finite differences stay cheap.
const MAX_EXAMPLES: usize = 10;

pub struct Toy {
    pub model: Box<dyn Model>,
    pub clients: Vec<ClientDataset>,
}

/// A few dozen users or sentences, a handful of items or words.
pub fn toy(task: Task, seed: u64) -> Result<Toy> {
    let overrides = match task {
        Task::Matfac | Task::Synthetic => json!({
            "model": {"embed_dim": 3},
            "data": {"synthetic_mf": {
                "num_users": 30, "num_items": 8, "true_rank": 3, "ratings_per_user": 6,
                "min_ratings_per_user": 6, "item_popularity_skew": 0.0, "seed": seed
            }},
        }),
        Task::OovNwp => json!({
            "model": {"embed_dim": 3, "vocab_size": 6, "num_oov_buckets": 3},
            "data": {"synthetic_corpus": {
                "num_clients": 30, "sentences_per_client": 2, "sentence_len": 5, "core_words": 8,
                "private_words_per_client": 3, "seed": seed
            }},
        }),
    };
    // Rating files are swapped for generated ratings of the same kind.
    let base = if task.is_matfac() {
        Task::Synthetic
    } else {
        task
    };
    let cfg = ExperimentConfig::defaults(base).with(overrides)?;
    let (model, clients, _) = load_task(&cfg)?;
    let clients = clients
        .into_iter()
        .filter(|c| c.len() >= 5)
        .map(|c| {
            let n = c.len().min(MAX_EXAMPLES);
            ClientDataset::new(c.client_id, c.examples[..n].to_vec())
        })
        .collect::<Vec<_>>();
    if clients.is_empty() {
        return Err(Error::Data("toy problem produced no usable clients".into()));
    }
    Ok(Toy { model, clients })
}

fn random_params(model: &dyn Model, seed: u64, trial: u64) -> (Params, Params) {
    let mut rng = stream(seed, trial, 0, "check_params");
    let mut g = Params::zeros(model.global_layout().clone());
    g.values_mut()
        .iter_mut()
        .for_each(|v| *v = gaussian(&mut rng, 0.5));
    let mut l = Params::zeros(model.local_layout().clone());
    l.values_mut()
        .iter_mut()
        .for_each(|v| *v = gaussian(&mut rng, 0.5));
    (g, l)
}

pub struct GradTrial {
    pub client: u64,
    pub local: f64,
    pub global: f64,
}

/// Analytic against finite-difference gradients at random parameters.
pub fn gradient_trials(toy: &Toy, trials: usize, seed: u64, eps: f64) -> Result<Vec<GradTrial>> {
    (0..trials)
        .map(|t| {
            let client = &toy.clients[t % toy.clients.len()];
            let (g, l) = random_params(toy.model.as_ref(), seed, t as u64);
            let r = check_gradients(toy.model.as_ref(), &g, &l, &client.all(), eps)?;
            Ok(GradTrial {
                client: client.client_id,
                local: r.max_rel_err_local,
                global: r.max_rel_err_global,
            })
        })
        .collect()
}

pub struct MetaTrial {
    pub client: u64,
    pub first_order_rel_error: f64,
    pub dropped_terms_max_abs: f64,
    pub dropped_terms_rel_norm: f64,
}

/// Single full-batch update steps compared with first-order and exact
/// meta-gradients of the query loss.
pub fn meta_trials(
    toy: &Toy,
    trials: usize,
    seed: u64,
    k_r: usize,
    eps: f64,
) -> Result<Vec<MetaTrial>> {
    let hyper = ClientHyper {
        k_r,
        k_u: 1,
        eta_r: 0.3,
        eta_u: 0.1,
        batch_size: MAX_EXAMPLES,
        joint_training: false,
    };
    let policy = SplitPolicy::new(SplitKind::HalfDisjoint);
    (0..trials)
        .map(|t| {
            let client = &toy.clients[t % toy.clients.len()];
            let scope = RngScope::new(seed, t as u64, client.client_id);
            let split = split_dataset(client, &policy, &mut scope.rng("split"))?;
            let (g, _) = random_params(toy.model.as_ref(), seed, t as u64);
            let r = verify_first_order_meta_gradient(
                toy.model.as_ref(),
                &g,
                &split,
                &hyper,
                scope,
                eps,
            )?;
            Ok(MetaTrial {
                client: client.client_id,
                first_order_rel_error: r.first_order_max_rel_error,
                dropped_terms_max_abs: r.dropped_terms_max_abs,
                dropped_terms_rel_norm: r.dropped_terms_rel_norm,
            })
        })
        .collect()
}
