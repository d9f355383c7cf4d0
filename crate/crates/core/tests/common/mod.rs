//! Toy instances shared by the integration suites.
#![allow(dead_code)]

use fedrecon::hash::fnv1a64;
use fedrecon::models::{special, MatFacConfig, MatrixFactorization, NextWordModel, NwpConfig};
use fedrecon::rng::{gaussian, stream, StreamRng};
use fedrecon::{Example, InputToken, Model, Params};
use rand::Rng;

pub fn rng(seed: u64, purpose: &str) -> StreamRng {
    stream(seed, 0, 0, purpose)
}

pub fn random_params(model: &dyn Model, rng: &mut StreamRng, scale: f64) -> (Params, Params) {
    let mut g = Params::zeros(model.global_layout().clone());
    g.values_mut()
        .iter_mut()
        .for_each(|v| *v = gaussian(rng, scale));
    let mut l = Params::zeros(model.local_layout().clone());
    l.values_mut()
        .iter_mut()
        .for_each(|v| *v = gaussian(rng, scale));
    (g, l)
}

pub fn mf_model(items: usize, dim: usize) -> MatrixFactorization {
    MatrixFactorization::new(MatFacConfig::new(items, dim)).unwrap()
}

/// `n` ratings on random items with integer stars.
pub fn mf_examples(items: usize, n: usize, rng: &mut StreamRng) -> Vec<Example> {
    (0..n)
        .map(|t| {
            Example::rating(
                rng.random_range(0..items),
                rng.random_range(1..=5) as f64,
                t as i64,
            )
        })
        .collect()
}

pub const NWP_VOCAB: usize = 5;

pub fn nwp_model(buckets: usize) -> NextWordModel {
    NextWordModel::new(NwpConfig::new(NWP_VOCAB, buckets, 3, 2)).unwrap()
}

fn random_token(rng: &mut StreamRng) -> InputToken {
    match rng.random_range(0..4) {
        0 => InputToken::Unknown(fnv1a64(format!("oov{}", rng.random_range(0..6)).as_bytes())),
        1 => InputToken::Vocab(special::BOS),
        _ => InputToken::Vocab(special::COUNT + rng.random_range(0..NWP_VOCAB as u32)),
    }
}

/// Two-token contexts mixing core words, OOV words and BOS.
pub fn nwp_examples(n: usize, rng: &mut StreamRng) -> Vec<Example> {
    (0..n)
        .map(|t| {
            let ctx = vec![random_token(rng), random_token(rng)];
            let target = if rng.random_bool(0.2) {
                special::EOS
            } else {
                special::COUNT + rng.random_range(0..NWP_VOCAB as u32)
            };
            Example::next_token(ctx, target, t as i64)
        })
        .collect()
}

pub fn refs(examples: &[Example]) -> Vec<&Example> {
    examples.iter().collect()
}

use fedrecon::client::{minibatches, reconstruct, verify_first_order_meta_gradient, ClientHyper};
use fedrecon::rng::RngScope;
use fedrecon::ClientDataset;
use fedrecon_oracles::{fd_grad, oracle_meta_gradient, OracleReport, Side};

pub struct MetaCase {
    /// Simulator's `delta / -eta_u` against finite differences at the fixed
    /// reconstructed locals.
    pub first_order: OracleReport,
    /// Simulator's composite meta-gradient against the oracle's.
    pub meta: OracleReport,
    /// Oracle meta-gradient against the simulator's first-order gradient.
    pub meta_vs_first_order: OracleReport,
    pub dropped_terms_max_abs: f64,
}

/// Meta-gradient check on a client whose first four examples are support
/// and the rest a single full-batch query. Support batches hold two
/// examples, so `k_r` is at most 2.
pub fn meta_case(model: &dyn Model, examples: Vec<Example>, k_r: usize, seed: u64) -> MetaCase {
    let n = examples.len();
    assert!(n >= 5);
    let n_support = 4;
    let client = ClientDataset {
        client_id: 3,
        examples,
        support_idx: (0..n_support).collect(),
        query_idx: (n_support..n).collect(),
    };
    let (g, _) = random_params(model, &mut rng(seed, "meta_params"), 0.5);
    let h = ClientHyper {
        k_r,
        k_u: 1,
        eta_r: 0.3,
        eta_u: 0.1,
        batch_size: (n - n_support).max(2),
        joint_training: false,
    };
    let scope = RngScope::new(seed, 0, client.client_id);
    let report = verify_first_order_meta_gradient(model, &g, &client, &h, scope, 1e-5).unwrap();

    let support = client.support();
    let query = client.query();
    let l0 = model.init_local(&mut scope.rng("local_init"));
    let batches = minibatches(&support, h.batch_size, k_r, &mut scope.rng("recon_batches"));
    let meta_oracle = oracle_meta_gradient(model, &g, &l0, &batches, &query, h.eta_r, 1e-5, 1e-4);
    let l_fixed = reconstruct(model, &g, &support, &h, scope).unwrap().local;
    let fd_fixed = fd_grad(model, &g, &l_fixed, &query, Side::Global, 1e-5);
    MetaCase {
        first_order: OracleReport::compare(
            "first-order gradient",
            &fd_fixed,
            &report.first_order_grad,
            1e-6,
        ),
        meta: OracleReport::compare("meta-gradient", &meta_oracle, &report.meta_grad, 1e-4),
        meta_vs_first_order: OracleReport::compare(
            "meta vs first order",
            &meta_oracle,
            &report.first_order_grad,
            1e-4,
        ),
        dropped_terms_max_abs: report.dropped_terms_max_abs,
    }
}
