//! Reconstruction, client update and meta-gradient checks against the
//! brute-force oracles.

mod common;

use common::*;
use fedrecon::client::{client_update, minibatches, reconstruct, ClientHyper};
use fedrecon::rng::RngScope;
use fedrecon::{Example, Features, Model, Target};
use fedrecon_oracles::{oracle_sgd_trace, OracleReport, Side};

fn hyper(k_r: usize, k_u: usize, batch_size: usize) -> ClientHyper {
    ClientHyper {
        k_r,
        k_u,
        eta_r: 0.05,
        eta_u: 0.05,
        batch_size,
        joint_training: false,
    }
}

/// Two MF steps written out by hand: residual, gradient rows, SGD update.
#[test]
fn two_step_update_matches_hand_rolled_sgd() {
    let model = mf_model(3, 2);
    let mut r = rng(7, "two_step");
    let (g, l) = random_params(&model, &mut r, 0.5);
    let query_owned = vec![
        Example::rating(0, 4.0, 0),
        Example::rating(2, 1.0, 1),
        Example::rating(0, 3.0, 2),
    ];
    let query = refs(&query_owned);
    let h = hyper(0, 2, 2);
    let scope = RngScope::new(3, 1, 9);
    let result = client_update(&model, &g, &l, &query, &h, scope).unwrap();

    let batches = minibatches(
        &query,
        h.batch_size,
        h.k_u,
        &mut scope.rng("update_batches"),
    );
    assert_eq!(batches.len(), 2);
    let p = l.values();
    let mut q: Vec<[f64; 2]> = (0..3)
        .map(|j| [g.values()[2 * j], g.values()[2 * j + 1]])
        .collect();
    for batch in &batches {
        let total = batch.len() as f64;
        let mut grad = [[0.0_f64; 2]; 3];
        for ex in batch {
            let (Features::Item(j), Target::Rating(rating)) = (&ex.features, ex.target) else {
                unreachable!()
            };
            let err = (p[0] * q[*j][0] + p[1] * q[*j][1]) - rating;
            let c = 2.0 * err / total;
            grad[*j][0] += c * p[0];
            grad[*j][1] += c * p[1];
        }
        for j in 0..3 {
            q[j][0] += -h.eta_u * grad[j][0];
            q[j][1] += -h.eta_u * grad[j][1];
        }
    }
    let expected: Vec<f64> = (0..6).map(|i| q[i / 2][i % 2] - g.values()[i]).collect();
    let got = result.delta.to_dense(g.layout_arc());
    assert_eq!(
        got, expected,
        "delta must match the hand-rolled steps bit for bit"
    );
}

fn support_of(n: usize, model_is_mf: bool, seed: u64) -> Vec<Example> {
    let mut r = rng(seed, "support");
    if model_is_mf {
        mf_examples(4, n, &mut r)
    } else {
        nwp_examples(n, &mut r)
    }
}

/// Reconstruction after t steps equals t finite-difference SGD steps on the
/// same batches, for every prefix t.
#[allow(clippy::needless_range_loop)]
fn reconstruction_trace(model: &dyn Model, examples: &[Example], seed: u64) {
    let support = refs(examples);
    let mut r = rng(seed, "params");
    let (g, _) = random_params(model, &mut r, 0.5);
    let scope = RngScope::new(seed, 2, 5);
    let steps = 10;
    let batches = minibatches(&support, 2, steps, &mut scope.rng("recon_batches"));
    assert_eq!(batches.len(), steps);
    let l0 = model.init_local(&mut scope.rng("local_init"));
    let mut h = hyper(0, 1, 2);
    h.eta_r = 0.3;
    let oracle = oracle_sgd_trace(model, &g, &l0, Side::Local, &batches, h.eta_r, steps, 1e-6);
    assert_eq!(
        reconstruct(model, &g, &support, &h, scope)
            .unwrap()
            .local
            .values(),
        &oracle[0][..]
    );
    for t in 1..=steps {
        h.k_r = t;
        let got = reconstruct(model, &g, &support, &h, scope).unwrap().local;
        let report = OracleReport::compare("reconstruction", &oracle[t], got.values(), 1e-6);
        assert!(report.within(1e-3), "step {t}: {report}");
    }
}

#[test]
fn reconstruction_matches_sgd_oracle() {
    reconstruction_trace(&mf_model(4, 3), &support_of(20, true, 1), 11);
    reconstruction_trace(&nwp_model(3), &support_of(20, false, 2), 12);
}

/// Client update after t steps equals t oracle steps on the global block.
#[allow(clippy::needless_range_loop)]
fn update_trace(model: &dyn Model, examples: &[Example], seed: u64) {
    let query = refs(examples);
    let mut r = rng(seed, "params");
    let (g, l) = random_params(model, &mut r, 0.5);
    let scope = RngScope::new(seed, 4, 1);
    let steps = 10;
    let batches = minibatches(&query, 2, steps, &mut scope.rng("update_batches"));
    let mut h = hyper(0, 1, 2);
    h.eta_u = 0.3;
    let oracle = oracle_sgd_trace(model, &g, &l, Side::Global, &batches, h.eta_u, steps, 1e-6);
    for t in 1..=steps {
        h.k_u = t;
        let res = client_update(model, &g, &l, &query, &h, scope).unwrap();
        let mut got = g.values().to_vec();
        for (v, d) in got.iter_mut().zip(res.delta.to_dense(g.layout_arc())) {
            *v += d;
        }
        let report = OracleReport::compare("client update", &oracle[t], &got, 1e-6);
        assert!(report.within(1e-3), "step {t}: {report}");
    }
}

#[test]
fn client_update_matches_sgd_oracle() {
    update_trace(&mf_model(4, 3), &support_of(20, true, 3), 21);
    update_trace(&nwp_model(3), &support_of(20, false, 4), 22);
}

#[test]
fn zero_oracle_steps_return_initial_params() {
    let model = mf_model(2, 2);
    let (g, l) = random_params(&model, &mut rng(0, "p"), 1.0);
    let trace = oracle_sgd_trace(&model, &g, &l, Side::Local, &[vec![]], 0.1, 0, 1e-6);
    assert_eq!(trace, vec![l.values().to_vec()]);
}

#[test]
fn meta_gradient_checks_on_toys() {
    for seed in 0..4 {
        let mut r = rng(seed, "meta_examples");
        for (model, examples) in [
            (
                Box::new(mf_model(4, 2)) as Box<dyn Model>,
                mf_examples(4, 6, &mut r),
            ),
            (
                Box::new(nwp_model(3)) as Box<dyn Model>,
                nwp_examples(6, &mut r),
            ),
        ] {
            let case = meta_case(model.as_ref(), examples.clone(), 2, seed);
            assert!(case.first_order.within(1e-4), "{}", case.first_order);
            assert!(case.meta.within(1e-3), "{}", case.meta);
            let flat = meta_case(model.as_ref(), examples, 0, seed);
            assert!(
                flat.meta_vs_first_order.within(1e-4),
                "k_r = 0: {}",
                flat.meta_vs_first_order
            );
        }
    }
}
