//! Brute-force reference computations for the test suites.
//!
//! Everything here is deliberately naive: gradients come from central
//! differences of `Model::loss` and nothing else, SGD is a plain loop over
//! flat vectors, and aggregation is a straight weighted sum. None of it
//! touches the simulator's gradient, update or aggregation code, so
//! agreement with the simulator is evidence rather than tautology.
//! Only toy sizes are supported.

use fedrecon::{Example, Model, Params};

/// Comparison of a reference quantity with the implementation's value.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub reference: Vec<f64>,
    pub implementation: Vec<f64>,
    pub max_abs: f64,
    /// Largest `|a - b| / max(floor, |a|, |b|)` over coordinates.
    pub max_rel: f64,
}

impl OracleReport {
    /// Relative deviations use `floor` to avoid dividing by near-zero values.
    pub fn compare(quantity: &str, reference: &[f64], implementation: &[f64], floor: f64) -> Self {
        assert_eq!(
            reference.len(),
            implementation.len(),
            "{quantity}: length mismatch"
        );
        let mut max_abs = 0.0_f64;
        let mut max_rel = 0.0_f64;
        for i in 0..reference.len() {
            let a = reference[i];
            let b = implementation[i];
            let d = (a - b).abs();
            let scale = floor.max(a.abs()).max(b.abs());
            if d.is_nan() {
                max_abs = f64::INFINITY;
                max_rel = f64::INFINITY;
                continue;
            }
            if d > max_abs {
                max_abs = d;
            }
            if d / scale > max_rel {
                max_rel = d / scale;
            }
        }
        OracleReport {
            quantity: quantity.to_string(),
            reference: reference.to_vec(),
            implementation: implementation.to_vec(),
            max_abs,
            max_rel,
        }
    }

    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel <= rel_tol
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} values, max abs dev {:.3e}, max rel dev {:.3e}",
            self.quantity,
            self.reference.len(),
            self.max_abs,
            self.max_rel
        )
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

fn rebuild(template: &Params, values: &[f64]) -> Params {
    Params::from_values(template.layout_arc().clone(), values.to_vec())
        .expect("oracle keeps the layout")
}

fn loss_at(model: &dyn Model, g: &Params, l: &Params, batch: &[&Example]) -> f64 {
    model.loss(g, l, batch).expect("oracle loss evaluation")
}

/// Which parameter group an oracle differentiates or steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Global,
    Local,
}

/// Finite-difference gradient of the batch loss in one parameter group.
pub fn fd_grad(
    model: &dyn Model,
    g: &Params,
    l: &Params,
    batch: &[&Example],
    side: Side,
    eps: f64,
) -> Vec<f64> {
    match side {
        Side::Global => fd_gradient(
            |x| loss_at(model, &rebuild(g, x), l, batch),
            g.values(),
            eps,
        ),
        Side::Local => fd_gradient(
            |x| loss_at(model, g, &rebuild(l, x), batch),
            l.values(),
            eps,
        ),
    }
}

/// Plain SGD on one parameter group with the other held fixed, re-deriving
/// every gradient by finite differences. Batch `t % batches.len()` is used at
/// step `t`. Returns the stepped group's values before the first step and
/// after each step.
#[allow(clippy::too_many_arguments)]
pub fn oracle_sgd_trace(
    model: &dyn Model,
    g: &Params,
    l: &Params,
    side: Side,
    batches: &[Vec<&Example>],
    rate: f64,
    steps: usize,
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut g = g.clone();
    let mut l = l.clone();
    let mut trace = vec![match side {
        Side::Global => g.values().to_vec(),
        Side::Local => l.values().to_vec(),
    }];
    for t in 0..steps {
        let batch = &batches[t % batches.len()];
        let grad = fd_grad(model, &g, &l, batch, side, eps);
        let current = trace.last().expect("trace starts non-empty").clone();
        let mut next = Vec::with_capacity(current.len());
        for i in 0..current.len() {
            next.push(current[i] - rate * grad[i]);
        }
        match side {
            Side::Global => g = rebuild(&g, &next),
            Side::Local => l = rebuild(&l, &next),
        }
        trace.push(next);
    }
    trace
}

/// Finite-difference gradient of the composite map
/// `g -> loss(g, R(g), query)`, where `R` starts every probe from the same
/// `l0` and takes one finite-difference SGD step per support batch.
///
/// `inner_eps` differentiates the reconstruction steps; `outer_eps` the
/// composite map. The outer step must be well above the inner error.
#[allow(clippy::too_many_arguments)]
pub fn oracle_meta_gradient(
    model: &dyn Model,
    g: &Params,
    l0: &Params,
    support_batches: &[Vec<&Example>],
    query: &[&Example],
    eta_r: f64,
    inner_eps: f64,
    outer_eps: f64,
) -> Vec<f64> {
    fd_gradient(
        |x| {
            let gp = rebuild(g, x);
            let trace = oracle_sgd_trace(
                model,
                &gp,
                l0,
                Side::Local,
                support_batches,
                eta_r,
                support_batches.len(),
                inner_eps,
            );
            let l = rebuild(l0, trace.last().expect("trace starts non-empty"));
            loss_at(model, &gp, &l, query)
        },
        g.values(),
        outer_eps,
    )
}

/// `sum_i (n_i / n) * delta_i` computed coordinate by coordinate.
pub fn oracle_weighted_mean(clients: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let mut n = 0usize;
    for (w, _) in clients {
        n += w;
    }
    let dim = clients.first().map_or(0, |c| c.1.len());
    let mut out = vec![0.0; dim];
    for (w, d) in clients {
        let share = *w as f64 / n as f64;
        for i in 0..dim {
            out[i] += share * d[i];
        }
    }
    out
}

/// Normalized aggregation weights `n_i / n`.
pub fn oracle_weights(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}
