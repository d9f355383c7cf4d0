//! Randomized checks of server aggregation against a straight weighted sum.

use fedrecon::client::ClientUpdateResult;
use fedrecon::server::{aggregate, aggregate_dense};
use fedrecon::{Layout, MetricSums, RowSparse};
use fedrecon_oracles::{oracle_weighted_mean, oracle_weights};
use proptest::prelude::*;

const ROWS: usize = 6;
const DIM: usize = 3;

/// Per client: id, weight, and a value for each touched row.
type Client = (u64, usize, Vec<Option<[f64; DIM]>>);

fn clients() -> impl Strategy<Value = Vec<Client>> {
    prop::collection::btree_set(0u64..10_000, 1..25).prop_flat_map(|ids| {
        let n = ids.len();
        (
            Just(ids.into_iter().collect::<Vec<_>>()),
            prop::collection::vec(1usize..500, n),
            prop::collection::vec(
                prop::collection::vec(
                    prop::option::of(prop::array::uniform3(-10.0f64..10.0)),
                    ROWS,
                ),
                n,
            ),
        )
            .prop_map(|(ids, ns, rows)| {
                ids.into_iter()
                    .zip(ns)
                    .zip(rows)
                    .map(|((i, n), r)| (i, n, r))
                    .collect()
            })
    })
}

fn layout() -> Layout {
    Layout::new([("table", vec![ROWS, DIM])]).unwrap()
}

fn to_result(id: u64, n_i: usize, rows: &[Option<[f64; DIM]>]) -> ClientUpdateResult {
    let mut delta = RowSparse::new();
    for (r, v) in rows.iter().enumerate() {
        if let Some(v) = v {
            delta.row_mut(0, r, DIM).copy_from_slice(v);
        }
    }
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

fn dense(rows: &[Option<[f64; DIM]>]) -> Vec<f64> {
    rows.iter().flat_map(|r| r.unwrap_or([0.0; DIM])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aggregation_matches_oracle_and_is_order_free(cs in clients(), rotate in 0usize..25) {
        let layout = layout();
        let results: Vec<ClientUpdateResult> = cs.iter().map(|(i, n, r)| to_result(*i, *n, r)).collect();
        let agg = aggregate(&results, &layout).unwrap();

        let mut sorted: Vec<_> = cs.clone();
        sorted.sort_by_key(|c| c.0);
        let reference = oracle_weighted_mean(&sorted.iter().map(|(_, n, r)| (*n, dense(r))).collect::<Vec<_>>());
        for (a, b) in agg.weighted_delta.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }

        let mut shuffled = results.clone();
        shuffled.reverse();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        prop_assert_eq!(&aggregate(&shuffled, &layout).unwrap().weighted_delta, &agg.weighted_delta);

        let dense_in: Vec<(u64, usize, Vec<f64>)> = cs.iter().map(|(i, n, r)| (*i, *n, dense(r))).collect();
        let dense_agg = aggregate_dense(&dense_in).unwrap();
        for (a, b) in agg.weighted_delta.iter().zip(&dense_agg.weighted_delta) {
            prop_assert!((a - b).abs() <= 1e-12);
        }

        let total: usize = cs.iter().map(|c| c.1).sum();
        prop_assert_eq!(agg.total_weight, total as f64);
        let weights = oracle_weights(&cs.iter().map(|c| c.1).collect::<Vec<_>>());
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let implied: f64 = cs.iter().map(|c| c.1 as f64 / agg.total_weight).sum();
        prop_assert!((implied - 1.0).abs() <= 1e-12);
    }
}
