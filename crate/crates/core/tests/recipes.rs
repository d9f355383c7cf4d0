//! Structural checks of the reproduction recipes on tiny problems.

use fedrecon::config::{ExperimentConfig, Task};
use fedrecon::recipes::*;
use serde_json::json;

fn tiny_mf() -> ExperimentConfig {
    ExperimentConfig::defaults(Task::Synthetic)
        .with(json!({
            "rounds": 6,
            "clients_per_round": 8,
            "repeats": 2,
            "eval_every": 3,
            "eval": [{"kind": "recon_eval", "repeats": 2, "clients_per_repeat": 0}],
            "client_hyper": {"k_r": 5, "k_u": 5},
            "model": {"embed_dim": 4},
            "centralized": {"epochs": 2, "batch_size": 32},
            "data": {"synthetic_mf": {
                "num_users": 60, "num_items": 30, "true_rank": 3, "ratings_per_user": 12,
                "min_ratings_per_user": 6, "user_bias_std": 0.3, "item_bias_std": 0.3
            }},
        }))
        .unwrap()
}

fn tiny_nwp() -> ExperimentConfig {
    ExperimentConfig::defaults(Task::OovNwp)
        .with(json!({
            "rounds": 4,
            "clients_per_round": 5,
            "repeats": 1,
            "eval_every": 2,
            "eval": [{"kind": "recon_eval", "repeats": 1, "clients_per_repeat": 0}],
            "client_hyper": {"k_r": 10, "k_u": 10},
            "model": {"embed_dim": 4, "vocab_size": 20, "num_oov_buckets": 8},
            "centralized": {"epochs": 1},
            "data": {"synthetic_corpus": {"num_clients": 40, "sentences_per_client": 6, "sentence_len": 6, "core_words": 24}},
        }))
        .unwrap()
}

fn finite(x: f64) -> bool {
    x.is_finite()
}

#[test]
fn table1_has_five_rows_and_writes_csv() {
    let t = table1(&tiny_mf(), &RecipeOptions::default()).unwrap();
    let names: Vec<&str> = t.rows.iter().map(|r| r.row.as_str()).collect();
    assert_eq!(
        names,
        [
            CENTRALIZED_STANDARD,
            CENTRALIZED_RECON,
            FEDAVG_STANDARD,
            FEDAVG_RECON,
            FEDRECON
        ]
    );
    for r in &t.rows {
        assert!(finite(r.rmse) && finite(r.accuracy), "{r:?}");
        assert_eq!(r.repeats, 2);
    }
    assert_eq!(t.get(FEDRECON).unwrap().eval, "recon_eval");
    assert_eq!(t.get(FEDAVG_STANDARD).unwrap().eval, "standard_eval");
    let dir = tempfile::tempdir().unwrap();
    write_table1(&t, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("row,algorithm,eval,rmse,"));
}

#[test]
fn table1_rejects_language_tasks() {
    assert!(table1(&tiny_nwp(), &RecipeOptions::default()).is_err());
}

#[test]
fn table1_grid_marks_one_selection_per_row() {
    let cfg = tiny_mf().with(json!({"rounds": 2, "repeats": 1})).unwrap();
    let t = table1(
        &cfg,
        &RecipeOptions {
            grid: true,
            fedavg_overrides: None,
        },
    )
    .unwrap();
    for name in [
        CENTRALIZED_STANDARD,
        CENTRALIZED_RECON,
        FEDAVG_STANDARD,
        FEDAVG_RECON,
        FEDRECON,
    ] {
        let rows: Vec<_> = t.grid.iter().filter(|g| g.row == name).collect();
        assert!(rows.len() > 1, "{name}");
        assert_eq!(rows.iter().filter(|g| g.selected).count(), 1, "{name}");
    }
}

#[test]
fn table2_lists_every_mechanism_row() {
    let t = table2_mech(&tiny_nwp(), &RecipeOptions::default()).unwrap();
    let names: Vec<&str> = t.rows.iter().map(|r| r.row.as_str()).collect();
    for want in [
        NWP_FEDAVG,
        NWP_FEDRECON_1,
        NWP_FEDRECON_500,
        NWP_OOV_FINETUNE,
        NWP_FULL_FINETUNE,
        NWP_FEDRECON_FINETUNE,
        NWP_NO_SPLIT,
        NWP_JOINT,
    ] {
        assert!(names.contains(&want), "missing {want}");
    }
    for r in &t.rows {
        assert!((0.0..=1.0).contains(&r.accuracy), "{r:?}");
    }
    assert!(t.oov_rate.is_some_and(|r| r > 0.0));
    let fedavg = t.rows.iter().find(|r| r.row == NWP_FEDAVG).unwrap();
    let fedrecon = t.rows.iter().find(|r| r.row == NWP_FEDRECON_500).unwrap();
    // With a single shared OOV token FedAvg has no local blocks to send.
    assert_eq!(
        fedavg.params_per_client_round,
        fedrecon.params_per_client_round
    );
}

#[test]
fn fig3_covers_both_panels() {
    let cfg = tiny_mf()
        .with(json!({"repeats": 1, "rounds": 40, "client_hyper": {"eta_r": 0.5}}))
        .unwrap();
    let rows = fig3(&cfg).unwrap();
    let steps = |panel: &str| {
        rows.iter()
            .filter(|r| r.panel == panel)
            .map(|r| r.steps)
            .collect::<Vec<_>>()
    };
    assert_eq!(steps("recon_steps"), FIG3_RECON_STEPS);
    assert_eq!(steps("update_steps"), FIG3_UPDATE_STEPS);
    for panel in ["recon_steps", "update_steps"] {
        let base: Vec<_> = rows
            .iter()
            .filter(|r| r.panel == panel && r.is_base)
            .collect();
        assert_eq!(base.len(), 1);
        assert!(base[0].accuracy > 0.0);
        assert_eq!(base[0].relative_accuracy, 1.0);
    }
    assert!(rows.iter().all(|r| r.rmse.is_some()));
}

#[test]
fn fig4_curves_are_cumulative() {
    let f = fig4(
        &tiny_mf().with(json!({"repeats": 1})).unwrap(),
        &RecipeOptions::default(),
    )
    .unwrap();
    assert_eq!(f.metric, "recon_eval.rmse");
    assert!(!f.higher_is_better);
    for alg in ["fedrecon", "fedavg"] {
        let curve: Vec<_> = f.curves.iter().filter(|c| c.algorithm == alg).collect();
        assert!(curve.len() >= 2, "{alg}");
        assert_eq!(curve[0].round, 0);
        assert_eq!(curve[0].cumulative_params_communicated, 0);
        assert!(curve
            .windows(2)
            .all(|w| w[0].cumulative_params_communicated < w[1].cumulative_params_communicated));
    }
    let dir = tempfile::tempdir().unwrap();
    write_fig4(&f, dir.path()).unwrap();
    assert!(dir.path().join("fig4_reach.csv").exists());
}
