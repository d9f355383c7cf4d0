//! Experiment configuration: task defaults, JSON loading with flag
//! overrides, and validation.
//!
//! A config is resolved by deep-merging three JSON documents in order: the
//! defaults for the chosen task, the config file, and the command-line
//! overrides. Objects merge key by key; any other value replaces. The result
//! is deserialized strictly, so unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{ClientHyper, SplitPolicy};
use crate::data::{SyntheticCorpusConfig, SyntheticMfConfig};
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::server::{OptimizerKind, ServerOptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// MovieLens ratings from `data.ratings_path`.
    Matfac,
    /// Next-word prediction with local OOV buckets.
    OovNwp,
    /// Matrix factorization on generated ratings.
    Synthetic,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Matfac => "matfac",
            Task::OovNwp => "oov_nwp",
            Task::Synthetic => "synthetic",
        }
    }

    pub fn is_matfac(&self) -> bool {
        !matches!(self, Task::OovNwp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Fedrecon,
    Fedavg,
    Centralized,
}

impl AlgorithmKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlgorithmKind::Fedrecon => "fedrecon",
            AlgorithmKind::Fedavg => "fedavg",
            AlgorithmKind::Centralized => "centralized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub embed_dim: usize,
    /// Next-word task only.
    pub vocab_size: usize,
    pub num_oov_buckets: usize,
    pub context_window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralizedSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub ratings_path: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    pub synthetic_mf: Option<SyntheticMfConfig>,
    pub synthetic_corpus: Option<SyntheticCorpusConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub algorithm: AlgorithmKind,
    /// Evaluation modes run on the validation and test splits. StandardEval
    /// scores seen users (per-user timestamp split); ReconEval scores unseen
    /// users (random user split). The two regimes cannot be mixed.
    pub eval: Vec<EvalMode>,
    /// Support/query split used during training.
    pub split: SplitPolicy,
    /// Support/query split used by ReconEval and finetuning evaluation.
    pub eval_split: SplitPolicy,
    pub client_hyper: ClientHyper,
    pub server_opt: ServerOptConfig,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub seed: u64,
    /// Independent reruns with derived seeds.
    pub repeats: usize,
    /// Validation metrics every this many rounds (0: only first and last).
    pub eval_every: usize,
    pub model: ModelSettings,
    pub centralized: CentralizedSettings,
    pub data: DataSettings,
    pub output_dir: Option<PathBuf>,
}

/// Users, items and rating marginals shaped like MovieLens 1M: 6040 users,
/// 3706 items, about 165 ratings per user with at least 20, mean rating
/// 3.58 and overall spread about 1.1, most of it from user and item offsets.
pub fn movielens_like_synthetic(seed: u64) -> SyntheticMfConfig {
    let mut cfg = SyntheticMfConfig::new(6040, 3706, 10, 165, seed);
    cfg.min_ratings_per_user = Some(20);
    cfg.item_popularity_skew = 0.8;
    cfg.rating_mean = 3.58;
    cfg.user_bias_std = 0.45;
    cfg.item_bias_std = 0.5;
    cfg.signal_std = 0.5;
    cfg.noise_std = 0.75;
    cfg
}

/// Small corpus with an out-of-vocabulary rate above 30% at a 100-word
/// vocabulary: client-private words plus the rarest shared words. After a
/// shared word its successor stays more likely than a private word, so
/// in-vocabulary predictions are learnable.
pub fn default_synthetic_corpus(seed: u64) -> SyntheticCorpusConfig {
    SyntheticCorpusConfig {
        num_clients: 400,
        sentences_per_client: 40,
        sentence_len: 12,
        core_words: 110,
        private_words_per_client: 20,
        private_rate: 0.45,
        follow_prob: 0.95,
        seed,
    }
}

/// Fully materialized defaults for `task`.
pub fn task_defaults(task: Task) -> Value {
    let matfac = json!({
        "algorithm": "fedrecon",
        "eval": [{"kind": "recon_eval", "repeats": 50, "clients_per_repeat": 50}],
        "split": {"kind": "half_disjoint", "support_fraction": 0.5},
        "eval_split": {"kind": "half_disjoint", "support_fraction": 0.5},
        "client_hyper": {"k_r": 50, "k_u": 50, "eta_r": 0.1, "eta_u": 0.5, "batch_size": 5, "joint_training": false},
        "server_opt": ServerOptConfig::sgd(1.0),
        "rounds": 500,
        "clients_per_round": 100,
        "seed": 0,
        "repeats": 3,
        "eval_every": 50,
        "model": {"embed_dim": 50, "vocab_size": 0, "num_oov_buckets": 0, "context_window": 0},
        "centralized": {"epochs": 20, "batch_size": 300, "rate": 0.3},
        "data": {"ratings_path": null, "corpus_path": null, "synthetic_mf": null, "synthetic_corpus": null},
        "output_dir": null,
    });
    let mut v = matfac;
    match task {
        Task::Matfac => {}
        Task::Synthetic => {
            v["data"]["synthetic_mf"] =
                serde_json::to_value(movielens_like_synthetic(0)).expect("serializable");
        }
        Task::OovNwp => {
            merge(
                &mut v,
                json!({
                    "split": {"kind": "by_timestamp_half"},
                    "eval_split": {"kind": "by_timestamp_half"},
                    "client_hyper": {"k_r": 100, "k_u": 100, "eta_r": 1.0, "eta_u": 1.0, "batch_size": 16},
                    "server_opt": ServerOptConfig::new(OptimizerKind::Yogi, 0.01),
                    "rounds": 200,
                    "clients_per_round": 20,
                    "eval": [{"kind": "recon_eval", "repeats": 5, "clients_per_repeat": 0}],
                    "eval_every": 50,
                    "model": {"embed_dim": 16, "vocab_size": 100, "num_oov_buckets": 500, "context_window": 1},
                    "centralized": {"epochs": 5, "batch_size": 64, "rate": 1.0},
                    "data": {"synthetic_corpus": default_synthetic_corpus(0)},
                }),
            );
        }
    }
    v["task"] = json!(task);
    v
}

/// Recursive merge: objects merge per key, anything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves a config from an optional file document and flag overrides.
pub fn resolve_config(file: Option<Value>, flags: Value) -> Result<ExperimentConfig> {
    let file = file.unwrap_or_else(|| json!({}));
    if !file.is_object() {
        return Err(Error::config("config", "top level must be a JSON object"));
    }
    let task_value = flags
        .get("task")
        .or_else(|| file.get("task"))
        .cloned()
        .ok_or_else(|| Error::config("task", "is required (matfac, oov_nwp or synthetic)"))?;
    let task: Task =
        serde_json::from_value(task_value).map_err(|e| Error::config("task", e.to_string()))?;
    let mut v = task_defaults(task);
    merge(&mut v, file);
    merge(&mut v, flags);
    let cfg: ExperimentConfig =
        serde_json::from_value(v).map_err(|e| Error::config("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a JSON config file and applies the flag overrides.
pub fn load_config(path: Option<&Path>, flags: Value) -> Result<ExperimentConfig> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::config("config", format!("cannot read {}: {e}", p.display()))
            })?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    resolve_config(file, flags)
}

impl ExperimentConfig {
    pub fn defaults(task: Task) -> Self {
        resolve_config(None, json!({ "task": task })).expect("task defaults are valid")
    }

    /// True when evaluation runs on seen users with their stored locals.
    pub fn seen_users(&self) -> bool {
        self.eval
            .iter()
            .any(|m| matches!(m, EvalMode::StandardEval))
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.is_empty() {
            return Err(Error::config("eval", "needs at least one evaluation mode"));
        }
        let standard = self
            .eval
            .iter()
            .filter(|m| matches!(m, EvalMode::StandardEval))
            .count();
        if standard > 0 && standard < self.eval.len() {
            return Err(Error::config(
                "eval",
                "standard_eval (seen users) and recon_eval (unseen users) need different data splits; run them separately",
            ));
        }
        if standard > 0 && self.algorithm == AlgorithmKind::Fedrecon {
            return Err(Error::config(
                "eval",
                "fedrecon stores no local parameters, so standard_eval is unavailable",
            ));
        }
        for m in &self.eval {
            if let EvalMode::ReconEval { repeats, .. } = m {
                if *repeats == 0 {
                    return Err(Error::config("eval.repeats", "must be at least 1"));
                }
            }
        }
        self.split.validate()?;
        self.eval_split.validate()?;
        self.client_hyper.validate()?;
        self.server_opt.validate()?;
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round", "must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        if self.model.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be positive"));
        }
        let c = &self.centralized;
        if c.batch_size == 0 {
            return Err(Error::config("centralized.batch_size", "must be positive"));
        }
        if !(c.rate >= 0.0 && c.rate.is_finite()) {
            return Err(Error::config("centralized.rate", "must be non-negative"));
        }
        match self.task {
            Task::Matfac => {
                if self.data.ratings_path.is_none() {
                    return Err(Error::config(
                        "data.ratings_path",
                        "is required for task matfac",
                    ));
                }
            }
            Task::Synthetic => match &self.data.synthetic_mf {
                Some(s) => s.validate()?,
                None => {
                    return Err(Error::config(
                        "data.synthetic_mf",
                        "is required for task synthetic",
                    ))
                }
            },
            Task::OovNwp => {
                match (&self.data.corpus_path, &self.data.synthetic_corpus) {
                    (None, None) => {
                        return Err(Error::config(
                            "data.corpus_path",
                            "task oov_nwp needs a corpus file or data.synthetic_corpus",
                        ))
                    }
                    (_, Some(s)) => s.validate()?,
                    _ => {}
                }
                if self.model.vocab_size == 0 {
                    return Err(Error::config("model.vocab_size", "must be positive"));
                }
                if self.model.context_window == 0 {
                    return Err(Error::config("model.context_window", "must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn with(&self, overrides: Value) -> Result<Self> {
        let mut v = self.to_json();
        merge(&mut v, overrides);
        let cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
