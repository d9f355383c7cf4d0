//! Command-line flags mirroring `ExperimentConfig`, turned into JSON
//! overrides merged over the config file (or manifest) and task defaults.

use std::path::PathBuf;

use clap::Args;
use fedrecon::config::{merge, resolve_config, ExperimentConfig};
use fedrecon::eval::EvalMode;
use fedrecon::experiment::Manifest;
use fedrecon::{Error, Result};
use serde_json::{json, Map, Value};

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Rerun the config recorded in a run manifest; flags still override.
    #[arg(long, value_name = "PATH", conflicts_with = "config")]
    pub manifest: Option<PathBuf>,

    /// matfac, oov_nwp or synthetic.
    #[arg(long)]
    pub task: Option<String>,
    /// fedrecon, fedavg or centralized.
    #[arg(long)]
    pub algorithm: Option<String>,
    /// standard_eval or recon_eval.
    #[arg(long)]
    pub eval: Option<String>,
    /// ReconEval repeats.
    #[arg(long)]
    pub eval_repeats: Option<usize>,
    /// Clients per ReconEval repeat (0: all).
    #[arg(long)]
    pub eval_clients_per_repeat: Option<usize>,

    /// half_disjoint, by_timestamp_half or no_split.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub support_fraction: Option<f64>,
    /// Split used by ReconEval and finetuning evaluation.
    #[arg(long)]
    pub eval_split: Option<String>,

    #[arg(long)]
    pub k_r: Option<usize>,
    #[arg(long)]
    pub k_u: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub eta_r: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub eta_u: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub joint_training: Option<bool>,

    /// sgd, adagrad or yogi.
    #[arg(long)]
    pub server_opt: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub eta_s: Option<f64>,

    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub clients_per_round: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,

    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub num_oov_buckets: Option<usize>,
    #[arg(long)]
    pub context_window: Option<usize>,

    #[arg(long)]
    pub centralized_epochs: Option<usize>,
    #[arg(long)]
    pub centralized_batch_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub centralized_rate: Option<f64>,

    /// MovieLens `ratings.dat`.
    #[arg(long, value_name = "PATH")]
    pub ratings_path: Option<PathBuf>,
    /// Token corpus file.
    #[arg(long, value_name = "PATH")]
    pub corpus_path: Option<PathBuf>,
    #[arg(long, value_name = "DIR", env = "FEDRECON_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,

    /// Any other field as `dotted.path=JSON`, e.g.
    /// `data.synthetic_mf.num_users=500`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn put(out: &mut Value, path: &[&str], v: Value) {
    let mut nested = v;
    for key in path.iter().rev() {
        let mut m = Map::new();
        m.insert((*key).to_owned(), nested);
        nested = Value::Object(m);
    }
    merge(out, nested);
}

fn put_opt<T: serde::Serialize>(out: &mut Value, path: &[&str], v: &Option<T>) {
    if let Some(v) = v {
        put(out, path, json!(v));
    }
}

fn parse_set(spec: &str) -> Result<(Vec<&str>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("set", format!("expected KEY=VALUE, got `{spec}`")))?;
    if key.is_empty() {
        return Err(Error::config("set", format!("empty key in `{spec}`")));
    }
    // Bare words are strings; everything else must be valid JSON.
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.split('.').collect(), value))
}

impl ConfigArgs {
    /// Overrides for every flag given, excluding the eval flags, which need
    /// the resolved eval mode.
    pub fn flag_overrides(&self) -> Result<Value> {
        let mut v = json!({});
        put_opt(&mut v, &["task"], &self.task);
        put_opt(&mut v, &["algorithm"], &self.algorithm);
        put_opt(&mut v, &["split", "kind"], &self.split);
        put_opt(
            &mut v,
            &["split", "support_fraction"],
            &self.support_fraction,
        );
        put_opt(&mut v, &["eval_split", "kind"], &self.eval_split);
        put_opt(&mut v, &["client_hyper", "k_r"], &self.k_r);
        put_opt(&mut v, &["client_hyper", "k_u"], &self.k_u);
        put_opt(&mut v, &["client_hyper", "eta_r"], &self.eta_r);
        put_opt(&mut v, &["client_hyper", "eta_u"], &self.eta_u);
        put_opt(&mut v, &["client_hyper", "batch_size"], &self.batch_size);
        put_opt(
            &mut v,
            &["client_hyper", "joint_training"],
            &self.joint_training,
        );
        put_opt(&mut v, &["server_opt", "kind"], &self.server_opt);
        put_opt(&mut v, &["server_opt", "eta_s"], &self.eta_s);
        put_opt(&mut v, &["rounds"], &self.rounds);
        put_opt(&mut v, &["clients_per_round"], &self.clients_per_round);
        put_opt(&mut v, &["seed"], &self.seed);
        put_opt(&mut v, &["repeats"], &self.repeats);
        put_opt(&mut v, &["eval_every"], &self.eval_every);
        put_opt(&mut v, &["model", "embed_dim"], &self.embed_dim);
        put_opt(&mut v, &["model", "vocab_size"], &self.vocab_size);
        put_opt(&mut v, &["model", "num_oov_buckets"], &self.num_oov_buckets);
        put_opt(&mut v, &["model", "context_window"], &self.context_window);
        put_opt(&mut v, &["centralized", "epochs"], &self.centralized_epochs);
        put_opt(
            &mut v,
            &["centralized", "batch_size"],
            &self.centralized_batch_size,
        );
        put_opt(&mut v, &["centralized", "rate"], &self.centralized_rate);
        put_opt(&mut v, &["data", "ratings_path"], &self.ratings_path);
        put_opt(&mut v, &["data", "corpus_path"], &self.corpus_path);
        put_opt(&mut v, &["output_dir"], &self.output_dir);
        for spec in &self.set {
            let (path, value) = parse_set(spec)?;
            put(&mut v, &path, value);
        }
        Ok(v)
    }

    fn file_value(&self) -> Result<Option<Value>> {
        if let Some(path) = &self.manifest {
            return Ok(Some(Manifest::load(path)?.config.to_json()));
        }
        let Some(path) = &self.config else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let v = serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Ok(Some(v))
    }

    /// File, then flags, then eval flags. `default_task` fills in a missing
    /// task.
    pub fn resolve(&self, default_task: Option<&str>) -> Result<ExperimentConfig> {
        let file = self.file_value()?;
        let mut flags = self.flag_overrides()?;
        let has_task =
            flags.get("task").is_some() || file.as_ref().is_some_and(|f| f.get("task").is_some());
        if let (false, Some(task)) = (has_task, default_task) {
            flags["task"] = json!(task);
        }
        let cfg = resolve_config(file, flags)?;
        self.apply_eval(cfg)
    }

    fn apply_eval(&self, cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if self.eval.is_none()
            && self.eval_repeats.is_none()
            && self.eval_clients_per_repeat.is_none()
        {
            return Ok(cfg);
        }
        let kind = self.eval.clone().unwrap_or_else(|| match cfg.eval[0] {
            EvalMode::StandardEval => "standard_eval".into(),
            EvalMode::ReconEval { .. } => "recon_eval".into(),
        });
        let mode = match kind.as_str() {
            "standard_eval" => {
                if self.eval_repeats.is_some() || self.eval_clients_per_repeat.is_some() {
                    return Err(Error::config(
                        "eval",
                        "repeats and clients per repeat only apply to recon_eval",
                    ));
                }
                json!({"kind": "standard_eval"})
            }
            "recon_eval" => {
                let (repeats, clients) = cfg
                    .eval
                    .iter()
                    .find_map(|m| match m {
                        EvalMode::ReconEval {
                            repeats,
                            clients_per_repeat,
                        } => Some((*repeats, *clients_per_repeat)),
                        EvalMode::StandardEval => None,
                    })
                    .unwrap_or((1, 0));
                json!({
                    "kind": "recon_eval",
                    "repeats": self.eval_repeats.unwrap_or(repeats),
                    "clients_per_repeat": self.eval_clients_per_repeat.unwrap_or(clients),
                })
            }
            other => return Err(Error::config("eval", format!("unknown mode `{other}`"))),
        };
        cfg.with(json!({ "eval": [mode] }))
    }
}
