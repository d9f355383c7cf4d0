//! `fedrecon`: runs, evaluates and reproduces Federated Reconstruction
//! experiments from a JSON config and command-line overrides.

mod checks;
mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedrecon::config::{ExperimentConfig, Task};
use fedrecon::eval::EvalMode;
use fedrecon::experiment::{
    default_grid, evaluate, grid_search, mode_name, prepare, read_params, run_experiment,
    write_csv, write_outputs, SummaryRow,
};
use fedrecon::recipes::{self, GridRow, RecipeOptions};
use fedrecon::{Error, Result};
use serde_json::Value;

use overrides::ConfigArgs;

#[derive(Parser, Debug)]
#[command(
    name = "fedrecon",
    version,
    about = "Federated Reconstruction simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with every repeat and write metrics, parameters and a manifest.
    #[command(args_override_self = true)]
    Train(ConfigArgs),
    /// ReconEval of a saved global-parameter file on unseen users.
    #[command(args_override_self = true)]
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `params.bin` written by `train`.
        #[arg(long, value_name = "PATH")]
        params: PathBuf,
        /// Which held-out users to score.
        #[arg(long, value_enum, default_value_t = Part::Test)]
        on: Part,
    },
    /// Learning-rate grid search, selected on final validation.
    #[command(args_override_self = true)]
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// JSON array of override objects; defaults to the task's grid.
        #[arg(long, value_name = "PATH")]
        grid_file: Option<PathBuf>,
    },
    /// Regenerate one of the result tables or figures as CSV.
    #[command(args_override_self = true)]
    Reproduce {
        #[arg(value_enum)]
        recipe: Recipe,
        /// Select each row's learning rates by grid search.
        #[arg(long)]
        grid: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Analytic against finite-difference gradients on small problems.
    CheckGradients {
        #[arg(long, default_value = "synthetic")]
        task: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Checks that a one-step client update is a first-order meta-gradient
    /// step and reports the terms it drops.
    VerifyMeta {
        #[arg(long, default_value = "synthetic")]
        task: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        k_r: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Part {
    Valid,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Recipe {
    Table1,
    #[value(name = "table2-mech")]
    Table2Mech,
    Fig3,
    Fig4,
}

impl Recipe {
    fn name(self) -> &'static str {
        match self {
            Recipe::Table1 => "table1",
            Recipe::Table2Mech => "table2-mech",
            Recipe::Fig3 => "fig3",
            Recipe::Fig4 => "fig4",
        }
    }

    fn default_task(self) -> &'static str {
        match self {
            Recipe::Table2Mech => "oov_nwp",
            _ => "synthetic",
        }
    }
}

fn parse_task(s: &str) -> Result<Task> {
    serde_json::from_value(Value::String(s.to_owned()))
        .map_err(|e| Error::config("task", e.to_string()))
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<6} {:<40} {:>12} {:>12} {:>7}",
        "split", "metric", "mean", "std", "repeats"
    );
    for r in rows {
        println!(
            "{:<6} {:<40} {:>12.6} {:>12.6} {:>7}",
            r.split, r.metric, r.mean, r.std, r.repeats
        );
    }
}

fn train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve(None)?;
    let outcome = run_experiment(&cfg)?;
    print_summary(&outcome.summary);
    if let Some(dir) = &cfg.output_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn evaluate_params(args: &ConfigArgs, params: &Path, on: Part) -> Result<()> {
    let cfg = args.resolve(None)?;
    let mode = cfg
        .eval
        .iter()
        .find(|m| matches!(m, EvalMode::ReconEval { .. }))
        .ok_or_else(|| {
            Error::config(
                "eval",
                "evaluate reconstructs local parameters and needs recon_eval",
            )
        })?;
    let g = read_params(params)?;
    let data = prepare(&cfg)?;
    if g.layout_arc().as_ref() != data.model.global_layout().as_ref() {
        return Err(Error::Data(format!(
            "{} does not match the configured model's global blocks",
            params.display()
        )));
    }
    let (name, clients) = match on {
        Part::Valid => ("valid", &data.valid),
        Part::Test => ("test", &data.test),
    };
    let metrics = evaluate(&cfg, data.model.as_ref(), &g, None, clients, mode, cfg.seed)?;
    let rows: Vec<SummaryRow> = metrics
        .iter()
        .filter(|(k, _)| !k.ends_with("_std"))
        .map(|(k, v)| SummaryRow {
            split: name.to_owned(),
            metric: k.clone(),
            mean: *v,
            std: metrics.get(&format!("{k}_std")).copied().unwrap_or(0.0),
            repeats: 1,
        })
        .collect();
    print_summary(&rows);
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        write_csv(
            &rows,
            &dir.join(format!("evaluate_{}.csv", mode_name(mode))),
        )?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn sweep(args: &ConfigArgs, grid_file: Option<&Path>) -> Result<()> {
    let cfg = args.resolve(None)?;
    let grid: Vec<Value> = match grid_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config("grid", format!("{}: {e}", path.display())))?
        }
        None => default_grid(&cfg),
    };
    let data = prepare(&cfg)?;
    let result = grid_search(&cfg, &data, &grid)?;
    let rows: Vec<GridRow> = result
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| GridRow {
            row: cfg.algorithm.as_str().to_owned(),
            overrides: p.overrides.to_string(),
            validation: p.validation,
            selected: i == result.best,
            excluded: p.excluded.clone(),
        })
        .collect();
    println!("selection metric: valid {}", result.metric);
    for r in &rows {
        let value = r
            .validation
            .map_or_else(|| "excluded".to_owned(), |v| format!("{v:.6}"));
        println!(
            "{} {:>12} {}",
            if r.selected { "*" } else { " " },
            value,
            r.overrides
        );
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        write_csv(&rows, &dir.join("sweep.csv"))?;
        write_outputs(
            result.best_config(),
            &result.best_outcome,
            &dir.join("best"),
        )?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn reproduce(recipe: Recipe, grid: bool, args: &ConfigArgs) -> Result<()> {
    let cfg: ExperimentConfig = args.resolve(Some(recipe.default_task()))?;
    let opts = RecipeOptions::for_task(&cfg, grid);
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(recipe.name()));
    match recipe {
        Recipe::Table1 => {
            let t = recipes::table1(&cfg, &opts)?;
            for r in &t.rows {
                println!(
                    "{:<30} rmse {:.4} ± {:.4}  accuracy {:.4} ± {:.4}",
                    r.row, r.rmse, r.rmse_std, r.accuracy, r.accuracy_std
                );
            }
            recipes::write_table1(&t, &dir)?;
        }
        Recipe::Table2Mech => {
            let t = recipes::table2_mech(&cfg, &opts)?;
            if let Some(rate) = t.oov_rate {
                println!("out-of-vocabulary rate {rate:.3}");
            }
            for r in &t.rows {
                println!(
                    "{:<36} accuracy {:.4} ± {:.4}  {}",
                    r.row, r.accuracy, r.accuracy_std, r.communication
                );
            }
            recipes::write_table2(&t, &dir)?;
        }
        Recipe::Fig3 => {
            let rows = recipes::fig3(&cfg)?;
            for r in &rows {
                println!(
                    "{:<13} {:>3}  accuracy {:.4}  relative {:.4}",
                    r.panel, r.steps, r.accuracy, r.relative_accuracy
                );
            }
            recipes::write_fig3(&rows, &dir)?;
        }
        Recipe::Fig4 => {
            let f = recipes::fig4(&cfg, &opts)?;
            println!(
                "{} ({} is better)",
                f.metric,
                if f.higher_is_better {
                    "higher"
                } else {
                    "lower"
                }
            );
            for r in &f.reach {
                let show = |p: Option<u64>| p.map_or_else(|| "never".to_owned(), |p| p.to_string());
                println!(
                    "{:>10.4}  fedrecon {:>14}  fedavg {:>14}",
                    r.level,
                    show(r.fedrecon_params),
                    show(r.fedavg_params)
                );
            }
            recipes::write_fig4(&f, &dir)?;
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn check_gradients(task: &str, trials: usize, seed: u64, eps: f64, tol: f64) -> Result<()> {
    let toy = checks::toy(parse_task(task)?, seed)?;
    let results = checks::gradient_trials(&toy, trials, seed, eps)?;
    let mut worst = 0.0_f64;
    for r in &results {
        println!(
            "client {:>4}  local {:.3e}  global {:.3e}",
            r.client, r.local, r.global
        );
        worst = worst.max(r.local).max(r.global);
    }
    println!(
        "{} checks, max relative error {worst:.3e} (tolerance {tol:.1e})",
        results.len()
    );
    if worst > tol {
        return Err(Error::Numerical(format!(
            "gradient check failed: {worst:.3e} > {tol:.1e}"
        )));
    }
    Ok(())
}

fn verify_meta(task: &str, trials: usize, seed: u64, k_r: usize, eps: f64, tol: f64) -> Result<()> {
    let toy = checks::toy(parse_task(task)?, seed)?;
    let results = checks::meta_trials(&toy, trials, seed, k_r, eps)?;
    let mut worst = 0.0_f64;
    for r in &results {
        println!(
            "client {:>4}  first-order {:.3e}  dropped max {:.3e}  dropped rel {:.3e}",
            r.client, r.first_order_rel_error, r.dropped_terms_max_abs, r.dropped_terms_rel_norm
        );
        worst = worst.max(r.first_order_rel_error);
    }
    println!(
        "{} checks at k_r = {k_r}, max first-order error {worst:.3e} (tolerance {tol:.1e})",
        results.len()
    );
    if worst > tol {
        return Err(Error::Numerical(format!(
            "meta-gradient check failed: {worst:.3e} > {tol:.1e}"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Evaluate { config, params, on } => evaluate_params(&config, &params, on),
        Command::Sweep { config, grid_file } => sweep(&config, grid_file.as_deref()),
        Command::Reproduce {
            recipe,
            grid,
            config,
        } => reproduce(recipe, grid, &config),
        Command::CheckGradients {
            task,
            trials,
            seed,
            eps,
            tol,
        } => check_gradients(&task, trials, seed, eps, tol),
        Command::VerifyMeta {
            task,
            trials,
            seed,
            k_r,
            eps,
            tol,
        } => verify_meta(&task, trials, seed, k_r, eps, tol),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            // Usage mistakes are config errors.
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
