//! `op2e` command-line interface: run experiments and ablations, list
//! presets, and inspect search trees of saved models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use op2e::harness::{ablation_axis, dump_tree, output_root, presets, resolve_config, run_experiment, Axis, ExperimentConfig, OUTPUT_ROOT_VAR};
use op2e::mcts::{RuleKind, SelectionRule};
use op2e::Error;

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "op2e", version, about = "Deep-exploration experiments with uncertainty-propagating tree search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config file or preset.
    Run {
        /// Config file path or preset name.
        config: String,
        /// Number of seeds (overrides the config).
        #[arg(long)]
        seeds: Option<usize>,
        /// Output root (defaults to $OP2E_OUTPUT_ROOT, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation axis of a base config.
    Ablate {
        config: String,
        #[arg(long, value_parser = ["value", "policy", "alternation", "double"])]
        axis: String,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List built-in presets.
    Presets {
        /// Print the full TOML of one preset.
        #[arg(long)]
        show: Option<String>,
    },
    /// Search from an observation with a saved model and print the tree as JSON.
    DumpTree {
        /// Checkpoint directory.
        checkpoint: PathBuf,
        /// Observation as comma-separated numbers.
        obs: String,
        #[arg(long, default_value_t = 30)]
        budget: usize,
        #[arg(long, default_value_t = 0.997)]
        gamma: f64,
        #[arg(long, value_parser = ["uct", "puct"], default_value = "uct")]
        rule: String,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn config_exit(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) => EXIT_CONFIG,
        _ => EXIT_PARTIAL,
    }
}

fn load(arg: &str, seeds: Option<usize>) -> Result<ExperimentConfig, ExitCode> {
    let mut cfg = resolve_config(arg).map_err(|e| fail(config_exit(&e), e))?;
    if let Some(n) = seeds {
        if n == 0 {
            return Err(fail(EXIT_CONFIG, "--seeds must be positive"));
        }
        cfg.run.seeds = n;
    }
    Ok(cfg)
}

/// Runs configs in order; returns whether every seed of every run succeeded.
fn run_all(configs: &[ExperimentConfig], out: &Path) -> Result<bool, ExitCode> {
    let mut all_ok = true;
    for cfg in configs {
        let report = run_experiment(cfg, out).map_err(|e| fail(config_exit(&e), e))?;
        for s in &report.seeds {
            match &s.error {
                None => println!(
                    "{} seed {}: ok, {} env steps, {} training steps, {} cells visited",
                    cfg.name, s.seed, s.env_steps, s.train_steps, s.distinct_cells
                ),
                Some(e) => println!("{} seed {}: FAILED: {e}", cfg.name, s.seed),
            }
        }
        println!("{}: {}", cfg.name, report.run_dir.display());
        all_ok &= report.failures() == 0;
    }
    Ok(all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = |out: Option<PathBuf>| out.unwrap_or_else(output_root);
    let result = match cli.command {
        Command::Run { config, seeds, out } => load(&config, seeds).and_then(|cfg| run_all(&[cfg], &root(out))),
        Command::Ablate { config, axis, seeds, out } => load(&config, seeds).and_then(|base| {
            let axis = Axis::parse(&axis).ok_or_else(|| fail(EXIT_CONFIG, "unknown axis"))?;
            let configs: Vec<_> = ablation_axis(&base, axis).into_iter().map(|(_, c)| c).collect();
            run_all(&configs, &root(out))
        }),
        Command::Presets { show } => {
            match show {
                Some(name) => match op2e::harness::preset(&name) {
                    Some(cfg) => match cfg.to_toml() {
                        Ok(text) => print!("{text}"),
                        Err(e) => return fail(EXIT_CONFIG, e),
                    },
                    None => return fail(EXIT_CONFIG, format!("unknown preset {name:?}")),
                },
                None => {
                    for (name, about, _) in presets() {
                        println!("{name:<30} {about}");
                    }
                    println!("\noutput root: ${OUTPUT_ROOT_VAR} (default ./runs)");
                }
            }
            Ok(true)
        }
        Command::DumpTree { checkpoint, obs, budget, gamma, rule, depth } => {
            let parsed: Result<Vec<f64>, _> = obs.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let Ok(obs) = parsed else {
                return fail(EXIT_CONFIG, "observation must be comma-separated numbers");
            };
            let kind = if rule == "puct" { RuleKind::Puct } else { RuleKind::Uct };
            match dump_tree(&checkpoint, &obs, SelectionRule::new(kind), budget, gamma, depth) {
                Ok(v) => {
                    println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
                    Ok(true)
                }
                Err(e) => Err(fail(config_exit(&e), e)),
            }
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PARTIAL),
        Err(code) => code,
    }
}
