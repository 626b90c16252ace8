use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use securegate_cli::config::{ConfigErrors, ExperimentConfig};
use securegate_cli::pipeline::{parse_stages, rotate_key, run_experiment, Stage};
use securegate_cli::{tables, Layout};

/// Exit codes.
const VALIDATION_FAILURE: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "securegate",
    version,
    about = "Run key-gated dual-adapter federated experiments"
)]
struct Cli {
    /// Worker threads for intra-stage parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults to the shipped configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set federation.rounds=5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages and write artifacts plus a manifest.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated stages; default all.
        #[arg(long)]
        stages: Option<String>,
    },
    /// Check a config and list every problem.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rerun the attacks and tables on existing artifacts.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the summary tables from existing attack reports.
    Tables {
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a client's access key and retrain its router.
    RotateKey {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        client: usize,
        #[arg(long)]
        new_key: String,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

fn load(args: &ConfigArgs, fallback: Option<&PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut sets = args.sets.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seed={s}"));
    }
    let result = match args.config.as_ref().or(fallback.filter(|p| p.exists())) {
        Some(p) => ExperimentConfig::load(p, &sets),
        None => {
            let env: Vec<(String, String)> = std::env::vars().collect();
            ExperimentConfig::from_toml_with(securegate_cli::config::DEFAULT_TOML, &env, &sets)
        }
    };
    result.map_err(|e: ConfigErrors| Failure::Validation(e.to_string()))
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Validation("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    match cli.command {
        Command::Run { cfg, out, stages } => {
            let cfg = load(&cfg, None)?;
            let stages = match stages {
                Some(s) => parse_stages(&s).map_err(Failure::Validation)?,
                None => Stage::ALL.to_vec(),
            };
            let layout = Layout::new(&out);
            let a = run_experiment(&cfg, &layout, &stages).map_err(runtime)?;
            for (stage, secs) in &a.seconds {
                println!("{stage:<9} {secs:>8.1}s");
            }
            println!(
                "{} artifacts in {}",
                a.manifest.entries.len(),
                out.display()
            );
        }
        Command::Validate { cfg } => {
            load(&cfg, None)?;
            println!("config ok");
        }
        Command::Attack { cfg, out } => {
            let layout = Layout::new(&out);
            let cfg = load(&cfg, Some(&layout.config()))?;
            run_experiment(&cfg, &layout, &[Stage::Evaluate, Stage::Tables]).map_err(runtime)?;
            print!(
                "{}",
                tables::to_csv(&tables::emit_tables(&layout).map_err(runtime)?).map_err(runtime)?
            );
        }
        Command::Tables { out } => {
            let rows =
                tables::emit_tables(&Layout::new(&out)).map_err(|e| runtime(format!("{e:#}")))?;
            print!("{}", tables::to_csv(&rows).map_err(runtime)?);
        }
        Command::RotateKey {
            cfg,
            out,
            client,
            new_key,
        } => {
            let layout = Layout::new(&out);
            let cfg = load(&cfg, Some(&layout.config()))?;
            let r = rotate_key(&cfg, &layout, client, &new_key)
                .map_err(|e| runtime(format!("{e:#}")))?;
            println!(
                "client {}: `{}` -> `{}`; retired key reaches the revealing path on {:.1}% of prompts",
                r.client_id,
                r.old_key,
                r.new_key,
                100.0 * r.old_key_revealing_rate
            );
            for (cat, acc) in &r.heldout {
                println!("  held-out {cat:?}: {:.2}%", 100.0 * acc);
            }
            println!("attack reports are now stale; rerun `securegate attack`");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("invalid configuration:\n{msg}");
            ExitCode::from(VALIDATION_FAILURE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(RUNTIME_FAILURE)
        }
    }
}
