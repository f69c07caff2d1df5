//! Command-line front end for the certified-controller pipeline. Each
//! subcommand runs one stage against a working directory; `pipeline` runs
//! them all. Errors are emitted as one JSON object on stderr so callers can
//! parse them: exit code 2 for configuration problems, 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpstab::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "gpstab", about = "GP dynamics identification, controller synthesis, and stability certification")]
struct Cli {
    /// JSON config file; defaults apply for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Working directory for stage inputs and outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the RNG seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Config overrides as dotted-path assignments, e.g.
    /// `--set iterations=200 --set certify_step=0.05`. Values parse as JSON.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample noisy dynamics data onto data.csv.
    GenData,
    /// Optimize hyperparameters and fit the GP mean.
    FitGp,
    /// Initialize the value function from the linearized LQR solution.
    InitLqr,
    /// Improve the controller by HJB-residual descent.
    Synthesize,
    /// Certify a stability region for a controller.
    Certify {
        /// Controller file within the working directory.
        #[arg(long, default_value = "controller.json")]
        controller: String,
    },
    /// Roll out the true plant from certified starting points.
    Simulate,
    /// Run every stage in order.
    Pipeline,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Stage(PipelineError),
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut value = match &cli.config {
        Some(path) => {
            let body = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<serde_json::Value>(&body)
                .map_err(|e| CliError::Config(format!("invalid JSON in {}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    for assignment in &cli.set {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got {assignment:?}")))?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            slot = slot
                .as_object_mut()
                .ok_or_else(|| CliError::Config(format!("{key}: not an object path")))?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::json!({}));
        }
        slot.as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: not an object path")))?
            .insert(parts[parts.len() - 1].to_string(), parsed);
    }
    if let Some(seed) = cli.seed {
        value["seed"] = serde_json::json!(seed);
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    if let Some(threads) = cli.threads {
        // ignore failure when a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = &cli.out;
    let res = match &cli.command {
        Command::GenData => pipeline::gen_data_stage(&cfg, out).map(|_| ()),
        Command::FitGp => pipeline::fit_gp_stage(&cfg, out).map(|_| ()),
        Command::InitLqr => pipeline::init_lqr_stage(&cfg, out).map(|_| ()),
        Command::Synthesize => pipeline::synthesize_stage(&cfg, out).map(|_| ()),
        Command::Certify { controller } => {
            pipeline::certify_stage(&cfg, out, controller).map(|_| ())
        }
        Command::Simulate => pipeline::simulate_stage(&cfg, out).map(|_| ()),
        Command::Pipeline => pipeline::run_pipeline(&cfg, out),
    };
    res.map_err(CliError::Stage)
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::GenData => "gen-data",
        Command::FitGp => "fit-gp",
        Command::InitLqr => "init-lqr",
        Command::Synthesize => "synthesize",
        Command::Certify { .. } => "certify",
        Command::Simulate => "simulate",
        Command::Pipeline => "pipeline",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(reason)) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "stage": stage_name(&cli.command),
                    "error": "config",
                    "reason": reason,
                })
            );
            ExitCode::from(2)
        }
        Err(CliError::Stage(e)) => {
            let mut obj = serde_json::json!({
                "stage": stage_name(&cli.command),
                "error": "stage",
                "reason": e.to_string(),
            });
            if let Some(path) = e.missing() {
                obj["missing"] = serde_json::json!(path
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default());
            }
            eprintln!("{obj}");
            ExitCode::FAILURE
        }
    }
}
