use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metanorm_cli::commands::{cmd_gradcheck, cmd_params, cmd_sweep, cmd_train, sweep_exit_code};
use metanorm_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "metanorm",
    version,
    about = "Normalization experiments on small convolutional networks"
)]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Machine-readable output where supported.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured network and write metrics and a checkpoint.
    Train,
    /// Finite-difference check of a layer's gradients.
    Gradcheck {
        /// Overrides `gradcheck.target`, e.g. `ilm+gn(2)`, `standardize:in`, `rescale`.
        #[arg(long)]
        target: Option<String>,
        /// Overrides `gradcheck.shape`, e.g. `2,8,4,4`.
        #[arg(long)]
        shape: Option<String>,
    },
    /// Parameter counts and the increment added by meta normalization.
    Params {
        /// resnet18, resnet34, resnet50, resnet101, resnet152 or micro.
        arch: Vec<String>,
    },
    /// One training run per value of the configured sweep axis.
    Sweep {
        /// Overrides `sweep.axis`.
        #[arg(long)]
        axis: Option<String>,
        /// Overrides `sweep.values`; may be empty.
        #[arg(long, allow_hyphen_values = true)]
        values: Option<String>,
    },
}

fn load_config(cli: &Cli, overrides: &[(&str, Option<&String>)]) -> Result<ExperimentConfig, CliError> {
    let mut text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?,
        None => String::new(),
    };
    // Overrides are appended as config lines, replacing any earlier value.
    for (key, value) in overrides {
        if let Some(v) = value {
            text = text
                .lines()
                .filter(|l| {
                    l.split('#')
                        .next()
                        .and_then(|l| l.split_once('='))
                        .map(|(k, _)| k.trim())
                        != Some(*key)
                })
                .map(|l| format!("{l}\n"))
                .collect();
            text += &format!("{key} = {v}\n");
        }
    }
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("METANORM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "METANORM_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    let mut stdout = std::io::stdout();
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli, &[])?;
            let outcome = cmd_train(&cfg, &mut stdout)?;
            if cli.json {
                let summary = serde_json::json!({
                    "out_dir": cfg.out_dir.display().to_string(),
                    "parameters": outcome.params.total,
                    "ilm_extra": outcome.params.norm_extra,
                    "final_train_error": outcome.final_train_error,
                    "final_val_error": outcome.final_val_error,
                    "batch_gap": outcome.batch_gap,
                });
                writeln!(stdout, "{summary}").map_err(|e| CliError::io("stdout", e))?;
            }
            Ok(0)
        }
        Command::Gradcheck { target, shape } => {
            let cfg = load_config(
                cli,
                &[
                    ("gradcheck.target", target.as_ref()),
                    ("gradcheck.shape", shape.as_ref()),
                ],
            )?;
            cmd_gradcheck(&cfg, cli.json, &mut stdout)?;
            Ok(0)
        }
        Command::Params { arch } => {
            let cfg = load_config(cli, &[])?;
            cmd_params(arch, &cfg, cli.json, &mut stdout)?;
            Ok(0)
        }
        Command::Sweep { axis, values } => {
            let cfg = load_config(cli, &[("sweep.axis", axis.as_ref()), ("sweep.values", values.as_ref())])?;
            let runs = cmd_sweep(&cfg, threads()?, &mut stdout)?;
            Ok(sweep_exit_code(&runs))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
