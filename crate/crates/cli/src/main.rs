use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tc3l_cli::commands::{self, any_failed};
use tc3l_cli::config::parse_list;
use tc3l_cli::{exit_code, RunConfig};
use tc3l_core::{Error, MarginMode, NssMode};

#[derive(Parser)]
#[command(name = "tc3l", version, about = "Adaptive-margin center-loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "margin-mode")]
    margin_mode: Option<MarginMode>,
}

impl ConfigArgs {
    fn assignments(&self) -> Vec<String> {
        let mut a = self.set.clone();
        if let Some(s) = self.seed {
            a.push(format!("seed={s}"));
        }
        if let Some(e) = self.epochs {
            a.push(format!("epochs={e}"));
        }
        if let Some(m) = self.margin_mode {
            a.push(format!("margin_mode={m}"));
        }
        a
    }

    fn load(&self, extra: Vec<String>) -> Result<RunConfig, Error> {
        let mut a = self.assignments();
        a.extend(extra);
        RunConfig::load(self.config.as_deref(), &a)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as CSV.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and write its artifacts.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        nss: Option<NssMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a CSV dataset; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every (nss, lambda) combination.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated lambda values.
        #[arg(long, default_value = "0.01,0.05,0.1,0.5,1.0")]
        lambda: String,
        /// Comma-separated NSS modes.
        #[arg(long, default_value = "ms,ns,mm")]
        nss: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline plus fixed- and adaptive-margin pipelines for each NSS mode.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn scalar_overrides(lambda: Option<f64>, nss: Option<NssMode>) -> Vec<String> {
    let mut a = Vec::new();
    if let Some(l) = lambda {
        a.push(format!("lambda={l:?}"));
    }
    if let Some(n) = nss {
        a.push(format!("nss={n}"));
    }
    a
}

fn execute(command: Command) -> Result<i32, Error> {
    match command {
        Command::GenData { config, out } => {
            let cfg = config.load(Vec::new())?;
            let data = commands::cmd_gen_data(&cfg, &out)?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train {
            config,
            lambda,
            nss,
            out,
        } => {
            let cfg = config.load(scalar_overrides(lambda, nss))?;
            let m = commands::cmd_train(&cfg, &out)?;
            emit(&format!(
                "overall_accuracy={:.4} mean_per_class_accuracy={:.4}\n",
                m.overall_accuracy, m.mean_per_class_accuracy
            ));
        }
        Command::Eval { checkpoint, data } => {
            let m = commands::cmd_eval(&checkpoint, &data)?;
            emit(&(m.to_json()? + "\n"));
        }
        Command::Sweep {
            config,
            lambda,
            nss,
            out,
        } => {
            let cfg = config.load(Vec::new())?;
            let lambdas: Vec<f64> = parse_list("--lambda", &lambda)?;
            let modes: Vec<NssMode> = parse_list("--nss", &nss)?;
            let runs = commands::cmd_sweep(&cfg, &lambdas, &modes, &out)?;
            emit(&std::fs::read_to_string(out.join("summary.csv"))?);
            if any_failed(&runs) {
                return Ok(2);
            }
        }
        Command::Ablate {
            config,
            lambda,
            out,
        } => {
            let cfg = config.load(scalar_overrides(lambda, None))?;
            let ablation = commands::cmd_ablate(&cfg, &out)?;
            emit(&ablation.table_csv());
            if any_failed(ablation.runs()) {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
