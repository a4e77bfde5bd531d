use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use wsl_cli::commands::{self, Options, Precision};
use wsl_cli::config::ExperimentConfig;
use wsl_cli::exit_code;
use wsl_cli::run::{write_json, RunDir};
use wsl_core::WslError;

#[derive(Parser)]
#[command(name = "wsl", version, about = "Train model zoos and hyper-representation autoencoders, then evaluate them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON). Defaults to `<out>/config.json` from an earlier command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for zoo training.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Autoencoder arithmetic.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the image datasets.
    GenData,
    /// Train the model zoo.
    TrainZoo,
    /// Train the autoencoder on the zoo's training split.
    TrainAe,
    /// Reconstruction fidelity and linear probes on the test split.
    Eval,
    /// Sample new models from the latent space.
    Generate,
    /// Jacobian, Taylor and gradient-approximation analysis.
    GradCheck,
    /// Retrain with each query source.
    AblateQueries,
    /// Retrain over a grid of β values.
    SweepBeta,
    /// Print the built-in single-core config.
    DefaultConfig,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let stored = cli.out.join("config.json");
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if stored.exists() => ExperimentConfig::load(&stored)?,
        None => {
            return Err(WslError::Config(format!("no --config given and {} does not exist", stored.display())).into());
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::DefaultConfig = cli.command {
        println!("{}", ExperimentConfig::desk().to_json());
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    let run = RunDir::open(&cli.out)?;
    write_json(&run.path("config.json"), &cfg).context("recording config")?;
    let opts = Options { threads: cli.threads.max(1), precision: cli.precision };
    let show = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
    match cli.command {
        Command::GenData => commands::gen_data(&run, &cfg)?,
        Command::TrainZoo => show(serde_json::to_value(commands::train_zoo(&run, &cfg, &opts)?)?),
        Command::TrainAe => show(serde_json::to_value(commands::train_ae(&run, &cfg, &opts)?)?),
        Command::Eval => {
            let m = commands::eval(&run, &cfg, &opts)?;
            let r = &m.reconstruction;
            println!("agreement {:.4} ± {:.4}", r.agreement.mean, r.agreement.std);
            println!("L2 distance {:.4} ± {:.4}", r.l2.mean, r.l2.std);
            println!("max accuracy delta {:+.4}", r.max_accuracy_delta);
            for p in &m.probes {
                println!("probe {:?}: R² test {:.4}", p.target, p.r2_test);
            }
        }
        Command::Generate => {
            let m = commands::generate(&run, &cfg, &opts)?;
            println!("{} anchors, q = {}; generated accuracy {:.4} ± {:.4}", m.anchors, m.pca_dim, m.accuracy.mean, m.accuracy.std);
        }
        Command::GradCheck => {
            let m = commands::grad_check(&run, &cfg)?;
            for a in &m.models {
                println!(
                    "model {}: Taylor ratio {:.3}, cosine {:?}",
                    a.model_id,
                    a.taylor.mean_ratio,
                    a.sweep.iter().map(|s| s.cosine).collect::<Vec<_>>()
                );
            }
        }
        Command::AblateQueries => {
            for r in commands::ablate_queries(&run, &cfg, &opts)? {
                println!("{:16} accuracy {:.4} agreement {:.4}", r.query_source.name(), r.accuracy_reconstructed_mean, r.agreement_mean);
            }
        }
        Command::SweepBeta => {
            println!("beta  R2(acc)  R2(gap)  L2        agreement");
            for r in commands::sweep_beta(&run, &cfg, &opts)? {
                println!(
                    "{:.1}   {:7.4}  {:7.4}  {:.3}({:.3})  {:.4}({:.4})",
                    r.beta, r.r2_test_accuracy, r.r2_generalization_gap, r.l2_mean, r.l2_std, r.agreement_mean, r.agreement_std
                );
            }
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
