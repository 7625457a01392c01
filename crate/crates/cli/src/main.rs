use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use expfam_cli::{
    cmd_experiment, cmd_fit, cmd_impute, exit_code, read_config, resolve_recipe, ExperimentConfig,
    FitConfig, ImputeConfig,
};
use expfam_core::experiments::RunContext;
use expfam_core::Result;

#[derive(Parser)]
#[command(name = "expfam-proj", version, about = "Bayesian exponential-family projections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for replicate-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// UCI SPECT file or directory (synthetic stand-in when absent).
    #[arg(long, global = true)]
    spect: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model with MAP, HMC or GiBECCA.
    Fit,
    /// Run a built-in experiment: epls-vs-sepca, beta-sweep, cca-knn or sampler-bench.
    Experiment {
        /// Recipe name; may instead be given in the config.
        name: Option<String>,
    },
    /// Hold out entries, fit on the rest and predict them.
    Impute,
}

fn need_config(cli: &Cli) -> Result<&Path> {
    cli.config.as_deref().ok_or_else(|| expfam_core::Error::Config {
        path: "--config".into(),
        msg: "this command needs a config file".into(),
    })
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Fit => {
            let path = need_config(cli)?;
            let mut cfg: FitConfig = read_config(path)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let summary = cmd_fit(&cfg, &base_dir(path), cli.spect.as_deref(), &cli.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(0)
        }
        Command::Impute => {
            let path = need_config(cli)?;
            let mut cfg: ImputeConfig = read_config(path)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let summary = cmd_impute(&cfg, &base_dir(path), cli.spect.as_deref(), &cli.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(0)
        }
        Command::Experiment { name } => {
            let cfg: ExperimentConfig = match &cli.config {
                Some(p) => read_config(p)?,
                None => ExperimentConfig::default(),
            };
            let recipe = resolve_recipe(name.as_deref(), &cfg)?;
            let ctx = RunContext {
                seed: cli.seed.or(cfg.seed).unwrap_or(0),
                jobs: cli.jobs,
                spect: cli.spect.clone(),
            };
            let output = cmd_experiment(recipe, cfg.overrides.as_ref(), &ctx, &cli.out)?;
            println!("{}", serde_json::to_string_pretty(&output.summary)?);
            if output.failures.is_empty() {
                Ok(0)
            } else {
                eprintln!("{} unit(s) of work failed; see the summary", output.failures.len());
                Ok(3)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
