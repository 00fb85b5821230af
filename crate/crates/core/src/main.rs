//! Command-line front end: run the full pipeline or any single stage
//! against a shared run directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsynth::config::{Overrides, RunConfig};
use fedsynth::pipeline::{self, RunDir};

#[derive(Parser)]
#[command(
    name = "fedsynth",
    about = "DP synthetic text generation in cross-silo federated learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config file).
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Total per-client privacy budget epsilon.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Fraction of clients that can finetune locally.
    #[arg(long)]
    strong_fraction: Option<f64>,

    /// Comma-separated code indices visible to strong clients (non-IID).
    #[arg(long, value_delimiter = ',')]
    strong_codes: Option<Vec<usize>>,

    /// Votes per local example during refinement.
    #[arg(long)]
    k: Option<usize>,

    /// Refinement sampling rate.
    #[arg(long)]
    rate: Option<f64>,

    /// Resample uniformly instead of by votes.
    #[arg(long)]
    uniform: bool,

    /// Disable differential privacy everywhere (epsilon = inf).
    #[arg(long)]
    non_private: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run all six stages end to end.
    Run(CommonArgs),
    /// Materialize the corpus and held-out reference.
    GenCorpus(CommonArgs),
    /// Split the corpus into client datasets.
    Partition(CommonArgs),
    /// Federated DP finetuning on strong clients.
    Finetune(CommonArgs),
    /// DP profiling and profile-guided generation.
    Generate(CommonArgs),
    /// DP KNN voting and weighted resampling.
    Refine(CommonArgs),
    /// Metrics for the unrefined and refined synthetic sets.
    Eval(CommonArgs),
    /// Print a default configuration file.
    InitConfig,
}

fn resolve_config(args: &CommonArgs) -> Result<RunConfig, fedsynth::Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        out_dir: args.out_dir.clone(),
        env_out_dir: std::env::var_os("FEDSYNTH_OUT_DIR").map(PathBuf::from),
        seed: args.seed,
        epsilon: args.epsilon,
        strong_fraction: args.strong_fraction,
        strong_codes: args.strong_codes.clone(),
        k: args.k,
        rate: args.rate,
        uniform: args.uniform,
        non_private: args.non_private,
    };
    cfg.apply_overrides(&overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: &Command) -> Result<(), fedsynth::Error> {
    match command {
        Command::InitConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        Command::Run(args) => {
            let cfg = resolve_config(args)?;
            let outcome = pipeline::run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            Ok(())
        }
        Command::GenCorpus(args)
        | Command::Partition(args)
        | Command::Finetune(args)
        | Command::Generate(args)
        | Command::Refine(args)
        | Command::Eval(args) => {
            let cfg = resolve_config(args)?;
            let dir = RunDir::new(&cfg.out_dir);
            std::fs::create_dir_all(dir.root())?;
            match command {
                Command::GenCorpus(_) => pipeline::stage_gen_corpus(&cfg, &dir)
                    .map_err(|e| e.in_stage("gen-corpus"))?,
                Command::Partition(_) => {
                    pipeline::stage_partition(&cfg, &dir).map_err(|e| e.in_stage("partition"))?
                }
                Command::Finetune(_) => {
                    pipeline::stage_finetune(&cfg, &dir).map_err(|e| e.in_stage("finetune"))?
                }
                Command::Generate(_) => {
                    pipeline::stage_generate(&cfg, &dir).map_err(|e| e.in_stage("generate"))?
                }
                Command::Refine(_) => {
                    pipeline::stage_refine(&cfg, &dir).map_err(|e| e.in_stage("refine"))?
                }
                Command::Eval(_) => {
                    let comparison =
                        pipeline::stage_eval(&cfg, &dir).map_err(|e| e.in_stage("eval"))?;
                    println!("{}", serde_json::to_string_pretty(&comparison)?);
                }
                _ => unreachable!(),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
