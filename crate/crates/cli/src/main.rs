use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cte_cli::pareto::{run_sweep, to_csv, SweepSpec};
use cte_cli::{
    apply_seed, bench, evaluate, load, read_train_config, save, train, write_json, DatasetArgs, TrainRequest,
    UsageError,
};

#[derive(Parser)]
#[command(
    name = "cte",
    version,
    about = "Convolutional tables ensemble: train, evaluate, benchmark"
)]
struct Cli {
    /// Worker threads for training and evaluation; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// `mnist-train`, `mnist-test`, `cifar10-train`, `cifar10-test`, or a .cted file.
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset root.
    #[arg(long, env = "CTE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Use only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

impl Data {
    fn args(&self) -> DatasetArgs {
        DatasetArgs {
            dataset: self.dataset.clone(),
            data_dir: self.data_dir.clone(),
            limit: self.limit,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: Data,
        /// Output model file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Training log (JSON); defaults to the model path with `.log.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Hold out this fraction of the data to report validation error per table.
        #[arg(long)]
        holdout: Option<f64>,
        /// Teacher soft labels for distillation.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Error rate and confusion matrix.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-thread per-image latency.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: Data,
        /// Timed voting passes over the images.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every point of a sweep and mark the latency/error frontier.
    Pareto {
        /// Sweep spec (TOML): `[base]` config and `[[point]]` entries.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        data: Data,
        /// Evaluation set; defaults to the training set.
        #[arg(long)]
        eval_dataset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// CSV output; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(p) = out {
        write_json(value, p)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the thread pool")?;
    match cli.command {
        Command::Train {
            config,
            data,
            model,
            seed,
            out,
            holdout,
            teacher,
        } => {
            let dataset = data.args().load()?;
            let mut config = read_train_config(&config)?;
            apply_seed(&mut config, seed);
            let (ens, log) = train(TrainRequest {
                config,
                data: &dataset,
                holdout,
                teacher,
            })?;
            save(&ens, &model)?;
            let log_path = out.unwrap_or_else(|| {
                let mut p = model.clone().into_os_string();
                p.push(".log.json");
                p.into()
            });
            write_json(&log, &log_path)?;
            if let Some(last) = log.tables.last() {
                println!(
                    "trained {} tables in {:.1}s, train error {:.4}",
                    log.tables.len(),
                    log.seconds,
                    last.train_error
                );
            }
        }
        Command::Eval { model, data, out } => {
            let ens = load(&model)?;
            let dataset = data.args().load()?;
            emit(&evaluate(&ens, &dataset)?, out.as_deref())?;
        }
        Command::Bench { model, data, reps, out } => {
            let ens = load(&model)?;
            let dataset = data.args().load()?;
            emit(&bench(&ens, &dataset, reps)?, out.as_deref())?;
        }
        Command::Pareto {
            config,
            data,
            eval_dataset,
            seed,
            reps,
            out,
        } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut spec: SweepSpec = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            apply_seed(&mut spec.base, seed);
            let train_set = data.args().load()?;
            let test_set = match eval_dataset {
                Some(name) => DatasetArgs {
                    dataset: Some(name),
                    ..data.args()
                }
                .load()?,
                None => train_set.clone(),
            };
            let csv = to_csv(&run_sweep(&spec, &train_set, &test_set, reps));
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
