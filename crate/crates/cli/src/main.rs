use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod plot;

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "tokplan", version, about = "Token-space trajectory planner: data, training, evaluation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted groups take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test scene corpora.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Supervised training; `--ckpt` resumes from a checkpoint.
    TrainSft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Total schedule length.
        #[arg(long)]
        steps: Option<usize>,
        /// Stop early at this optimizer step; resume later with `--ckpt`.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Reinforcement fine-tuning from a supervised checkpoint.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Also run the step, NMS and goal-count sweeps.
        #[arg(long)]
        sweeps: bool,
    },
    /// Run the inference optimization chain.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint with the narrow action branch.
        #[arg(long)]
        ckpt: PathBuf,
        /// Full-width checkpoint for the rows before the action expert.
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        /// Number of chain rows, counted from the baseline.
        #[arg(long)]
        chain: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Turn eval and bench reports into plot series.
    PlotData {
        #[command(flatten)]
        common: Common,
        reports: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common, train, test } => {
            let mut cfg = common.run_config()?;
            cfg.data.train = train.unwrap_or(cfg.data.train);
            cfg.data.test = test.unwrap_or(cfg.data.test);
            for p in commands::gen_data(&cfg, &common.out)? {
                println!("{}", p.display());
            }
        }
        Command::TrainSft { common, scenes, ckpt, steps, until } => {
            let mut cfg = common.run_config()?;
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            println!("{}", commands::train_sft_cmd(&cfg, &scenes, &common.out, ckpt.as_deref(), until)?.display());
        }
        Command::TrainRl { common, scenes, ckpt, epochs } => {
            let mut cfg = common.run_config()?;
            cfg.rl.epochs = epochs.unwrap_or(cfg.rl.epochs);
            println!("{}", commands::train_rl_cmd(&cfg, &scenes, &common.out, &ckpt)?.display());
        }
        Command::Eval { common, scenes, ckpt, sweeps } => {
            let mut cfg = common.run_config()?;
            cfg.eval.sweeps |= sweeps;
            let r = commands::eval_cmd(&cfg, &scenes, &common.out, &ckpt)?;
            let s = r.summary;
            println!(
                "scenes {} single {:.2} pre-edit {:.2} best-of-N {:.2} no-edit {:.2} DAC {:.3}",
                s.scenes, s.post_edit, s.pre_edit, s.best_of_n, r.no_edit.post_edit, s.dac
            );
        }
        Command::Bench { common, ckpt, baseline_ckpt, chain, warmup, iters } => {
            let mut cfg = common.run_config()?;
            let c = &mut cfg.bench.chain;
            c.steps = chain.unwrap_or(c.steps);
            c.warmup = warmup.unwrap_or(c.warmup);
            c.iters = iters.unwrap_or(c.iters);
            let r = commands::bench_cmd(&cfg, &common.out, &ckpt, baseline_ckpt.as_deref())?;
            print!("{}", r.chain.table());
        }
        Command::PlotData { common, reports } => {
            let m = commands::plot_data_cmd(&reports, &common.out)?;
            println!("{} series written", m.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
