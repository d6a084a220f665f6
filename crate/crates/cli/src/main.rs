//! `corpo` — experiment runner and analysis front-end for the group-based
//! advantage baseline laboratory.
//!
//! Exit codes: 0 success, 1 validation error (bad config or arguments),
//! 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corpo_core::commands::{
    cmd_analyze_uplift, cmd_compare, cmd_filter_dataset, cmd_flaw_audit, cmd_train, format_summary,
    TrainOpts,
};
use corpo_core::config::Overrides;
use corpo_core::Error;

#[derive(Parser)]
#[command(name = "corpo", version, about = "Group-based advantage baseline experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOverrides {
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override eval.k (pass@k / mean@k).
    #[arg(short, long)]
    k: Option<usize>,
}

impl CommonOverrides {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, out_dir: self.out_dir.clone(), eval_k: self.k }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded experiment: metrics CSV, checkpoints, dataset, and a
    /// resolved-config snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Run the grpo, static, and corpo configs with shared seeds and merge
    /// their metrics. The configs must differ only in baseline.
    Compare {
        /// Config paths in baseline order: grpo, static, corpo.
        #[arg(long, num_args = 3, value_names = ["GRPO", "STATIC", "CORPO"])]
        config: Vec<PathBuf>,
        /// Directory for the merged outputs (per-run outputs nest inside).
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Bucket correct trajectories by their likelihood under a "before"
    /// checkpoint and report mean post/pre probability ratios.
    AnalyzeUplift {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
        /// Rollouts per prompt in the correct-trajectory sampling pass.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample one batch from a checkpoint and report the advantage-sign
    /// quadrants under all three baselines on identical rollouts.
    FlawAudit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the difficulty filter standalone and write the surviving prompts.
    FilterDataset {
        #[arg(long)]
        config: PathBuf,
        /// Probe with this checkpoint's policy instead of a fresh one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output dataset path (line-delimited JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, checkpoint, common } => {
            let outputs = cmd_train(&TrainOpts {
                config,
                overrides: common.overrides(),
                resume: checkpoint,
            })?;
            println!(
                "wrote {} rows to {}",
                outputs.records.len(),
                outputs.metrics_path.display()
            );
            println!("final checkpoint: {}", outputs.final_checkpoint.display());
        }
        Command::Compare { config, out_dir, seed, k } => {
            let overrides = Overrides { seed, out_dir: None, eval_k: k };
            let outputs = cmd_compare(&config[0], &config[1], &config[2], &overrides, &out_dir)?;
            println!("merged metrics: {}", outputs.merged_csv.display());
            print!("{}", format_summary(&outputs.summary));
        }
        Command::AnalyzeUplift { before, after, config, buckets, samples, out, seed } => {
            let overrides = Overrides { seed, out_dir: None, eval_k: None };
            let report =
                cmd_analyze_uplift(&before, &after, &config, &overrides, buckets, samples, &out)?;
            for bucket in &report.buckets {
                println!(
                    "bucket {} (n = {}): mean uplift ratio {:.6}",
                    bucket.bucket, bucket.count, bucket.mean_ratio
                );
            }
            println!("wrote {}", out.display());
        }
        Command::FlawAudit { checkpoint, config, out, seed } => {
            let overrides = Overrides { seed, out_dir: None, eval_k: None };
            let rows = cmd_flaw_audit(&checkpoint, &config, &overrides, &out)?;
            for row in &rows {
                println!(
                    "{:>8}: failed-positive {:.4} over {} trajectories ({} groups dropped)",
                    row.baseline, row.failed_positive_fraction, row.n_trajectories, row.n_dropped_groups
                );
            }
            println!("wrote {}", out.display());
        }
        Command::FilterDataset { config, checkpoint, out, seed } => {
            let overrides = Overrides { seed, out_dir: None, eval_k: None };
            let (kept, total) = cmd_filter_dataset(&config, checkpoint.as_deref(), &overrides, &out)?;
            println!("kept {kept} of {total} prompts -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
