//! Implementations behind the CLI subcommands: train, compare,
//! analyze-uplift, flaw-audit, and filter-dataset. Each writes its artifacts
//! under an output directory and returns the in-memory results so tests can
//! drive the same surface the binary does.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::advantage::{compute_advantages, BaselineKind, Quadrant};
use crate::config::{BaselineName, ExperimentConfig, Overrides, ResolvedExperiment};
use crate::envs::{write_dataset, Prompt};
use crate::error::{Error, Result};
use crate::metrics::{csv_header, quadrant_histogram, uplift_analysis, MetricsRecord, UpliftReport};
use crate::policy::{Checkpoint, PolicyParams};
use crate::rng::{stream_rng, Stream};
use crate::trainer::RunEvent;

/// Artifacts produced by one training run.
#[derive(Debug)]
pub struct TrainOutputs {
    pub out_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

pub struct TrainOpts {
    pub config: PathBuf,
    pub overrides: Overrides,
    /// Resume from this checkpoint instead of a fresh policy.
    pub resume: Option<PathBuf>,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct CsvSink {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
    n_eval_sets: usize,
}

impl CsvSink {
    fn create(path: PathBuf, eval_sets: &[String], k: usize) -> Result<Self> {
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(csv_header(eval_sets, k))
            .map_err(|e| Error::format(&path, format!("write header: {e}")))?;
        Ok(CsvSink { writer, path, n_eval_sets: eval_sets.len() })
    }

    fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.writer
            .write_record(record.to_csv_row(self.n_eval_sets))
            .map_err(|e| Error::format(&self.path, format!("write row: {e}")))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Run one experiment out of a resolved config, writing the resolved-config
/// snapshot, the dataset, the metrics CSV, and checkpoints into `out_dir`.
pub fn run_resolved(resolved: &ResolvedExperiment, resume: Option<&Path>, out_dir: &Path) -> Result<TrainOutputs> {
    create_dir(out_dir)?;
    write_text(&out_dir.join("resolved.toml"), &resolved.snapshot_toml()?)?;

    let dataset = resolved.train_dataset()?;
    write_dataset(&out_dir.join("dataset.jsonl"), &dataset)?;
    let eval_sets = resolved.eval_sets()?;

    let (mut policy, start_step) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.seed != resolved.seed {
                return Err(Error::config(format!(
                    "checkpoint seed {} does not match run seed {}",
                    ckpt.seed, resolved.seed
                )));
            }
            let fresh = resolved.initial_policy()?;
            if !ckpt.policy.shape_matches(&fresh) {
                return Err(Error::config(
                    "checkpoint policy shape does not match the configured policy".to_string(),
                ));
            }
            (ckpt.policy, ckpt.next_step.saturating_sub(1))
        }
        None => {
            let policy = resolved.initial_policy()?;
            let init = Checkpoint { policy: policy.clone(), seed: resolved.seed, next_step: 1 };
            init.save(&out_dir.join("checkpoint_init.txt"))?;
            (policy, 0)
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut sink = CsvSink::create(metrics_path.clone(), &resolved.eval_set_names(), resolved.plan.eval_k)?;
    let final_checkpoint = out_dir.join("checkpoint_final.txt");

    let records = {
        let mut on_event = |event: RunEvent<'_>| -> Result<()> {
            match event {
                RunEvent::Record(record) => sink.write(record),
                RunEvent::Checkpoint(step, ckpt) => {
                    if step >= resolved.plan.steps {
                        ckpt.save(&final_checkpoint)
                    } else {
                        ckpt.save(&out_dir.join(format!("checkpoint_step_{step}.txt")))
                    }
                }
            }
        };
        resolved.trainer.run_experiment(
            &mut policy,
            &dataset,
            &eval_sets,
            &resolved.plan,
            start_step,
            &mut on_event,
        )?
    };
    sink.finish()?;

    Ok(TrainOutputs { out_dir: out_dir.to_path_buf(), records, metrics_path, final_checkpoint })
}

/// `train`: run one seeded experiment from a config file.
pub fn cmd_train(opts: &TrainOpts) -> Result<TrainOutputs> {
    let config = ExperimentConfig::from_path(&opts.config)?;
    let resolved = config.resolve(&opts.overrides)?;
    let out_dir = resolved
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("no output directory: set experiment.out_dir or pass --out-dir".to_string()))?;
    run_resolved(&resolved, opts.resume.as_deref(), &out_dir)
}

/// Results of a three-way baseline comparison.
#[derive(Debug)]
pub struct CompareOutputs {
    pub out_dir: PathBuf,
    pub runs: Vec<TrainOutputs>,
    pub merged_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub baseline: String,
    /// `(set name, pass@k, mean@k)` from the final evaluation.
    pub final_evals: Vec<(String, f64, f64)>,
}

/// `compare`: run the grpo, static, and corpo configs with shared seeds. The
/// three configs must be identical apart from the baseline selection; each
/// run sees the same datasets and the same per-prompt RNG streams at step 0.
pub fn cmd_compare(
    grpo_config: &Path,
    static_config: &Path,
    corpo_config: &Path,
    overrides: &Overrides,
    out_dir: &Path,
) -> Result<CompareOutputs> {
    let paths = [grpo_config, static_config, corpo_config];
    let expected = [BaselineName::Grpo, BaselineName::Static, BaselineName::Corpo];
    let mut resolved = Vec::with_capacity(3);
    for (path, want) in paths.iter().zip(expected) {
        let config = ExperimentConfig::from_path(path)?;
        if config.train.baseline != want {
            return Err(Error::config(format!(
                "{} must use baseline `{}`, found `{}`",
                path.display(),
                want.label(),
                config.train.baseline.label()
            )));
        }
        resolved.push(config.resolve(overrides)?);
    }
    let reference = resolved[0].baseline_masked_raw();
    for (path, run) in paths.iter().zip(&resolved).skip(1) {
        if run.baseline_masked_raw() != reference {
            return Err(Error::config(format!(
                "{} diverges from the grpo config beyond the baseline selection",
                path.display()
            )));
        }
    }

    create_dir(out_dir)?;
    let mut runs = Vec::with_capacity(3);
    for run in &resolved {
        let label = run.trainer.config().baseline.label();
        runs.push(run_resolved(run, None, &out_dir.join(label))?);
    }

    // merged CSV: every run's rows under one header
    let merged_csv = out_dir.join("merged.csv");
    {
        let mut sink =
            CsvSink::create(merged_csv.clone(), &resolved[0].eval_set_names(), resolved[0].plan.eval_k)?;
        for run in &runs {
            for record in &run.records {
                sink.write(record)?;
            }
        }
        sink.finish()?;
    }

    // summary: final pass@k / mean@k per eval set for each baseline
    let set_names = resolved[0].eval_set_names();
    let mut summary = Vec::with_capacity(3);
    for run in &runs {
        let last = run.records.last().ok_or_else(|| Error::domain("run produced no records".to_string()))?;
        let evals = last
            .evals
            .as_ref()
            .ok_or_else(|| Error::domain("final record carries no evaluation".to_string()))?;
        summary.push(SummaryRow {
            baseline: last.baseline.clone(),
            final_evals: set_names
                .iter()
                .zip(evals)
                .map(|(name, &(pass, mean))| (name.clone(), pass, mean))
                .collect(),
        });
    }

    let summary_csv = out_dir.join("summary.csv");
    {
        let file = std::fs::File::create(&summary_csv).map_err(|e| Error::io(&summary_csv, e))?;
        let mut writer = csv::Writer::from_writer(file);
        let k = resolved[0].plan.eval_k;
        let mut header = vec!["baseline".to_string()];
        for name in &set_names {
            header.push(format!("{name}_pass@{k}"));
            header.push(format!("{name}_mean@{k}"));
        }
        writer.write_record(&header).map_err(|e| Error::format(&summary_csv, e.to_string()))?;
        for row in &summary {
            let mut record = vec![row.baseline.clone()];
            for (_, pass, mean) in &row.final_evals {
                record.push(pass.to_string());
                record.push(mean.to_string());
            }
            writer.write_record(&record).map_err(|e| Error::format(&summary_csv, e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(&summary_csv, e))?;
    }

    Ok(CompareOutputs { out_dir: out_dir.to_path_buf(), runs, merged_csv, summary_csv, summary })
}

/// Sample rollouts from `policy` for every prompt and keep the distinct
/// correct trajectories, the seeded selection pass behind `analyze-uplift`.
pub fn collect_correct_trajectories(
    resolved: &ResolvedExperiment,
    policy: &PolicyParams,
    dataset: &[Prompt],
    samples_per_prompt: usize,
) -> Result<Vec<Vec<usize>>> {
    let trainer = &resolved.trainer;
    let mut unique: BTreeSet<Vec<usize>> = BTreeSet::new();
    for prompt in dataset {
        let mut rng = stream_rng(resolved.seed, Stream::UpliftSample, &[prompt.id]);
        for _ in 0..samples_per_prompt {
            let trajectory = trainer.sample_graded(policy, prompt, &mut rng)?;
            if trajectory.correct {
                unique.insert(trajectory.tokens);
            }
        }
    }
    Ok(unique.into_iter().collect())
}

/// `analyze-uplift`: how did trajectory probabilities move between two
/// checkpoints, bucketed by initial likelihood rank.
pub fn cmd_analyze_uplift(
    before_path: &Path,
    after_path: &Path,
    config_path: &Path,
    overrides: &Overrides,
    n_buckets: usize,
    samples_per_prompt: usize,
    out_path: &Path,
) -> Result<UpliftReport> {
    let config = ExperimentConfig::from_path(config_path)?;
    let resolved = config.resolve(overrides)?;
    let before = Checkpoint::load(before_path)?;
    let after = Checkpoint::load(after_path)?;
    if !before.policy.shape_matches(&after.policy) {
        return Err(Error::domain("checkpoints have incompatible policy shapes".to_string()));
    }

    let dataset = resolved.train_dataset()?;
    let correct = collect_correct_trajectories(&resolved, &before.policy, &dataset, samples_per_prompt)?;
    if correct.is_empty() {
        return Err(Error::domain(
            "the sampling pass found no correct trajectories to analyze".to_string(),
        ));
    }
    let report = uplift_analysis(&before.policy, &after.policy, &correct, n_buckets)?;

    let file = std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(["bucket", "count", "mean_uplift_ratio"])
        .map_err(|e| Error::format(out_path, e.to_string()))?;
    for bucket in &report.buckets {
        writer
            .write_record([bucket.bucket.to_string(), bucket.count.to_string(), bucket.mean_ratio.to_string()])
            .map_err(|e| Error::format(out_path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(out_path, e))?;
    Ok(report)
}

/// Quadrant histogram of one baseline over an audited batch.
#[derive(Debug, Clone)]
pub struct AuditRow {
    pub baseline: String,
    pub n_trajectories: usize,
    pub n_dropped_groups: usize,
    pub counts: [usize; 4],
    pub failed_positive_fraction: f64,
}

/// `flaw-audit`: sample one batch of rollouts from a checkpoint and compute
/// the advantage-sign quadrants under all three baselines on those
/// identical rollouts. Grpo drops zero-variance groups (its variance-filter
/// default); static and corpo keep them.
pub fn cmd_flaw_audit(
    checkpoint_path: &Path,
    config_path: &Path,
    overrides: &Overrides,
    out_path: &Path,
) -> Result<Vec<AuditRow>> {
    let config = ExperimentConfig::from_path(config_path)?;
    let resolved = config.resolve(overrides)?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let fresh = resolved.initial_policy()?;
    if !ckpt.policy.shape_matches(&fresh) {
        return Err(Error::config(
            "checkpoint policy shape does not match the configured environment".to_string(),
        ));
    }

    let dataset = resolved.train_dataset()?;
    let trainer = &resolved.trainer;
    let batch = trainer.select_batch(&dataset, ckpt.next_step);
    let groups = trainer.collect_batch(&ckpt.policy, &batch, ckpt.next_step)?;

    let threshold = trainer.threshold();
    let scale = trainer.effective_scale();
    let norm = trainer.config().norm;
    let mut rows = Vec::with_capacity(3);
    for kind in [
        BaselineKind::GroupMean,
        BaselineKind::Static { threshold },
        BaselineKind::Corpo { threshold },
    ] {
        let drop_degenerate = matches!(kind, BaselineKind::GroupMean);
        let mut dropped = 0usize;
        let mut reports = Vec::new();
        for group in &groups {
            if drop_degenerate && group.degenerate {
                dropped += 1;
                continue;
            }
            let rewards: Vec<f64> = group.trajectories.iter().map(|t| t.reward).collect();
            reports.push(compute_advantages(&rewards, kind, norm, scale)?);
        }
        let counts = quadrant_histogram(&reports);
        rows.push(AuditRow {
            baseline: kind.label().to_string(),
            n_trajectories: counts.total(),
            n_dropped_groups: dropped,
            counts: counts.counts,
            failed_positive_fraction: counts.fraction(Quadrant::FailedPositive),
        });
    }

    let file = std::fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record([
            "baseline",
            "n_trajectories",
            "n_dropped_groups",
            "q_failed_pos",
            "q_failed_nonpos",
            "q_correct_pos",
            "q_correct_nonpos",
            "failed_pos_fraction",
        ])
        .map_err(|e| Error::format(out_path, e.to_string()))?;
    for row in &rows {
        writer
            .write_record([
                row.baseline.clone(),
                row.n_trajectories.to_string(),
                row.n_dropped_groups.to_string(),
                row.counts[0].to_string(),
                row.counts[1].to_string(),
                row.counts[2].to_string(),
                row.counts[3].to_string(),
                row.failed_positive_fraction.to_string(),
            ])
            .map_err(|e| Error::format(out_path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(out_path, e))?;
    Ok(rows)
}

/// `filter-dataset`: run the difficulty filter standalone and write the
/// surviving prompts. Returns `(kept, total)`.
pub fn cmd_filter_dataset(
    config_path: &Path,
    checkpoint: Option<&Path>,
    overrides: &Overrides,
    out_path: &Path,
) -> Result<(usize, usize)> {
    let config = ExperimentConfig::from_path(config_path)?;
    let resolved = config.resolve(overrides)?;
    if resolved.trainer.config().difficulty_filter.is_none() {
        return Err(Error::config(
            "no [train.difficulty_filter] section configured; nothing to filter".to_string(),
        ));
    }
    let policy = match checkpoint {
        Some(path) => Checkpoint::load(path)?.policy,
        None => resolved.initial_policy()?,
    };
    let dataset = resolved.train_dataset()?;
    let kept = resolved.trainer.difficulty_filter(&policy, &dataset)?;
    write_dataset(out_path, &kept)?;
    Ok((kept.len(), dataset.len()))
}

/// One human-readable line per summary row, for the CLI.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut out = String::new();
    for row in summary {
        let _ = write!(out, "{:>8}", row.baseline);
        for (name, pass, mean) in &row.final_evals {
            let _ = write!(out, "  {name}: pass {pass:.4} mean {mean:.4}");
        }
        out.push('\n');
    }
    out
}
