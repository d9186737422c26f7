use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::metrics::{
    aes_table, redundancy_report, render_aes_table, stability_table,
    write_aes_csv, write_metric_csv, AesWeights, EvalReport, MetricRow,
};
use crate::types::PromptSet;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate_checkpoint, read_rollouts, sweep_checkpoints, write_rollouts, Trajectory};
use super::plot::line_chart;
use super::run::{resume, train, TrainOptions};
use super::{create_dir_all, read_to_string, write_atomic};

#[derive(Debug, Parser)]
#[command(name = "crtlab", version, about = "Constraint-rectified training of reasoning-length policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightPreset {
    Aes1,
    Aes2,
}

impl WeightPreset {
    pub fn weights(self) -> AesWeights {
        match self {
            WeightPreset::Aes1 => AesWeights::AES1,
            WeightPreset::Aes2 => AesWeights::AES2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            WeightPreset::Aes1 => "AES1",
            WeightPreset::Aes2 => "AES2",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy, or resume an interrupted run.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directory to resume.
        #[arg(long, conflicts_with_all = ["config", "seed", "out"])]
        resume: Option<PathBuf>,
        /// Checkpoint to resume from (default: the latest).
        #[arg(long, requires = "resume")]
        checkpoint: Option<PathBuf>,
        /// Stop after this many completed steps without writing a summary.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint on a prompt set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 16)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report JSON; a `metric,subset,value` CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Also write every sampled trace as JSONL.
        #[arg(long)]
        dump_rollouts: Option<PathBuf>,
    },
    /// Score model reports against a base report.
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// Row labels, one per model (default: file stems).
        #[arg(long)]
        name: Vec<String>,
        /// Preset reported as the headline score.
        #[arg(long, value_enum, default_value_t = WeightPreset::Aes1)]
        weights: WeightPreset,
        /// Table CSV (`method,acc,len,aes1,aes2`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every checkpoint of a run into a trajectory CSV.
    SweepCheckpoints {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 16)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compression-ratio redundancy of a rollout dump.
    Redundancy {
        /// Rollout JSONL as written by `eval --dump-rollouts`.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy stability among prompts whose length went down.
    Stability {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Configuration utilities.
    Config {
        /// Print a complete config with every default filled in.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Write a synthetic prompt set.
    GenPrompts {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        min_depth: usize,
        #[arg(long, default_value_t = 5)]
        max_depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one column of a trajectory CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "mean_len")]
        column: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir_all(p),
        _ => Ok(()),
    }
}

fn write_json_and_csv(out: &Path, json: &str, rows: &[MetricRow]) -> Result<()> {
    ensure_parent(out)?;
    write_atomic(out, json.as_bytes())?;
    let csv_path = out.with_extension("csv");
    write_atomic(&csv_path, write_metric_csv(rows)?.as_bytes())
}

fn load_report(path: &Path) -> Result<EvalReport> {
    EvalReport::from_json_str(&read_to_string(path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume: resume_dir,
            checkpoint,
            stop_after,
        } => {
            let opts = TrainOptions { stop_after };
            let outcome = match resume_dir {
                Some(dir) => resume(&dir, checkpoint.as_deref(), opts)?,
                None => {
                    let path = config.expect("clap enforces --config without --resume");
                    let mut cfg = RunConfig::load(&path)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    if let Some(o) = out {
                        cfg.output_dir = std::path::absolute(&o).unwrap_or(o);
                    }
                    train(&cfg, opts)?
                }
            };
            println!(
                "{} at step {} in {}",
                if outcome.completed { "finished" } else { "stopped" },
                outcome.final_step,
                outcome.run_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            prompts,
            rollouts,
            seed,
            out,
            dump_rollouts,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let prompts = PromptSet::load(&prompts)?;
            let (report, groups) = evaluate_checkpoint(&ckpt, &prompts, rollouts, seed)?;
            write_json_and_csv(&out, &report.to_json(), &report.metric_rows())?;
            if let Some(path) = dump_rollouts {
                ensure_parent(&path)?;
                write_rollouts(&path, &groups)?;
            }
            println!(
                "acc {:.2}  len {:.1}  ({} prompts x {} rollouts)",
                report.acc,
                report.mean_len,
                report.per_prompt.len(),
                rollouts
            );
        }
        Command::Compare {
            base,
            model,
            name,
            weights,
            out,
        } => {
            if !name.is_empty() && name.len() != model.len() {
                return Err(Error::Config(format!(
                    "{} names given for {} models",
                    name.len(),
                    model.len()
                )));
            }
            let base_report = load_report(&base)?;
            let mut models = Vec::new();
            for (i, path) in model.iter().enumerate() {
                let r = load_report(path)?;
                if !r.per_prompt.keys().eq(base_report.per_prompt.keys()) {
                    log::warn!(
                        "{} covers different prompts than the base; comparing aggregates only",
                        path.display()
                    );
                }
                let label = name.get(i).cloned().unwrap_or_else(|| stem(path));
                models.push((label, r.acc, r.mean_len));
            }
            let refs: Vec<(&str, f64, f64)> = models.iter().map(|(n, a, l)| (n.as_str(), *a, *l)).collect();
            let rows = aes_table((&stem(&base), base_report.acc, base_report.mean_len), &refs)?;
            print!("{}", render_aes_table(&rows));
            for r in &rows[1..] {
                let score = match weights {
                    WeightPreset::Aes1 => r.aes1,
                    WeightPreset::Aes2 => r.aes2,
                };
                println!("{} {}: {:.4}", r.method, weights.label(), score);
            }
            if let Some(out) = out {
                ensure_parent(&out)?;
                write_atomic(&out, write_aes_csv(&rows)?.as_bytes())?;
            }
        }
        Command::SweepCheckpoints {
            run,
            prompts,
            rollouts,
            seed,
            out,
        } => {
            let prompts = PromptSet::load(&prompts)?;
            let traj = sweep_checkpoints(&run, &prompts, rollouts, seed)?;
            ensure_parent(&out)?;
            write_atomic(&out, traj.to_csv()?.as_bytes())?;
            println!("{} checkpoints evaluated, {} skipped", traj.rows.len(), traj.skipped.len());
        }
        Command::Redundancy { log, out } => {
            let samples = read_rollouts(&log)?;
            let report = redundancy_report(&samples)?;
            write_json_and_csv(
                &out,
                &serde_json::to_string_pretty(&report).unwrap(),
                &report.metric_rows(),
            )?;
            println!("r_all {:.4} over {} samples", report.r_all, report.n_all);
        }
        Command::Stability { before, after, out } => {
            let row = stability_table(&load_report(&before)?, &load_report(&after)?)?;
            write_json_and_csv(&out, &serde_json::to_string_pretty(&row).unwrap(), &row.metric_rows())?;
            let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.1}"));
            println!(
                "AD {}  AP {}  AI {}  (n = {})",
                pct(row.ad_pct),
                pct(row.ap_pct),
                pct(row.ai_pct),
                row.n_len_down
            );
        }
        Command::Config { print_defaults } => {
            if !print_defaults {
                return Err(Error::Config("nothing to do; pass --print-defaults".into()));
            }
            println!("{}", RunConfig::default().to_json());
        }
        Command::GenPrompts {
            n,
            min_depth,
            max_depth,
            seed,
            out,
        } => {
            let set = PromptSet::synthetic(n, min_depth, max_depth, seed)?;
            ensure_parent(&out)?;
            set.save(&out)?;
            println!("{} prompts written to {}", set.len(), out.display());
        }
        Command::Plot { csv, column, out } => {
            let traj = Trajectory::from_csv(&read_to_string(&csv)?)?;
            let points: Vec<(f64, f64)> = traj
                .rows
                .iter()
                .filter_map(|r| {
                    let y = match column.as_str() {
                        "acc" => Some(r.acc),
                        "mean_len" => Some(r.mean_len),
                        "mean_lnorm" => r.mean_lnorm,
                        "r_zip" => r.r_zip,
                        _ => None,
                    };
                    y.map(|y| (r.step as f64, y))
                })
                .collect();
            if !["acc", "mean_len", "mean_lnorm", "r_zip"].contains(&column.as_str()) {
                return Err(Error::Config(format!("unknown column `{column}`")));
            }
            let svg = line_chart(&column, "step", &column, &points)?;
            ensure_parent(&out)?;
            write_atomic(&out, svg.as_bytes())?;
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}
