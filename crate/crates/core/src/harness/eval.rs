use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::grad::{group_values, Objective};
use crate::metrics::{EvalReport, UNDEFINED};
use crate::norm::NormStatsSource;
use crate::rng::{tag, StreamSeed};
use crate::trainer::rollouts;
use crate::types::{PolicyParams, PromptSet, ReferenceSnapshot, RolloutGroup, TraceSample};

use super::checkpoint::{list_checkpoints, Checkpoint};

/// Samples `k` rollouts per prompt and aggregates them. Normalized length
/// uses `frozen` statistics when given, otherwise each prompt's own
/// rollouts (undefined for `k = 1`).
pub fn evaluate(
    params: &PolicyParams,
    env: &EnvConfig,
    prompts: &PromptSet,
    k: usize,
    seed: u64,
    frozen: Option<&ReferenceSnapshot>,
) -> Result<(EvalReport, Vec<RolloutGroup>)> {
    if k == 0 {
        return Err(Error::Config("evaluation needs at least one rollout per prompt".into()));
    }
    for p in prompts.prompts() {
        env.check_prompt(p)?;
    }
    let all: Vec<usize> = (0..prompts.len()).collect();
    let groups = if k == 1 {
        single_rollouts(params, env, prompts, seed)?
    } else {
        rollouts(params, &all, k, env, prompts, StreamSeed(seed), &[tag::EVAL])?
    };
    let norm = match frozen {
        Some(snap) => Some(NormStatsSource::frozen(snap)),
        None if k >= 2 => Some(NormStatsSource::live()),
        None => {
            log::warn!("one rollout per prompt: length spread and normalized length are unavailable");
            None
        }
    };
    let mean_lnorm = match norm {
        Some(norm) => {
            let mut total = 0.0;
            for g in &groups {
                total += group_values(g, Objective::NormalizedLength, &norm)?.iter().sum::<f64>();
            }
            Some(total / (groups.len() * k) as f64)
        }
        None => None,
    };
    Ok((EvalReport::from_groups(&groups, mean_lnorm)?, groups))
}

/// Rollout groups require two samples, so `k = 1` builds them directly.
fn single_rollouts(
    params: &PolicyParams,
    env: &EnvConfig,
    prompts: &PromptSet,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    let sampler = crate::env::TraceSampler::new(params, env)?;
    prompts
        .prompts()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = sampler.sample(p, &mut StreamSeed(seed).lane(&[tag::EVAL, i as u64, 0]))?;
            Ok(RolloutGroup {
                prompt_id: p.id.clone(),
                len_mean: s.token_count as f64,
                len_std: 0.0,
                samples: vec![s],
            })
        })
        .collect()
}

/// Evaluates a checkpoint. Stage II checkpoints report normalized length
/// under their frozen statistics, which must cover every prompt.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    prompts: &PromptSet,
    k: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<RolloutGroup>)> {
    let frozen = ckpt.session.stage2.as_ref().map(|f| &f.snapshot);
    if let Some(snap) = frozen {
        for p in prompts.prompts() {
            snap.len_stats(&p.id)?;
        }
    }
    evaluate(&ckpt.session.state.params, &ckpt.session.env, prompts, k, seed, frozen)
}

pub fn write_rollouts(path: &Path, groups: &[RolloutGroup]) -> Result<()> {
    let mut out = String::new();
    for s in groups.iter().flat_map(|g| &g.samples) {
        out.push_str(&serde_json::to_string(s).expect("samples always serialize"));
        out.push('\n');
    }
    super::write_atomic(path, out.as_bytes())
}

pub fn read_rollouts(path: &Path) -> Result<Vec<TraceSample>> {
    super::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// One row of a checkpoint sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub acc: f64,
    pub mean_len: f64,
    pub mean_lnorm: Option<f64>,
    pub r_zip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Checkpoint files that could not be loaded, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Evaluates every checkpoint of a run in step order. Unreadable
/// checkpoints are skipped with a warning.
pub fn sweep_checkpoints(run_dir: &Path, prompts: &PromptSet, k: usize, seed: u64) -> Result<Trajectory> {
    let found = list_checkpoints(run_dir)?;
    if found.is_empty() {
        return Err(Error::Config(format!("no checkpoints in {}", run_dir.display())));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (_, path) in found {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let ckpt = match Checkpoint::load(&path) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push((name, e.to_string()));
                continue;
            }
        };
        let (report, _) = evaluate_checkpoint(&ckpt, prompts, k, seed)?;
        rows.push(TrajectoryRow {
            step: ckpt.step(),
            acc: report.acc,
            mean_len: report.mean_len,
            mean_lnorm: report.mean_lnorm,
            r_zip: report.r_zip,
        });
    }
    Ok(Trajectory { rows, skipped })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

impl Trajectory {
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        for (name, reason) in &self.skipped {
            out.push_str(&format!("# skipped {name}: {}\n", reason.replace('\n', " ")));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "acc", "mean_len", "mean_lnorm", "r_zip"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.acc.to_string(),
                r.mean_len.to_string(),
                opt(r.mean_lnorm),
                opt(r.r_zip),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let skipped = text
            .lines()
            .filter_map(|l| l.strip_prefix("# skipped "))
            .map(|l| {
                let (name, reason) = l.split_once(": ").unwrap_or((l, ""));
                (name.to_string(), reason.to_string())
            })
            .collect();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let parse = |s: &str| -> Result<Option<f64>> {
            if s == UNDEFINED {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| Error::Parse(format!("`{s}`: {e}")))
            }
        };
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(Error::Parse(format!("trajectory row has {} fields", rec.len())));
            }
            rows.push(TrajectoryRow {
                step: rec[0].parse().map_err(|e| Error::Parse(format!("step: {e}")))?,
                acc: parse(&rec[1])?.ok_or_else(|| Error::Parse("acc is required".into()))?,
                mean_len: parse(&rec[2])?.ok_or_else(|| Error::Parse("mean_len is required".into()))?,
                mean_lnorm: parse(&rec[3])?,
                r_zip: parse(&rec[4])?,
            });
        }
        Ok(Self { rows, skipped })
    }
}
