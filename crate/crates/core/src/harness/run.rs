use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{exact_accuracy, exact_expected_length};
use crate::trainer::{Mode, Session, StepRecord};
use crate::types::{PolicyParams, PromptSet};

use super::checkpoint::{list_checkpoints, Checkpoint, CHECKPOINT_DIR};
use super::config::RunConfig;
use super::{create_dir_all, read_to_string, sha256_hex, write_atomic};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "steps.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ERROR_FILE: &str = "error.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop once this many steps have completed, without writing a summary,
    /// as if the process had been killed right after a checkpoint.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub final_step: u64,
    pub completed: bool,
}

/// Exact accuracy and expected length of one policy over the prompt set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub exact_accuracy: f64,
    pub exact_expected_length: f64,
}

impl PolicyEval {
    pub fn of(params: &PolicyParams, session: &Session, prompts: &PromptSet) -> Result<Self> {
        Ok(Self {
            exact_accuracy: exact_accuracy(params, prompts, &session.env)?,
            exact_expected_length: exact_expected_length(params, prompts, &session.env)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub mode: Mode,
    pub steps: u64,
    pub stage2_start: Option<u64>,
    pub stage2_threshold: Option<f64>,
    pub reference: PolicyEval,
    pub stage1_end: Option<PolicyEval>,
    #[serde(rename = "final")]
    pub final_policy: PolicyEval,
    pub final_lambda: f64,
}

/// Exclusive ownership of a run directory for the lifetime of the value.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (delete {} if it is stale)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn prompts_hash(prompts: &PromptSet) -> String {
    sha256_hex(prompts.to_json().as_bytes())
}

/// Starts a fresh run in `config.output_dir`.
pub fn train(config: &RunConfig, opts: TrainOptions) -> Result<RunOutcome> {
    config.validate()?;
    let run_dir = config.output_dir.clone();
    create_dir_all(&run_dir)?;
    let _lock = RunLock::acquire(&run_dir)?;
    if run_dir.join(LOG_FILE).exists() || run_dir.join(CHECKPOINT_DIR).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; resume it or choose another output directory",
            run_dir.display()
        )));
    }
    let prompts = PromptSet::load(&config.prompts)?;
    create_dir_all(&run_dir.join(CHECKPOINT_DIR))?;
    write_atomic(&run_dir.join(CONFIG_FILE), config.to_json().as_bytes())?;

    let session = Session::start(
        config.env.clone(),
        config.hyper.clone(),
        config.mode,
        config.reference.fresh_rollouts,
        config.reference.k_ref,
        config.init_params()?,
        &prompts,
        config.seed,
    )?;
    let runner = Runner {
        run_dir: run_dir.clone(),
        config_hash: config.hash(),
        prompts_hash: prompts_hash(&prompts),
        every: config.checkpoint_every,
        prompts,
    };
    File::create(run_dir.join(LOG_FILE)).map_err(|e| Error::io(run_dir.join(LOG_FILE), e))?;
    runner.checkpoint(&session)?;
    runner.drive(session, opts)
}

/// Continues the run in `run_dir` from `from`, or from its latest
/// checkpoint. Log lines at or after the checkpoint's step are discarded and
/// regenerated.
pub fn resume(run_dir: &Path, from: Option<&Path>, opts: TrainOptions) -> Result<RunOutcome> {
    let config = RunConfig::from_json_str(&read_to_string(&run_dir.join(CONFIG_FILE))?)?;
    let _lock = RunLock::acquire(run_dir)?;
    let path = match from {
        Some(p) => p.to_path_buf(),
        None => list_checkpoints(run_dir)?
            .pop()
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Config(format!("no checkpoints in {}", run_dir.display())))?,
    };
    let ckpt = Checkpoint::load(&path)?;
    let config_hash = config.hash();
    if ckpt.config_hash != config_hash {
        return Err(Error::Config(format!(
            "{} was written under config {} but {} hashes to {}",
            path.display(),
            ckpt.config_hash,
            CONFIG_FILE,
            config_hash
        )));
    }
    let prompts = PromptSet::load(&config.prompts)?;
    let prompts_hash = prompts_hash(&prompts);
    if ckpt.prompts_hash != prompts_hash {
        return Err(Error::Config(format!(
            "prompt set {} changed since {} was written",
            config.prompts.display(),
            path.display()
        )));
    }
    truncate_log(&run_dir.join(LOG_FILE), ckpt.step())?;
    for stale in [SUMMARY_FILE, ERROR_FILE] {
        let _ = fs::remove_file(run_dir.join(stale));
    }
    let runner = Runner {
        run_dir: run_dir.to_path_buf(),
        config_hash,
        prompts_hash,
        every: config.checkpoint_every,
        prompts,
    };
    runner.drive(ckpt.session, opts)
}

/// Keeps only records for steps before `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = if path.exists() { read_to_string(path)? } else { String::new() };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: StepRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if rec.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

pub fn read_log(run_dir: &Path) -> Result<Vec<StepRecord>> {
    let path = run_dir.join(LOG_FILE);
    read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn read_summary(run_dir: &Path) -> Result<Summary> {
    Ok(serde_json::from_str(&read_to_string(&run_dir.join(SUMMARY_FILE))?)?)
}

struct Runner {
    run_dir: PathBuf,
    config_hash: String,
    prompts_hash: String,
    every: u64,
    prompts: PromptSet,
}

impl Runner {
    fn checkpoint(&self, session: &Session) -> Result<PathBuf> {
        Checkpoint {
            config_hash: self.config_hash.clone(),
            prompts_hash: self.prompts_hash.clone(),
            session: session.clone(),
        }
        .save(&self.run_dir)
    }

    fn drive(&self, mut session: Session, opts: TrainOptions) -> Result<RunOutcome> {
        let log_path = self.run_dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let io = |e| Error::io(&log_path, e);

        while !session.finished() {
            if opts.stop_after.is_some_and(|n| session.state.step >= n) {
                log.flush().map_err(io)?;
                return Ok(RunOutcome {
                    run_dir: self.run_dir.clone(),
                    final_step: session.state.step,
                    completed: false,
                });
            }
            let record = match session.advance(&self.prompts) {
                Ok(r) => r,
                Err(e) => {
                    log.flush().map_err(io)?;
                    self.checkpoint(&session)?;
                    let report = serde_json::json!({
                        "step": session.state.step,
                        "error": e.to_string(),
                    });
                    write_atomic(
                        &self.run_dir.join(ERROR_FILE),
                        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
                    )?;
                    return Err(e);
                }
            };
            serde_json::to_writer(&mut log, &record).expect("step records always serialize");
            log.write_all(b"\n").map_err(io)?;
            if session.state.step.is_multiple_of(self.every) {
                log.flush().map_err(io)?;
                self.checkpoint(&session)?;
            }
        }
        log.flush().map_err(io)?;
        if !session.state.step.is_multiple_of(self.every) {
            self.checkpoint(&session)?;
        }
        let summary = self.summary(&session)?;
        write_atomic(
            &self.run_dir.join(SUMMARY_FILE),
            serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
        )?;
        Ok(RunOutcome {
            run_dir: self.run_dir.clone(),
            final_step: session.state.step,
            completed: true,
        })
    }

    fn summary(&self, session: &Session) -> Result<Summary> {
        let eval = |p: &PolicyParams| PolicyEval::of(p, session, &self.prompts);
        Ok(Summary {
            config_hash: self.config_hash.clone(),
            mode: session.mode,
            steps: session.state.step,
            stage2_start: session.stage2.as_ref().map(|f| f.start_step),
            stage2_threshold: session.stage2.as_ref().map(|f| f.guard.threshold()),
            reference: eval(&session.reference.params)?,
            stage1_end: session
                .stage2
                .as_ref()
                .map(|f| eval(&f.snapshot.params))
                .transpose()?,
            final_policy: eval(&session.state.params)?,
            final_lambda: session.state.dual_lambda,
        })
    }
}
