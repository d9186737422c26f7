use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::trainer::Mode;
use crate::types::{HyperParams, PolicyParams};

use super::{read_to_string, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    /// Draw fresh reference rollouts each step instead of using cached
    /// per-prompt accuracies.
    pub fresh_rollouts: bool,
    /// Rollouts per prompt when freezing a reference.
    pub k_ref: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            fresh_rollouts: false,
            k_ref: 64,
        }
    }
}

/// Initial logits, shared by every bucket. Missing vectors mean uniform.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub depth_logits: Option<Vec<f64>>,
    pub redundancy_logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    /// Prompt-set JSON; relative paths resolve against the config file.
    pub prompts: PathBuf,
    pub hyper: HyperParams,
    pub mode: Mode,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    pub reference: ReferenceConfig,
    pub init: InitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            prompts: PathBuf::from("prompts.json"),
            hyper: HyperParams::default(),
            mode: Mode::CrtTwoStage,
            seed: 0,
            checkpoint_every: 10,
            output_dir: PathBuf::from("runs/default"),
            reference: ReferenceConfig::default(),
            init: InitConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json_str(&read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.prompts = resolve(base, &cfg.prompts);
        cfg.output_dir = resolve(base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.hyper.validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.reference.k_ref < 2 {
            return Err(Error::Config("reference.k_ref must be at least 2".into()));
        }
        self.init_params().map(|_| ())
    }

    /// Digest of the canonical JSON form; stamped into every artifact.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("configs always serialize").as_bytes())
    }

    pub fn init_params(&self) -> Result<PolicyParams> {
        let depth = self
            .init
            .depth_logits
            .clone()
            .unwrap_or_else(|| vec![0.0; self.env.s_max]);
        let redundancy = self
            .init
            .redundancy_logits
            .clone()
            .unwrap_or_else(|| vec![0.0; self.env.r_max + 1]);
        let params = PolicyParams::replicated(depth, redundancy, self.env.buckets());
        params.validate()?;
        self.env
            .check_params(&params)
            .map_err(|e| Error::Config(format!("init logits: {e}")))?;
        Ok(params)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}
