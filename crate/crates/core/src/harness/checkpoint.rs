use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::Session;

use super::{read_to_string, write_atomic};

pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Everything needed to continue a run: the session (state, frozen
/// references, hyperparameters) plus digests of the config and prompt set
/// it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub prompts_hash: String,
    pub session: Session,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.session.state.step
    }

    pub fn file_name(step: u64) -> String {
        format!("checkpoint_{step:06}.json")
    }

    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join(CHECKPOINT_DIR).join(Self::file_name(self.step()));
        let json = serde_json::to_vec(self).expect("checkpoints always serialize");
        write_atomic(&path, &json)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt: Self = serde_json::from_str(&read_to_string(path)?)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        ckpt.session.state.params.validate()?;
        ckpt.session.env.check_params(&ckpt.session.state.params)?;
        Ok(ckpt)
    }
}

/// Checkpoint files of a run directory ordered by step. Names that do not
/// follow the checkpoint pattern are ignored.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}
