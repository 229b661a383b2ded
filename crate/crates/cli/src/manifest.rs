//! Run manifests: what a `train` run consumed and produced.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use lexpert_core::trainer::TrainConfig;
use lexpert_core::Result;
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub corpus: PathBuf,
    pub corpus_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started: String,
    pub finished: Option<String>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn code_version() -> String {
    format!("lexpert {}", env!("CARGO_PKG_VERSION"))
}

pub fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json)?;
        Ok(path)
    }

    /// The manifest of the run directory holding `ckpt`, if there is one.
    pub fn beside(ckpt: &Path) -> Option<PathBuf> {
        let path = ckpt.parent()?.join(RUN_MANIFEST);
        path.exists().then_some(path)
    }
}
