use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::Command;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// What a command did and everything needed to do it again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The parsed invocation; replay feeds it back through the same code.
    pub args: Command,
    /// Resolved configuration, defaults filled in.
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    /// Output files, relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub git_describe: String,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn git_describe() -> &'static str {
    env!("RVLAB_GIT_DESCRIBE")
}
