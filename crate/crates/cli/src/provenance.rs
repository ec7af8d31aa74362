//! `run.json`: one provenance entry per subcommand run under a directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub config: RunConfig,
    pub config_sha256: String,
    pub master_seed: u64,
    /// Derived seeds by phase tag.
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
}

/// Adds or replaces the entry of `command` in `dir/run.json`.
pub fn record(dir: &Path, command: &str, config: &RunConfig, seeds: BTreeMap<String, u64>) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("run.json");
    let mut entries: BTreeMap<String, Entry> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    entries.insert(
        command.to_string(),
        Entry {
            config: config.clone(),
            config_sha256: config.hash(),
            master_seed: config.seed,
            seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    );
    let text = voxmim::json::to_sorted_string(&entries).expect("provenance serialises");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}
