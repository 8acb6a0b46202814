//! Optional configuration file: `key = value` lines in TOML syntax that
//! mirror the `run` flags. Command-line flags take precedence.

use std::path::Path;

use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub arena_bytes: Option<u64>,
    pub heap_bytes: Option<u64>,
    pub stack_bytes: Option<u64>,
    pub max_call_depth: Option<usize>,
    pub fuel: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("error: cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::usage(format!("error: {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}
