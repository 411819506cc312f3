//! Per-run provenance records.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub jobs: usize,
    pub version: String,
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Provenance {
    /// Writes `<dir>/provenance/<command>.json`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let dir = dir.join("provenance");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join(format!("{}.json", self.command));
        let text = serde_json::to_string_pretty(self).map_err(cfrc_core::Error::from)?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_of_empty_text() {
        assert_eq!(
            sha256_hex(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
