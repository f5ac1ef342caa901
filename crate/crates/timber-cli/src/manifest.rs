//! Run manifests: enough to reproduce any successful command.

use crate::CliError;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved parameters; re-running with these reproduces the
    /// outputs (timestamps and timing columns aside).
    pub config: serde_json::Value,
    pub input_paths: Vec<String>,
    pub output_path: Option<String>,
    pub tool_version: String,
    pub started: String,
    pub finished: String,
}

pub fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        input_paths: Vec<String>,
        output_path: Option<String>,
        started: String,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            input_paths,
            output_path,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started,
            finished: timestamp(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrips_losslessly() {
        let m = RunManifest::new(
            "refine",
            serde_json::json!({"strategy": "timber", "lambda": 0.2}),
            vec!["base".into(), "instruct".into()],
            Some("out".into()),
            timestamp(),
        );
        let text = serde_json::to_string(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "refine");
        assert_eq!(back.config["lambda"], 0.2);
        assert_eq!(back.input_paths.len(), 2);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
