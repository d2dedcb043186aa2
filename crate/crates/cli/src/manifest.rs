//! Output directory handling: every artifact goes through one writer
//! that confines paths to --out, hashes the bytes, and ends the run by
//! writing a manifest from which it can be reproduced.

use std::path::{Component, Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub struct OutDir {
    root: PathBuf,
    artifacts: Vec<(String, String, usize)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(OutDir { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    /// Writes one artifact under the output root. Relative paths only —
    /// anything that could escape the root is refused.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let rel_path = Path::new(rel);
        let confined = rel_path
            .components()
            .all(|c| matches!(c, Component::Normal(_)));
        if !confined {
            return Err(CliError::Usage(format!(
                "artifact path {rel:?} would escape the output directory"
            )));
        }
        let full = self.root.join(rel_path);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&full, bytes).map_err(|e| io_err(&full, e))?;
        self.artifacts.push((rel.to_string(), hex(&Sha256::digest(bytes)), bytes.len()));
        Ok(())
    }

    /// Writes `manifest.json` recording the command, the fully resolved
    /// configuration, any command-specific fields, and a checksum per
    /// artifact. Content is deterministic: sorted keys, no timestamps.
    pub fn finish(
        mut self,
        command: &str,
        config: Map<String, Value>,
        extra: Map<String, Value>,
    ) -> Result<()> {
        self.artifacts.sort();
        let artifacts: Vec<Value> = self
            .artifacts
            .iter()
            .map(|(path, sha256, bytes)| json!({ "path": path, "sha256": sha256, "bytes": bytes }))
            .collect();
        let mut doc = Map::new();
        doc.insert("command".into(), Value::from(command));
        doc.insert("config".into(), Value::Object(config));
        for (k, v) in extra {
            doc.insert(k, v);
        }
        doc.insert("artifacts".into(), Value::from(artifacts));
        let path = self.root.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&Value::Object(doc))
            .expect("manifest serialization cannot fail");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}
