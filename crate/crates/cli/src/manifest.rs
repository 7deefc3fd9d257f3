use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use foresee::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    /// RFC 3339; taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: String,
    /// Run-specific facts worth keeping next to the outputs.
    pub notes: serde_json::Map<String, serde_json::Value>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(subcommand: &str, parameters: serde_json::Value, seed: u64, threads: usize) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            parameters,
            seed,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timestamp: timestamp(),
            notes: serde_json::Map::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.notes.insert(key.to_string(), v);
    }

    pub fn write(&mut self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

fn timestamp() -> String {
    let when = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now);
    when.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
