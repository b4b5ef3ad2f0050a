use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

/// Overrides the directory runs are written under.
pub const OUTPUT_DIR_ENV: &str = "FIBERWALK_OUT";

pub const RUN_FORMAT: &str = "fiberwalk-run";

/// `$FIBERWALK_OUT` if set and non-empty, else `default`.
pub fn output_root(default: impl AsRef<Path>) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => default.as_ref().to_path_buf(),
    }
}

/// SHA-256 of the compact JSON form of `config`. `serde_json` keeps object
/// keys sorted, so equal configs hash equally.
pub fn config_hash(config: &serde_json::Value) -> String {
    fsio::sha256_hex(config.to_string().as_bytes())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Everything needed to rerun a command and check what it used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub model_checksum: Option<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub outputs: Vec<String>,
    /// `ok`, or the error tag of the failure.
    pub status: String,
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            format: RUN_FORMAT.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args,
            config_hash: config_hash(&config),
            config,
            seed,
            model_checksum: None,
            started_unix: unix_now(),
            finished_unix: None,
            outputs: Vec::new(),
            status: "running".to_string(),
        }
    }

    pub fn add_output(&mut self, path: impl AsRef<Path>) {
        self.outputs.push(path.as_ref().display().to_string());
    }

    pub fn finish(&mut self, result: &Result<()>) {
        self.finished_unix = Some(unix_now());
        self.status = match result {
            Ok(()) => "ok".to_string(),
            Err(e) => e.tag().to_string(),
        };
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fsio::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&fsio::read_to_string(path)?)?;
        if m.format != RUN_FORMAT {
            return Err(Error::format("run manifest", format!("format {:?}", m.format)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = serde_json::json!({"a": 1, "b": [1, 2]});
        let b: serde_json::Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&serde_json::json!({"a": 2})));
    }

    #[test]
    fn write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::start("explore", vec!["--iters".into(), "3".into()], serde_json::json!({"k": 3}), Some(7));
        m.add_output(dir.path().join("x"));
        m.finish(&Ok(()));
        let p = dir.path().join("run.json");
        m.write(&p).unwrap();
        assert_eq!(RunManifest::read(&p).unwrap(), m);
        assert_eq!(m.status, "ok");
    }
}
