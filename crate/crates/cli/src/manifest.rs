//! Run manifests: tool version, argv, resolved configuration, input hashes
//! and produced files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub struct Manifest {
    command: &'static str,
    argv: Vec<String>,
    config: Value,
    inputs: Vec<Value>,
    outputs: Vec<String>,
    extra: Map<String, Value>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &'static str, argv: &[String], config: Value) -> Self {
        Manifest {
            command,
            argv: argv.to_vec(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Map::new(),
        }
    }

    /// Records an input file with its content hash.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.inputs.push(json!({ "path": path.display().to_string(), "sha256": sha256 }));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    pub fn to_value(&self) -> Value {
        let mut m = Map::new();
        m.insert("tool".into(), json!("hytas"));
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        m.insert("command".into(), json!(self.command));
        m.insert("argv".into(), json!(self.argv));
        m.insert("config".into(), self.config.clone());
        m.insert("inputs".into(), Value::Array(self.inputs.clone()));
        m.insert("outputs".into(), json!(self.outputs));
        for (k, v) in &self.extra {
            m.insert(k.clone(), v.clone());
        }
        Value::Object(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_value())
    }
}

/// Manifest path next to a single output file: `<file>.manifest.json`.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
