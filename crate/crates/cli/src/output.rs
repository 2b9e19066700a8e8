//! Artifacts are buffered during a run and written once, together with a
//! manifest naming each file's SHA-256, the config hash and the seed.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::svg::{line_chart, Series};
use crate::CliError;

pub struct Artifacts<'a> {
    command: &'static str,
    run: &'a Resolved,
    svg: bool,
    files: Vec<(String, Vec<u8>)>,
    summary: Value,
}

impl<'a> Artifacts<'a> {
    pub fn new(command: &'static str, run: &'a Resolved, svg: bool) -> Self {
        Self {
            command,
            run,
            svg,
            files: Vec::new(),
            summary: Value::Null,
        }
    }

    pub fn text(&mut self, name: &str, body: impl Into<String>) {
        self.files.push((name.to_string(), body.into().into_bytes()));
    }

    /// JSON artifact carrying the config hash and seed next to `data`.
    pub fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<(), CliError> {
        let v = json!({
            "config_hash": self.run.hash,
            "seed": self.run.seed,
            "data": data,
        });
        let body = serde_json::to_string_pretty(&v).map_err(|e| CliError::Config(e.to_string()))?;
        self.text(name, body + "\n");
        Ok(())
    }

    pub fn chart(&mut self, name: &str, title: &str, x: &str, y: &str, series: &[Series], log_y: bool) {
        if self.svg {
            self.text(name, line_chart(title, x, y, series, log_y));
        }
    }

    /// Short machine-readable result stored in the manifest.
    pub fn summary(&mut self, v: Value) {
        self.summary = v;
    }

    pub fn write(self) -> Result<(), CliError> {
        write_all(&self.run.out, self.command, self.run, &self.files, &self.summary)
    }
}

fn write_all(dir: &Path, command: &str, run: &Resolved, files: &[(String, Vec<u8>)], summary: &Value) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Config(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut listed = Vec::new();
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes).map_err(io)?;
        listed.push(json!({"name": name, "sha256": format!("{:x}", Sha256::digest(bytes))}));
    }
    let manifest = json!({
        "command": command,
        "config_hash": run.hash,
        "seed": run.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": run.config,
        "files": listed,
        "summary": summary,
    });
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), body + "\n").map_err(io)
}
