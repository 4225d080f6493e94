//! CSV and JSON emission. Every CSV starts with `#` lines giving the
//! command, the SHA-256 of the canonical config JSON, the seed and the
//! config itself, so a file can be reproduced from its own header.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::error::CliError;

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:?}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn config_hash(json: &str) -> String {
    Sha256::digest(json.as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(resolved: &Resolved, columns: &[String]) -> Self {
        let json = resolved.config_json();
        let mut buf = String::new();
        let _ = writeln!(buf, "# delaylab {}", resolved.command.name());
        let _ = writeln!(buf, "# config_sha256: {}", config_hash(&json));
        let _ = writeln!(buf, "# seed: {}", resolved.seed);
        let _ = writeln!(buf, "# config: {json}");
        buf.push_str(&columns.join(","));
        buf.push('\n');
        Csv { buf }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_file(path, self.buf.as_bytes())
    }
}

/// Pretty JSON with the provenance fields merged in.
pub fn write_summary(path: &Path, resolved: &Resolved, mut body: serde_json::Value) -> Result<(), CliError> {
    let json = resolved.config_json();
    if let Some(map) = body.as_object_mut() {
        map.insert("command".into(), resolved.command.name().into());
        map.insert("config_sha256".into(), config_hash(&json).into());
        map.insert("seed".into(), resolved.seed.into());
        map.insert(
            "config".into(),
            serde_json::to_value(&resolved.config).expect("config serializes"),
        );
    }
    let mut text = serde_json::to_string_pretty(&body).expect("summary serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn out_path(resolved: &Resolved, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&resolved.out).map_err(|e| CliError::Io(format!("{}: {e}", resolved.out.display())))?;
    Ok(resolved.out.join(name))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
