//! Run directory layout and provenance files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Creates the directory a run writes into. Without `force` the name gets a
/// timestamp and an existing directory is never reused; with `force` the
/// plain name is used and a previous run there is replaced.
pub fn create_run_dir(base: &Path, name: &str, force: bool) -> Result<PathBuf> {
    if force {
        let dir = base.join(name);
        if dir.exists() {
            if !dir.join("metadata.json").exists() {
                return Err(CliError::Usage(format!(
                    "{} exists and does not look like a run directory; refusing to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        return Ok(dir);
    }
    fs::create_dir_all(base).map_err(|e| CliError::io(base, e))?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let stem = format!("{name}-{stamp}");
    for k in 0.. {
        let dir = if k == 0 { base.join(&stem) } else { base.join(format!("{stem}-{k}")) };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(&dir, e)),
        }
    }
    unreachable!()
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Commit of the working directory, or `unknown` outside a git checkout.
pub fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
