//! Run directories: layout, locking, staged artifacts.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use wsl_core::io::write_atomic;

/// Errors that are about the run directory rather than the computation.
#[derive(Debug)]
pub enum RunError {
    MissingArtifact { what: &'static str, path: PathBuf, producer: &'static str },
    Locked(PathBuf),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingArtifact { what, path, producer } => {
                write!(f, "missing {what} at {}; run `wsl {producer}` with the same --out first", path.display())
            }
            Self::Locked(p) => write!(f, "run directory is locked by another process ({} exists)", p.display()),
        }
    }
}

impl std::error::Error for RunError {}

pub struct RunDir {
    root: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `root` if needed and holds its lock until dropped.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        let lock = root.join(".wsl.lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(RunError::Locked(lock).into()),
            Err(e) => return Err(e).with_context(|| format!("locking {}", root.display())),
        }
        Ok(Self { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path("data")
    }

    pub fn shifted_dir(&self) -> PathBuf {
        self.path("data_shifted")
    }

    pub fn zoo_dir(&self) -> PathBuf {
        self.path("zoo")
    }

    pub fn ae_dir(&self) -> PathBuf {
        self.path("ae")
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

pub fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(RunError::MissingArtifact { what, path: path.to_path_buf(), producer }.into())
    }
}

const STAGE: &str = "stage.json";

/// Whether `dir` was produced from exactly `key`.
pub fn is_fresh(dir: &Path, key: &Value) -> bool {
    fs::read(dir.join(STAGE)).ok().and_then(|b| serde_json::from_slice::<Value>(&b).ok()).is_some_and(|v| &v == key)
}

pub fn stage_key(dir: &Path) -> Result<Value> {
    let bytes = fs::read(dir.join(STAGE)).with_context(|| format!("reading {}", dir.join(STAGE).display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn seal(dir: &Path, key: &Value) -> Result<()> {
    write_json(&dir.join(STAGE), key)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}
