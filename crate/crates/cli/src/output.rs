//! Error classes with their exit codes, and the output directory.

use std::fs;
use std::path::{Component, Path, PathBuf};

use empower_core::io::atomic_write;
use empower_core::{Error, SCHEMA_VERSION};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Oracle(String),
    #[error("config: {0}")]
    Config(String),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error("{0}")]
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Oracle(_) => 1,
            CliError::Config(_) => 2,
            CliError::Artifact(_) | CliError::Run(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::Artifact(m) => CliError::Artifact(m),
            Error::Io(e) => CliError::Artifact(e.to_string()),
            other => CliError::Run(other),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// The only place a command writes to. Every file goes through an atomic
/// rename and is listed in `manifest.json`.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: PathBuf) -> CliResult<Self> {
        fs::create_dir_all(&root).map_err(|e| CliError::Artifact(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root,
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        debug_assert!(Path::new(name).components().all(|c| matches!(c, Component::Normal(_))));
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult {
        let path = self.path(name);
        atomic_write(&path, bytes.as_ref()).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn remove(&self, name: &str) -> CliResult {
        match fs::remove_file(self.path(name)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(CliError::Artifact(format!("{name}: {e}"))),
        }
    }

    /// Lists the files written so far together with the run description.
    pub fn write_manifest(&mut self, command: &str, seed: u64, extra: Value) -> CliResult {
        let mut files = self.written.clone();
        files.sort();
        let manifest = json!({
            "schema_version": SCHEMA_VERSION,
            "code_version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": seed,
            "files": files,
            "details": extra,
        });
        self.write("manifest.json", to_pretty(&manifest))
    }
}

pub fn to_pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("values serialize") + "\n"
}
