use std::path::{Path, PathBuf};
use std::time::Instant;

use promptalign::io::{file_digest, sha256_hex};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Audit record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub config_digest: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_secs: f64,
}

pub struct Recorder {
    command: &'static str,
    argv: Vec<String>,
    started: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digest(path: &Path) -> Result<FileDigest, CliError> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: file_digest(path)?,
    })
}

impl Recorder {
    pub fn start(command: &'static str, argv: Vec<String>) -> Self {
        Self {
            command,
            argv,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(digest(path)?);
        Ok(())
    }

    /// Writes `<out_dir>/<stem>.manifest.json`.
    pub fn finish(
        self,
        out_dir: &Path,
        stem: &str,
        seed: Option<u64>,
        config: serde_json::Value,
    ) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: self.argv,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_digest: sha256_hex(config.to_string().as_bytes()),
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = out_dir.join(format!("{stem}.manifest.json"));
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        crate::commands::write(&path, &text)?;
        Ok(path)
    }
}
