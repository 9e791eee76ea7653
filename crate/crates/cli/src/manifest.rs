use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use teleslice_core::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

/// Everything needed to replay a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub config: Config,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub runtime_s: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &Config, seeds: Vec<u64>, out_dir: &Path, checkpoint: Option<PathBuf>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            argv: std::env::args().collect(),
            config_hash: config.hash(),
            config: config.clone(),
            seeds,
            out_dir: out_dir.to_path_buf(),
            checkpoint,
            status: RunStatus::Running,
            error: None,
            runtime_s: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn write(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(self.out_dir.join(MANIFEST_FILE), json + "\n")
    }

    pub fn finish(&mut self, outcome: Result<(), String>) -> std::io::Result<()> {
        self.runtime_s = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        match outcome {
            Ok(()) => self.status = RunStatus::Ok,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e);
            }
        }
        self.write()
    }
}
