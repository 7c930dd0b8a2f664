//! One directory per invocation, described by a manifest.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

pub const OUT_ENV: &str = "LUXLOOP_OUT";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: Vec<String>,
    pub created: String,
    pub config: serde_json::Value,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub failed: Vec<String>,
}

pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

/// `--out`, else `$LUXLOOP_OUT`, else `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    }
}

impl RunDir {
    /// Creates `<root>/<run_id>`; an existing directory is never reused.
    pub fn create(
        root: &Path,
        run_id: Option<&str>,
        seed: u64,
        config: &impl Serialize,
    ) -> Result<RunDir> {
        let now = chrono::Utc::now();
        let run_id = match run_id {
            Some(id) => {
                if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                    bail!("--run-id must be a plain directory name");
                }
                id.to_string()
            }
            None => format!("{}-s{seed}", now.format("%Y%m%dT%H%M%S%.3fZ")),
        };
        let dir = root.join(&run_id);
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        fs::create_dir(&dir)
            .with_context(|| format!("creating run directory {}", dir.display()))?;
        Ok(RunDir {
            root: dir,
            manifest: RunManifest {
                run_id,
                command: env::args().collect(),
                created: now.to_rfc3339(),
                config: serde_json::to_value(config)?,
                outputs: Vec::new(),
                failed: Vec::new(),
            },
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.manifest
            .outputs
            .push(rel.to_string_lossy().into_owned());
    }

    pub fn record_failure(&mut self, what: String) {
        self.manifest.failed.push(what);
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.outputs.sort();
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(self.root)
    }
}
