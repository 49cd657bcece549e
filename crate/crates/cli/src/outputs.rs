//! Run-directory bookkeeping: every artifact a command writes is registered
//! here so a failed command can remove exactly what it created, and the
//! manifest can list exactly what survived.

use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use drfc_core::nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliResult;
use drfc_core::run::{EpisodeRecord, RolloutRecord};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Manifest written last into every run directory. Deliberately contains no
/// timestamps or host details so that reruns of the same command and config
/// produce byte-identical directories.
#[derive(Serialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    seeds: Vec<u64>,
    files: Vec<String>,
    version: String,
}

pub struct RunDir {
    root: PathBuf,
    created_root: bool,
    files: RefCell<Vec<String>>,
}

impl RunDir {
    pub fn prepare(root: &Path) -> CliResult<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root)?;
        Ok(RunDir {
            root: root.to_path_buf(),
            created_root,
            files: RefCell::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn register(&self, name: &str) -> PathBuf {
        self.files.borrow_mut().push(name.to_string());
        self.root.join(name)
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.register(name);
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::CliError::Runtime(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_episodes_csv(&self, name: &str, records: &[EpisodeRecord]) -> CliResult<()> {
        let mut buf = Vec::new();
        // Comment line, not a header: return is the negated sum of stage costs.
        writeln!(buf, "# return = -(sum of stage costs)")?;
        let mut w = csv::Writer::from_writer(buf);
        for r in records {
            w.serialize(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::CliError::Runtime(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_rollouts_csv(&self, name: &str, records: &[RolloutRecord]) -> CliResult<()> {
        self.write_csv(name, records)
    }

    pub fn write_trajectories_csv(
        &self,
        name: &str,
        traces: &[Vec<DVector<f64>>],
    ) -> CliResult<()> {
        let dim = traces
            .iter()
            .flat_map(|t| t.first())
            .map(|x| x.len())
            .next()
            .unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rollout".to_string(), "step".to_string()];
        header.extend((0..dim).map(|d| format!("x{d}")));
        w.write_record(&header)?;
        for (r, trace) in traces.iter().enumerate() {
            for (s, x) in trace.iter().enumerate() {
                let mut row = vec![r.to_string(), s.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| crate::CliError::Runtime(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    /// Writes manifest.json and consumes the directory handle; call last.
    pub fn finish(self, command: &str, config_sha256: &str, seeds: &[u64]) -> CliResult<()> {
        let mut files = self.files.borrow().clone();
        files.sort();
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: config_sha256.to_string(),
            seeds: seeds.to_vec(),
            files,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }

    /// Removes whatever this handle created. Used on the error path only.
    pub fn cleanup(self) {
        if self.created_root {
            let _ = fs::remove_dir_all(&self.root);
            return;
        }
        for name in self.files.borrow().iter() {
            let _ = fs::remove_file(self.root.join(name));
        }
    }
}

/// Runs `body` against a fresh handle; on error the partial outputs are
/// removed so a failed command never leaves a half-written run directory.
pub fn with_run_dir<T>(
    root: &Path,
    body: impl FnOnce(&RunDir) -> CliResult<(T, ManifestInfo)>,
) -> CliResult<T> {
    let dir = RunDir::prepare(root)?;
    match body(&dir) {
        Ok((value, info)) => {
            dir.finish(&info.command, &info.config_sha256, &info.seeds)?;
            Ok(value)
        }
        Err(e) => {
            dir.cleanup();
            Err(e)
        }
    }
}

pub struct ManifestInfo {
    pub command: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
}
