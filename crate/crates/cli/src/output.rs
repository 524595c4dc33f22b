//! Atomic output files named after the config hash and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::CliError;

/// Environment variable that redirects outputs when `--out` is not given.
pub const OUT_DIR_ENV: &str = "STOFLOW_OUT_DIR";

pub struct OutputSet {
    pub dir: PathBuf,
    pub stem: String,
}

impl OutputSet {
    pub fn new(dir: PathBuf, subcommand: &str, hash12: &str, seed: u64) -> Self {
        Self { dir, stem: format!("{subcommand}-{hash12}-seed{seed}") }
    }

    pub fn path(&self, ext: &str) -> PathBuf {
        self.dir.join(format!("{}.{ext}", self.stem))
    }

    /// Writes `csv`, `summary.txt` and `meta.json`; each file is written to a
    /// temporary name and renamed into place.
    pub fn write(&self, csv: &str, summary: &str, meta: &serde_json::Value) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", self.dir.display())))?;
        let meta_text = serde_json::to_string_pretty(meta).expect("metadata serializes") + "\n";
        let mut written = Vec::new();
        for (ext, body) in [("csv", csv), ("summary.txt", summary), ("meta.json", meta_text.as_str())] {
            let path = self.path(ext);
            write_atomic(&path, body.as_bytes()).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
