use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const SEED_FILE: &str = "seed.txt";
pub const BUILD_FILE: &str = "build_id.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

pub fn build_id() -> &'static str {
    env!("RESNAS_BUILD_ID")
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::config(format!("{}: {e}", path.display()))
}

/// Output directory of one run. The resolved configuration, seed and
/// build id are written before any work starts.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, config: &impl Serialize, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(write_err(root))?;
        let dir = RunDir { root: root.to_path_buf() };
        let json = serde_json::to_string_pretty(config).map_err(|e| CliError::config(e.to_string()))?;
        dir.write(CONFIG_FILE, json + "\n")?;
        dir.write(SEED_FILE, format!("{seed}\n"))?;
        dir.write(BUILD_FILE, format!("{}\n", build_id()))?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.file(name);
        fs::write(&path, contents).map_err(write_err(&path))
    }

    pub fn append_line(&self, name: &str, header: &str, line: &str) -> Result<(), CliError> {
        let path = self.file(name);
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(write_err(&path))?;
        if fresh {
            writeln!(f, "{header}").map_err(write_err(&path))?;
        }
        writeln!(f, "{line}").map_err(write_err(&path))
    }
}
