use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clarify::config::RunConfig;

/// An output directory that records the effective config next to its artifacts.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `path`; a non-empty existing directory needs `force`.
    pub fn create(path: &Path, force: bool) -> anyhow::Result<Self> {
        if path.exists() {
            let non_empty = std::fs::read_dir(path)
                .with_context(|| format!("reading {}", path.display()))?
                .next()
                .is_some();
            if non_empty && !force {
                bail!("{} exists and is not empty; pass --force to overwrite", path.display());
            }
        }
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.file(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    /// `config.txt` with every key, and `run.json` with the seed and command.
    pub fn echo(&self, cfg: &RunConfig, command: &str, extra: serde_json::Value) -> anyhow::Result<()> {
        self.write("config.txt", cfg.render())?;
        let run = serde_json::json!({
            "command": command,
            "seed": cfg.seed()?,
            "config_sha256": cfg.hash(),
            "inputs": extra,
        });
        self.write("run.json", serde_json::to_string_pretty(&run)? + "\n")
    }
}

/// Refuses to replace an existing file unless forced.
pub fn check_target(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}
