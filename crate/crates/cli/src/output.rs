//! Output files are held in memory until a run succeeds, then written next
//! to each other together with `manifest.txt`.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use regleak::sim::GpuConfig;

pub struct Artifacts {
    manifest: String,
    dir: PathBuf,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Artifacts {
    /// The manifest goes into the directory of `primary`.
    pub fn new(command: &str, primary: &Path) -> Self {
        let dir = primary.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = format!("tool = regleak {}\ncommand = {command}\n", env!("CARGO_PKG_VERSION"));
        Artifacts { manifest, dir, files: Vec::new() }
    }

    pub fn echo(&mut self, key: &str, value: impl Display) {
        self.manifest.push_str(&format!("{key} = {value}\n"));
    }

    pub fn config(&mut self, cfg: &GpuConfig) {
        self.manifest.push_str("[gpu]\n");
        self.manifest.push_str(&cfg.to_config_string());
    }

    pub fn add(&mut self, path: &Path, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.to_path_buf(), bytes.into()));
    }

    /// Writes every file to a temporary name first and renames them only
    /// once all writes succeeded.
    pub fn commit(mut self) -> Result<()> {
        let mut outputs = String::from("[outputs]\n");
        for (path, _) in &self.files {
            outputs.push_str(&format!("{}\n", path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())));
        }
        self.manifest.push_str(&outputs);
        let manifest = self.dir.join("manifest.txt");
        self.files.push((manifest, self.manifest.into_bytes()));

        let mut staged = Vec::new();
        for (path, bytes) in &self.files {
            let tmp = temp_name(path);
            if let Err(e) = fs::write(&tmp, bytes) {
                for t in &staged {
                    let _ = fs::remove_file(t);
                }
                return Err(e).with_context(|| format!("writing {}", path.display()));
            }
            staged.push(tmp);
        }
        for (tmp, (path, _)) in staged.iter().zip(&self.files) {
            fs::rename(tmp, path).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

fn temp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}
