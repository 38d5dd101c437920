//! Reproducibility manifest: a valid run configuration whose comment lines
//! record the command, overrides, versions and input checksums.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use stst::interop::RunConfig;
use stst::Result;

pub const FILE_NAME: &str = "manifest.cfg";

/// SHA-256 of a file, or of a directory's regular files (sorted by name,
/// each hashed as name, length and contents).
pub fn checksum(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let bytes = fs::read(&f)?;
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            h.update(name.as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub struct Manifest<'a> {
    pub command: &'a str,
    pub overrides: &'a [String],
    pub threads: usize,
    pub config: &'a RunConfig,
    pub inputs: Vec<(&'a Path, String)>,
}

impl Manifest<'_> {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# stst {}\n", env!("CARGO_PKG_VERSION")));
        out.push_str(&format!("# command: {}\n", self.command));
        out.push_str(&format!("# threads: {}\n", self.threads));
        for o in self.overrides {
            out.push_str(&format!("# override: {o}\n"));
        }
        for (p, sum) in &self.inputs {
            out.push_str(&format!("# sha256 {}: {sum}\n", p.display()));
        }
        out.push('\n');
        out.push_str(&self.config.to_text());
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(FILE_NAME), self.to_text())?;
        Ok(())
    }
}
