//! Staged command outputs.
//!
//! Everything a command produces is rendered in memory first, so a failing
//! command leaves the output directory untouched.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

#[derive(Default)]
pub struct Outputs {
    files: Vec<(&'static str, Vec<u8>)>,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.files.push((name, bytes));
    }

    /// Writes each file next to its destination and renames it into place.
    pub fn commit(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.partial"));
            fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
            fs::rename(&tmp, dir.join(name)).with_context(|| format!("moving {name} into place"))?;
        }
        Ok(())
    }
}
