//! Output directories that appear complete or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::error::{Error, Result};

/// Files are written into a hidden sibling directory that is renamed onto
/// the target on commit. Dropping without commit removes it.
pub struct OutputDir {
    tmp: TempDir,
    target: PathBuf,
}

impl OutputDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() && fs::read_dir(target).map_err(|e| Error::io(target, e))?.next().is_some() {
            return Err(Error::validation(format!(
                "{}: output directory exists and is not empty",
                target.display()
            )));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let tmp = tempfile::Builder::new()
            .prefix(".evbidifac-")
            .tempdir_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        Ok(OutputDir {
            tmp,
            target: target.to_path_buf(),
        })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.tmp.path().join(name);
        fs::write(&p, contents).map_err(|e| Error::io(p, e))
    }

    pub fn commit(self) -> Result<()> {
        if self.target.exists() {
            fs::remove_dir(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        let staged = self.tmp.keep();
        fs::rename(&staged, &self.target).map_err(|e| Error::io(&self.target, e))
    }
}
