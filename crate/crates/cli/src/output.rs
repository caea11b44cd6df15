use std::fs;
use std::path::{Path, PathBuf};

use dtm_core::{Error, Result};

use crate::config::RunConfig;

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set
/// (in which case its previous contents are removed).
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    create_dir(dir)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

pub const SNAPSHOT: &str = "run_config.toml";

pub fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let path = dir.join(SNAPSHOT);
    write(&path, cfg.to_toml())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_non_empty_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        write(&tmp.path().join("x"), "1").unwrap();
        assert!(matches!(prepare_dir(tmp.path(), false), Err(Error::Config(_))));
        prepare_dir(tmp.path(), true).unwrap();
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn empty_or_missing_dir_is_fine() {
        let tmp = tempfile::tempdir().unwrap();
        prepare_dir(tmp.path(), false).unwrap();
        prepare_dir(&tmp.path().join("a/b"), false).unwrap();
        assert!(tmp.path().join("a/b").is_dir());
    }
}
