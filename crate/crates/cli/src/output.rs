use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clrsel_core::Error;
use log::{info, warn};
use sha2::{Digest, Sha256};

const LOCK_NAME: &str = ".clrsel.lock";

/// Exclusive lock on a workdir, released on drop.
pub struct WorkdirLock {
    path: PathBuf,
}

#[derive(Debug)]
pub struct Busy(pub PathBuf);

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Result<Self, Busy>, Error> {
        std::fs::create_dir_all(workdir)
            .map_err(|e| Error::Config(format!("cannot create workdir {}: {e}", workdir.display())))?;
        let path = workdir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Ok(Self { path }))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(Err(Busy(path))),
            Err(e) => Err(Error::Config(format!("cannot lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files a command wants to write. Nothing touches disk until `commit`,
/// and `commit` refuses to replace any existing file whose content differs
/// unless `force` is set. Identical re-runs are no-ops.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) {
        self.files.push((path, bytes.into()));
    }

    pub fn commit(self, force: bool) -> Result<Vec<PathBuf>, Error> {
        for (path, bytes) in &self.files {
            if let Ok(existing) = std::fs::read(path) {
                if existing != *bytes && !force {
                    return Err(Error::Config(format!(
                        "{} exists with different content (sha256 {} vs new {}); \
                         use a different workdir or pass --force",
                        path.display(),
                        &digest(&existing)[..16],
                        &digest(bytes)[..16]
                    )));
                }
            }
        }
        let mut written = Vec::new();
        for (path, bytes) in self.files {
            if std::fs::read(&path).map(|e| e == bytes).unwrap_or(false) {
                info!("{} unchanged", path.display());
                continue;
            }
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
            }
            let tmp = path.with_extension("partial");
            std::fs::write(&tmp, &bytes).map_err(|e| Error::Io { path: tmp.clone(), source: e })?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            if force {
                warn!("wrote {}", path.display());
            } else {
                info!("wrote {}", path.display());
            }
            written.push(path);
        }
        Ok(written)
    }
}
