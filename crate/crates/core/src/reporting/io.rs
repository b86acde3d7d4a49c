use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;

/// First free path among `name.ext`, `name.1.ext`, `name.2.ext`, ...
pub fn free_path(path: &Path) -> PathBuf {
    if !path.exists() {
        return path.to_path_buf();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str());
    (1..)
        .map(|i| {
            let name = match ext {
                Some(e) => format!("{stem}.{i}.{e}"),
                None => format!("{stem}.{i}"),
            };
            path.with_file_name(name)
        })
        .find(|p| !p.exists())
        .expect("unbounded suffixes")
}

/// Writes `bytes` through a temporary file and a rename, never replacing an
/// existing file: on conflict a numeric suffix is added. Returns the path
/// written.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let target = free_path(path);
    let name = target.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = target.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    // hard_link fails if the target appeared meanwhile, so nothing is clobbered
    match fs::hard_link(&tmp, &target) {
        Ok(()) => {
            fs::remove_file(&tmp)?;
            Ok(target)
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            fs::remove_file(&tmp)?;
            atomic_write(path, bytes)
        }
        Err(_) => {
            fs::rename(&tmp, &target)?;
            Ok(target)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conflicts_get_suffixes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.csv");
        assert_eq!(atomic_write(&p, b"a").unwrap(), p);
        let second = atomic_write(&p, b"b").unwrap();
        assert_eq!(second, dir.path().join("runs.1.csv"));
        assert_eq!(atomic_write(&p, b"c").unwrap(), dir.path().join("runs.2.csv"));
        assert_eq!(fs::read(&p).unwrap(), b"a");
        assert_eq!(fs::read(second).unwrap(), b"b");
        let bare = dir.path().join("sub/notes");
        atomic_write(&bare, b"x").unwrap();
        assert_eq!(atomic_write(&bare, b"y").unwrap(), dir.path().join("sub/notes.1"));
        let leftovers = fs::read_dir(dir.path()).unwrap().filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp")
        });
        assert_eq!(leftovers.count(), 0);
    }
}
