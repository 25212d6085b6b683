//! Artifacts appear at their final path only once complete: files are written
//! beside the target and renamed, directories are staged and renamed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

fn staging_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    target.with_file_name(format!(".{name}.partial"))
}

fn ensure_parent(target: &Path) -> Result<()> {
    if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create directory {}", parent.display()))?;
    }
    Ok(())
}

pub fn write_file(target: &Path, contents: &[u8]) -> Result<()> {
    ensure_parent(target)?;
    let tmp = staging_path(target);
    fs::write(&tmp, contents).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, target).with_context(|| format!("cannot write {}", target.display()))
}

/// Runs `fill` on an empty staging directory, then replaces `target` with it.
pub fn write_dir(target: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    ensure_parent(target)?;
    let tmp = staging_path(target);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("cannot clear {}", tmp.display()))?;
    }
    let result = fill(&tmp);
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
        return result;
    }
    if target.exists() {
        fs::remove_dir_all(target)
            .with_context(|| format!("cannot replace {}", target.display()))?;
    }
    fs::rename(&tmp, target).with_context(|| format!("cannot write {}", target.display()))
}
