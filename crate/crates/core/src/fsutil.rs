//! Atomic file output.

use std::io::Write;
use std::path::Path;

use crate::error::{NomError, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| NomError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| NomError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| NomError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| NomError::io(path, e))?;
    tmp.persist(path).map_err(|e| NomError::io(path, e.error))?;
    Ok(())
}
