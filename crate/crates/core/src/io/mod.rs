//! On-disk formats and dataset sources.

pub mod checkpoint;
pub mod manifest;
pub mod scores_csv;
pub mod synthetic;
pub mod tensor_file;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Result, StanError};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| StanError::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| StanError::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        StanError::io(path, e)
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| StanError::io(path, e))
}
