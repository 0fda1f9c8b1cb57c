//! File output: atomic writes and timestamped report logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::ann::{Dataset, MlpModel};
use crate::Result;

/// Write `contents` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_model(path: &Path, m: &MlpModel) -> Result<()> {
    write_atomic(path, &m.to_text())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    MlpModel::from_text(&fs::read_to_string(path)?)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &ds.to_csv())
}

pub fn load_dataset(path: &Path, n_inputs: usize) -> Result<Dataset> {
    Dataset::from_csv(&fs::read_to_string(path)?, n_inputs)
}

/// Append a report block headed by a UNIX timestamp; earlier blocks are
/// never rewritten.
pub fn append_report(path: &Path, title: &str, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "=== {title} @ {ts:.3} ===")?;
    f.write_all(body.as_bytes())?;
    if !body.ends_with('\n') {
        writeln!(f)?;
    }
    Ok(())
}
