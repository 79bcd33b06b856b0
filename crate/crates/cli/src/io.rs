use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use rnamf::dataset::MultiFidelityDataset;

use crate::error::CliError;

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(format!("{what} {}: {e}", path.display())))
}

pub fn load_dataset(path: &Path) -> Result<MultiFidelityDataset, CliError> {
    let ds: MultiFidelityDataset = read_json(path, "dataset")?;
    ds.validate().map_err(|e| CliError::validation(format!("dataset {}: {e}", path.display())))?;
    Ok(ds)
}

/// Write `bytes` to `path` through a temporary file in the same directory,
/// so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: std::io::Error| CliError::runtime(format!("cannot write {}: {e}", path.display()));
    fs::create_dir_all(dir).map_err(fail)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Serialize rows with the `csv` writer into memory, then write atomically.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::runtime(format!("csv {}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// SHA-256 of the dataset's JSON form, hex encoded.
pub fn fingerprint(ds: &MultiFidelityDataset) -> String {
    let bytes = serde_json::to_vec(ds).expect("datasets always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Shortest decimal that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
