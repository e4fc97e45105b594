//! Output files. Every CSV starts with `#` lines recording the command, seed
//! and resolved config so a file alone is enough to rerun it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub fn header_lines(command: &str, cfg: &RunConfig) -> Result<String, CliError> {
    let json = serde_json::to_string(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(format!(
        "# cfl-replay {command} {}\n# seed: {}\n# config: {json}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.seed()
    ))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Writes `rows` as CSV under a reproducibility header.
pub fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<PathBuf, CliError> {
    let io_err = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut out = create(path)?;
    out.write_all(header.as_bytes()).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err)?;
    Ok(path.to_owned())
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(path.to_owned())
}

/// Reads CSV rows, skipping `#` header lines.
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
