//! Binary container shared by CPC checkpoints, GMM checkpoints and feature
//! dumps: one line of JSON header, then little-endian f32 values.
//!
//! The header always carries `"format"` and `"version"`; everything else is
//! owned by the writer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub fn write_envelope<'a, H: Serialize>(
    path: &Path,
    header: &H,
    blocks: impl IntoIterator<Item = &'a [f32]>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for block in blocks {
        for v in block {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an envelope, refusing anything whose format tag or version differs.
pub fn read_envelope<H: DeserializeOwned>(
    path: &Path,
    format: &str,
    version: u32,
) -> Result<(H, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    let raw: Value = serde_json::from_slice(&line).map_err(|e| {
        Error::Format(format!("{}: unreadable header: {e}", path.display()))
    })?;
    let found_format = raw.get("format").and_then(Value::as_str).unwrap_or("<missing>");
    let found_version = raw.get("version").and_then(Value::as_u64);
    if found_format != format || found_version != Some(version as u64) {
        return Err(Error::Format(format!(
            "{}: expected format {format:?} version {version}, found {found_format:?} version {}",
            path.display(),
            found_version.map_or("<missing>".to_string(), |v| v.to_string())
        )));
    }
    let header: H = serde_json::from_value(raw)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: payload of {} bytes is not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let payload = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, payload))
}
