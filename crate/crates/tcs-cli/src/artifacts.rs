//! Artifact I/O: failure-atomic writes plus the text and binary formats the
//! subcommands exchange (value lists, mask index lists, final-model dumps).

use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Write via a temporary file in the target directory and rename into
/// place, so a crash or error mid-write never leaves a partial artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = tmp_path(path);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Temporary sibling of `path` (same directory, so the rename is atomic).
pub fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Refuse to clobber existing outputs unless `--force` was given.
pub fn guard_outputs<'a>(
    paths: impl IntoIterator<Item = &'a Path>,
    force: bool,
) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    for path in paths {
        if path.exists() {
            return Err(CliError::config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    Ok(())
}

/// One finite f64 per line. The writer uses shortest-round-trip formatting,
/// so read-back reproduces the values bit for bit.
pub fn read_values_file(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| {
            CliError::config(format!(
                "{} line {}: `{line}` is not a number",
                path.display(),
                lineno + 1
            ))
        })?;
        if !v.is_finite() {
            return Err(CliError::config(format!(
                "{} line {}: values must be finite",
                path.display(),
                lineno + 1
            )));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(CliError::config(format!("{}: no values found", path.display())));
    }
    Ok(values)
}

pub fn format_values(values: &[f64]) -> String {
    let mut out = String::new();
    for v in values {
        out.push_str(&format!("{v}\n"));
    }
    out
}

/// One 0-based index per line, any order, duplicates rejected. Returns the
/// indices sorted ascending.
pub fn read_mask_file(path: &Path, d: usize) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut indices = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let i: usize = line.parse().map_err(|_| {
            CliError::config(format!(
                "{} line {}: `{line}` is not an index",
                path.display(),
                lineno + 1
            ))
        })?;
        if i >= d {
            return Err(CliError::config(format!(
                "{} line {}: index {i} out of range for d={d}",
                path.display(),
                lineno + 1
            )));
        }
        indices.push(i);
    }
    indices.sort_unstable();
    if indices.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::config(format!("{}: duplicate mask index", path.display())));
    }
    Ok(indices)
}

pub const MODEL_MAGIC: &[u8; 4] = b"TCSM";
pub const MODEL_VERSION: u32 = 1;

/// Final-model dump: magic, format version, parameter count, then the
/// parameters as little-endian f64.
pub fn model_bytes(params: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(12 + 8 * params.len());
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for v in params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

#[cfg(test)]
pub fn parse_model_bytes(bytes: &[u8]) -> Result<Vec<f64>, CliError> {
    let fail = |m: &str| CliError::config(format!("model file: {m}"));
    if bytes.len() < 12 || &bytes[0..4] != MODEL_MAGIC {
        return Err(fail("missing TCSM header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 8 * d {
        return Err(fail(&format!("expected {} bytes for d={d}", 12 + 8 * d)));
    }
    Ok(bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
