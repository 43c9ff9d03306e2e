//! JSON Lines plumbing shared by every on-disk format.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Formats with 17 significant digits, which always round-trips an `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn format_f64_array(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 24 + 2);
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_f64(*v));
    }
    out.push(']');
    out
}

pub(crate) fn serialize_f64_vec<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let raw = RawValue::from_string(format_f64_array(values)).map_err(serde::ser::Error::custom)?;
    raw.serialize(s)
}

pub(crate) fn serialize_opt_f64_vec<S: Serializer>(values: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
    match values {
        Some(v) => serialize_f64_vec(v, s),
        None => s.serialize_none(),
    }
}

/// Non-blank lines of a file with their 1-based line numbers.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

pub(crate) fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    })
}

pub(crate) fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("in-memory JSON serialization cannot fail")
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
