//! Output helpers: number formatting, CSV and JSON writers, hashing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LqError, Result};

/// Shortest decimal that round-trips to the same f64.
pub fn num(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x:?}")
    }
}

pub fn csv(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let mut first = true;
        for x in r {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{}", num(*x));
        }
        out.push('\n');
    }
    out
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| LqError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LqError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, content).map_err(|e| LqError::Io(format!("{}: {e}", path.display())))
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LqError::Io(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
