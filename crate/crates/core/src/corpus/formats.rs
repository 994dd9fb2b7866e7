//! Feature, manifest and lexicon file formats.
//!
//! Binary features: the 8-byte magic `WBFEAT01`, little-endian `u32` rows,
//! `u32` cols, then row-major little-endian `f32` values. The text variant is one
//! frame per line with whitespace-separated values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"WBFEAT01";

pub fn read_features(path: &Path) -> Result<Matrix<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 8 && &bytes[..8] == FEATURE_MAGIC {
        decode_binary_features(&bytes).map_err(|message| Error::Corrupt { path: path.to_path_buf(), message })
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Corrupt { path: path.to_path_buf(), message: "not a feature file".into() })?;
        parse_text_features(&text).map_err(|message| Error::Corrupt { path: path.to_path_buf(), message })
    }
}

fn decode_binary_features(bytes: &[u8]) -> std::result::Result<Matrix<f32>, String> {
    if bytes.len() < 16 {
        return Err("truncated header".into());
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes for {rows}x{cols}, found {}", bytes.len()));
    }
    let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

fn parse_text_features(text: &str) -> std::result::Result<Matrix<f32>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f32>().map_err(|e| format!("line {}: {e}", i + 1)))
            .collect::<std::result::Result<Vec<f32>, String>>()?;
        if let Some(first) = rows.first() {
            let first: &Vec<f32> = first;
            if first.len() != row.len() {
                return Err(format!("line {}: expected {} values, found {}", i + 1, first.len(), row.len()));
            }
        }
        rows.push(row);
    }
    Ok(Matrix::from_rows(&rows))
}

pub fn write_features_binary(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + m.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_features_text(path: &Path, m: &Matrix<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub position: usize,
    /// Feature file path, relative to the manifest's directory unless absolute.
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Manifest { row: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Lexicon entries as `(surface, units)` plus an optional declared inventory
/// (a `#inventory u1 u2 ...` header line).
pub struct LexiconFile {
    pub declared_inventory: Option<Vec<String>>,
    pub entries: Vec<(usize, String, Vec<String>)>,
}

pub fn parse_lexicon(text: &str) -> Result<LexiconFile> {
    let mut declared_inventory = None;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim_end();
        if trimmed.trim().is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("#inventory") {
            declared_inventory = Some(rest.split_whitespace().map(str::to_owned).collect());
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let (word, units) = trimmed
            .split_once('\t')
            .ok_or_else(|| Error::Lexicon { line: lineno, message: "expected `word<TAB>units`".into() })?;
        let units: Vec<String> = units.split_whitespace().map(str::to_owned).collect();
        if word.is_empty() {
            return Err(Error::Lexicon { line: lineno, message: "empty word".into() });
        }
        if units.is_empty() {
            return Err(Error::Lexicon { line: lineno, message: format!("word `{word}` has no units") });
        }
        entries.push((lineno, word.to_owned(), units));
    }
    Ok(LexiconFile { declared_inventory, entries })
}
