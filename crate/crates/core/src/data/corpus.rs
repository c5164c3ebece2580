use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Flat row-major array with explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// One clip of the corpus: poses, audio reference, tokens and speaker.
///
/// Either `dirvecs` (`frames x bones x 3`) or `joints` (`frames x J x 3`)
/// carries the motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirvecs: Option<FlatArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<FlatArray>,
    pub audio: String,
    pub tokens: Vec<u32>,
    pub speaker: usize,
}

const REQUIRED: [&str; 5] = ["clip_id", "fps", "audio", "tokens", "speaker"];

/// Parses JSON Lines text. Blank lines are skipped.
pub fn parse_clips(text: &str) -> Result<Vec<ClipRecord>, DataError> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())))
}

fn parse_lines(lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Vec<ClipRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DataError::MalformedLine { line_no, reason: e.to_string() })?;
        let obj = value.as_object().ok_or_else(|| DataError::MalformedLine { line_no, reason: "not an object".into() })?;
        if let Some(name) = REQUIRED.iter().find(|k| !obj.contains_key(**k)) {
            return Err(DataError::MissingField { line_no, name: name.to_string() });
        }
        if !obj.contains_key("dirvecs") && !obj.contains_key("joints") {
            return Err(DataError::MissingField { line_no, name: "dirvecs".into() });
        }
        let rec: ClipRecord =
            serde_json::from_value(value).map_err(|e| DataError::MalformedLine { line_no, reason: e.to_string() })?;
        for arr in rec.dirvecs.iter().chain(&rec.joints) {
            if arr.shape.iter().product::<usize>() != arr.data.len() {
                return Err(DataError::MalformedLine { line_no, reason: format!("shape {:?} does not match {} values", arr.shape, arr.data.len()) });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_clips(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>, DataError> {
    let f = std::fs::File::open(path)?;
    parse_lines(BufReader::new(f).lines())
}

pub fn save_clips(clips: &[ClipRecord], path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for c in clips {
        serde_json::to_writer(&mut w, c).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
