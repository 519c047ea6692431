//! CSV and JSON files.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so
//! parsing a written file gives back the same `f64` values.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// One contiguous block of a signal file.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentData {
    pub id: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// File line of the first sample, for error messages.
    pub first_line: u64,
}

/// Reads `x,y` (one segment, id `"0"`) or `segment,x,y` CSV. Segments
/// must be contiguous blocks; their order in the file is kept.
pub fn read_segments(path: &Path) -> Result<Vec<SegmentData>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_segments(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_segments(text: &str) -> Result<Vec<SegmentData>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_ascii_lowercase).collect();
    let with_segment = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["x", "y"] => false,
        ["segment", "x", "y"] => true,
        other => bail!("line 1: expected header `x,y` or `segment,x,y`, found `{}`", other.join(",")),
    };
    let mut segments: Vec<SegmentData> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<f64> {
            let raw = record.get(i).ok_or_else(|| anyhow!("line {line}: missing column `{name}`"))?;
            raw.parse::<f64>().map_err(|_| anyhow!("line {line}: cannot parse {name} value `{raw}` as a number"))
        };
        let (id, x, y) = if with_segment {
            let id = record.get(0).unwrap_or_default().to_string();
            if id.is_empty() {
                bail!("line {line}: empty segment id");
            }
            (id, field(1, "x")?, field(2, "y")?)
        } else {
            ("0".to_string(), field(0, "x")?, field(1, "y")?)
        };
        match segments.last_mut() {
            Some(s) if s.id == id => {
                s.x.push(x);
                s.y.push(y);
            }
            _ => {
                if segments.iter().any(|s| s.id == id) {
                    bail!("line {line}: segment `{id}` appears in more than one block");
                }
                segments.push(SegmentData { id, x: vec![x], y: vec![y], first_line: line });
            }
        }
    }
    if segments.is_empty() {
        bail!("no data rows");
    }
    Ok(segments)
}

/// Writes a header and rows of already formatted fields.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`]: header plus string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Segment id made safe for file names.
pub fn file_tag(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
