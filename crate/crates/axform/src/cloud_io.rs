//! Point-cloud files: the `PCF1` binary layout and whitespace-separated text.
//!
//! Binary (little-endian): magic `PCF1`, u32 point count, u8 label flag,
//! `count * 3` f32 coordinates, then `count` u16 labels when the flag is 1.
//! Text: one `x y z [label]` line per point; `#` starts a comment.

use std::path::Path;

use axform_core::{Point, PointCloud};

use crate::error::{read_file, write_file, AppError, AppResult, FormatError};
use crate::report::fmt17;

pub const PCF_MAGIC: &[u8; 4] = b"PCF1";

fn non_finite(cloud: &PointCloud) -> Option<usize> {
    cloud.points.iter().position(|p| !p.iter().all(|v| v.is_finite()))
}

/// Binary encoding; coordinates are stored as f32.
pub fn encode_pcf(cloud: &PointCloud) -> Result<Vec<u8>, String> {
    if let Some(i) = non_finite(cloud) {
        return Err(format!("point {i} has a non-finite coordinate"));
    }
    let count = u32::try_from(cloud.len()).map_err(|_| "too many points for the binary format".to_string())?;
    let mut out = Vec::with_capacity(9 + cloud.len() * 14);
    out.extend_from_slice(PCF_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.push(u8::from(cloud.labels.is_some()));
    for p in &cloud.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(labels) = &cloud.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize, what: &str) -> Result<&'a [u8], FormatError> {
    bytes.get(at..at + len).ok_or_else(|| {
        FormatError::new(bytes.len() as u64, format!("truncated {what}: needed {len} bytes at offset {at}"))
    })
}

pub fn decode_pcf(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != PCF_MAGIC {
        return Err(FormatError::new(0, format!("bad magic {:?}, expected \"PCF1\"", String::from_utf8_lossy(magic))));
    }
    let count = u32::from_le_bytes(take(bytes, 4, 4, "point count")?.try_into().unwrap()) as usize;
    let flag = take(bytes, 8, 1, "label flag")?[0];
    if flag > 1 {
        return Err(FormatError::new(8, format!("label flag must be 0 or 1, got {flag}")));
    }
    let coords = take(bytes, 9, count * 12, "coordinates")?;
    let mut points = Vec::with_capacity(count);
    for (i, c) in coords.chunks_exact(12).enumerate() {
        let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let p: Point = [f(0), f(1), f(2)];
        if !p.iter().all(|v| v.is_finite()) {
            return Err(FormatError::new((9 + 12 * i) as u64, format!("point {i} has a non-finite coordinate")));
        }
        points.push(p);
    }
    let mut end = 9 + count * 12;
    let labels = if flag == 1 {
        let raw = take(bytes, end, count * 2, "labels")?;
        end += count * 2;
        Some(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    } else {
        None
    };
    if end != bytes.len() {
        return Err(FormatError::new(end as u64, format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(PointCloud { points, labels })
}

/// Text encoding with 17 significant digits per coordinate.
pub fn encode_ascii(cloud: &PointCloud) -> Result<String, String> {
    if let Some(i) = non_finite(cloud) {
        return Err(format!("point {i} has a non-finite coordinate"));
    }
    let mut s = String::new();
    for (i, p) in cloud.points.iter().enumerate() {
        s.push_str(&format!("{} {} {}", fmt17(p[0]), fmt17(p[1]), fmt17(p[2])));
        if let Some(labels) = &cloud.labels {
            s.push_str(&format!(" {}", labels[i]));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn decode_ascii(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let text = std::str::from_utf8(bytes).map_err(|e| FormatError::new(e.valid_up_to() as u64, "invalid UTF-8"))?;
    let mut points = Vec::new();
    let mut labels: Vec<u16> = Vec::new();
    let mut labeled: Option<bool> = None;
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.split('#').next().unwrap_or("");
        let mut fields = Vec::new();
        let mut pos = 0;
        for tok in body.split_ascii_whitespace() {
            let at = pos + body[pos..].find(tok).unwrap();
            pos = at + tok.len();
            fields.push((start + at, tok));
        }
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 && fields.len() != 4 {
            return Err(FormatError::new(start as u64, format!("expected 3 or 4 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (k, (at, tok)) in fields.iter().take(3).enumerate() {
            let v: f64 = tok.parse().map_err(|_| FormatError::new(*at as u64, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(FormatError::new(*at as u64, format!("non-finite coordinate {tok:?}")));
            }
            p[k] = v;
        }
        let has_label = fields.len() == 4;
        if *labeled.get_or_insert(has_label) != has_label {
            return Err(FormatError::new(start as u64, "labels must be given for every point or none"));
        }
        if has_label {
            let (at, tok) = fields[3];
            labels.push(tok.parse().map_err(|_| FormatError::new(at as u64, format!("not a u16 label: {tok:?}")))?);
        }
        points.push(p);
    }
    Ok(PointCloud { points, labels: if labeled == Some(true) { Some(labels) } else { None } })
}

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pcf"))
}

/// Reads either format: `PCF1` data or a `.pcf` path is binary, anything else is text.
pub fn read_cloud(path: &Path) -> AppResult<PointCloud> {
    let bytes = read_file(path)?;
    let parsed = if bytes.starts_with(PCF_MAGIC) || is_binary_path(path) { decode_pcf(&bytes) } else { decode_ascii(&bytes) };
    parsed.map_err(|e| AppError::parse(path, e))
}

/// Writes binary for `.pcf` paths and text otherwise.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> AppResult<()> {
    let bytes = if is_binary_path(path) { encode_pcf(cloud) } else { encode_ascii(cloud).map(String::into_bytes) };
    write_file(path, &bytes.map_err(|msg| AppError::invalid(path, msg))?)
}
