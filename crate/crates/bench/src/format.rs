//! Embedding files: the `EMB1` binary layout and a CSV fallback.
//!
//! `EMB1` is the magic, three little-endian `u32`s (dim, sample count, class
//! count), then per sample a `u32` label followed by `dim` `f32` values.
//! CSV files hold one `label,v0,...,v{D-1}` row per sample with an optional
//! header line. Paths ending in `.csv` use CSV, anything else `EMB1`.

use std::fs;
use std::path::Path;

use esfr_core::EmbeddingSet;

use crate::error::{FormatError, HarnessError, Result};

pub const MAGIC: [u8; 4] = *b"EMB1";
const HEADER_LEN: usize = 16;

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_emb1(bytes: &[u8]) -> Result<EmbeddingSet, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            found: bytes[..4].try_into().expect("4-byte slice"),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let dim = read_u32(bytes, 4) as usize;
    let count = read_u32(bytes, 8) as usize;
    let class_count = read_u32(bytes, 12);
    if dim == 0 {
        return Err(FormatError::ZeroDim);
    }
    let record = 4 * (dim + 1);
    let needed = record
        .checked_mul(count)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(FormatError::TrailingBytes {
            extra: bytes.len() - needed,
        });
    }

    let mut data = Vec::with_capacity(dim * count);
    let mut labels = Vec::with_capacity(count);
    for (sample, rec) in bytes[HEADER_LEN..].chunks_exact(record).enumerate() {
        let label = read_u32(rec, 0);
        if label >= class_count {
            return Err(FormatError::LabelOutOfRange {
                sample,
                label,
                class_count,
            });
        }
        labels.push(label);
        for (coordinate, raw) in rec[4..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(raw.try_into().expect("4-byte slice"));
            if !v.is_finite() {
                return Err(FormatError::NonFinite { sample, coordinate });
            }
            data.push(f64::from(v));
        }
    }
    Ok(EmbeddingSet::new(dim, data, Some(labels), class_count as usize)
        .expect("decoded fields already validated"))
}

/// Serialises a labeled set. Values are stored as `f32`.
pub fn encode_emb1(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let labels = set
        .labels()
        .ok_or_else(|| HarnessError::Config("EMB1 files require labels".into()))?;
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| HarnessError::Config(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * 4 * (set.dim() + 1));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&to_u32(set.dim(), "dim")?.to_le_bytes());
    out.extend_from_slice(&to_u32(set.len(), "sample count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(set.class_count(), "class count")?.to_le_bytes());
    for (sample, (row, &label)) in set.rows().zip(labels).enumerate() {
        out.extend_from_slice(&label.to_le_bytes());
        for (coordinate, &v) in row.iter().enumerate() {
            let v = v as f32;
            if !v.is_finite() {
                return Err(HarnessError::Config(format!(
                    "sample {sample} coordinate {coordinate} overflows f32"
                )));
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses CSV rows `label,v0,...`. The class count is one past the largest label.
pub fn parse_csv(text: &str) -> Result<EmbeddingSet, FormatError> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        let label: u32 = match first.parse() {
            Ok(l) => l,
            Err(_) if line_no == 1 => continue,
            Err(_) => {
                return Err(FormatError::Csv {
                    line: line_no,
                    message: format!("bad label {first:?}"),
                })
            }
        };
        let start = data.len();
        for (coordinate, f) in fields.enumerate() {
            let v: f64 = f.parse().map_err(|_| FormatError::Csv {
                line: line_no,
                message: format!("bad value {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    sample: labels.len(),
                    coordinate,
                });
            }
            data.push(v);
        }
        let width = data.len() - start;
        match dim {
            None if width == 0 => return Err(FormatError::ZeroDim),
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(FormatError::Csv {
                    line: line_no,
                    message: format!("expected {d} values, found {width}"),
                })
            }
            Some(_) => {}
        }
        labels.push(label);
    }
    let dim = dim.ok_or(FormatError::Csv {
        line: 0,
        message: "no samples".into(),
    })?;
    let class_count = labels.iter().max().map_or(0, |&m| m as usize + 1);
    Ok(EmbeddingSet::new(dim, data, Some(labels), class_count).expect("parsed fields already validated"))
}

pub fn encode_csv(set: &EmbeddingSet) -> Result<String> {
    use std::fmt::Write;
    let labels = set
        .labels()
        .ok_or_else(|| HarnessError::Config("CSV export requires labels".into()))?;
    let mut out = String::new();
    for (row, label) in set.rows().zip(labels) {
        write!(out, "{label}").expect("write to String");
        for v in row {
            write!(out, ",{v}").expect("write to String");
        }
        out.push('\n');
    }
    Ok(out)
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let parsed = if is_csv(path) {
        let text = String::from_utf8(bytes).map_err(|e| FormatError::Csv {
            line: 0,
            message: e.to_string(),
        });
        text.and_then(|t| parse_csv(&t))
    } else {
        decode_emb1(&bytes)
    };
    parsed.map_err(|source| HarnessError::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_csv(path) {
        encode_csv(set)?.into_bytes()
    } else {
        encode_emb1(set)?
    };
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}
