//! On-disk formats.
//!
//! Every file starts with a schema line:
//!
//! * JSON: the first line is `{"schema":"<name>","version":<v>,` and the
//!   payload follows under `"data"`, so the whole file is still one JSON
//!   object.
//! * CSV: the first line is `# schema=<name> version=<v>`, then a header row.
//! * Grid binaries: `LANDPROBE-GRIDS version=1 rows=<n> cols=<f>\n`
//!   followed by `n * f` little-endian IEEE-754 doubles, row-major.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;
const GRID_MAGIC: &str = "LANDPROBE-GRIDS";

#[derive(Deserialize)]
struct Envelope<T> {
    schema: String,
    version: u32,
    data: T,
}

/// Serializes `value` as a schema-tagged JSON document.
pub fn json_string<T: Serialize>(schema: &str, value: &T) -> Result<String> {
    let body = serde_json::to_string_pretty(value)?;
    Ok(format!(
        "{{\"schema\":{},\"version\":{FORMAT_VERSION},\n\"data\":{body}\n}}\n",
        serde_json::to_string(schema)?
    ))
}

pub fn write_json<T: Serialize>(path: &Path, schema: &str, value: &T) -> Result<()> {
    write_file(path, json_string(schema, value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let env: Envelope<T> = serde_json::from_str(&text)?;
    if env.schema != schema {
        return Err(Error::Format {
            what: "json schema",
            reason: format!("expected `{schema}`, found `{}`", env.schema),
        });
    }
    if env.version != FORMAT_VERSION {
        return Err(Error::Format {
            what: "json schema",
            reason: format!("unsupported version {}", env.version),
        });
    }
    Ok(env.data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Builds CSV text: schema line, header row, then rows. Fields are written
/// verbatim, so callers must not pass commas or quotes inside fields.
pub fn csv_string(schema: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("# schema={schema} version={FORMAT_VERSION}\n");
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, schema: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_file(path, csv_string(schema, header, rows).as_bytes())
}

/// Reads a schema-tagged CSV into its header and rows.
pub fn read_csv(path: &Path, schema: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let expected = format!("# schema={schema} version={FORMAT_VERSION}");
    match lines.next() {
        Some(l) if l == expected => {}
        other => {
            return Err(Error::Format {
                what: "csv schema line",
                reason: format!("expected `{expected}`, found `{}`", other.unwrap_or("")),
            })
        }
    }
    let header = lines
        .next()
        .ok_or(Error::Format {
            what: "csv",
            reason: "missing header row".into(),
        })?
        .split(',')
        .map(str::to_owned)
        .collect();
    let rows = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    Ok((header, rows))
}

/// Encodes a float so it round-trips exactly through text.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_grids(path: &Path, grids: &Matrix) -> Result<()> {
    let mut bytes = format!(
        "{GRID_MAGIC} version={FORMAT_VERSION} rows={} cols={}\n",
        grids.rows(),
        grids.cols()
    )
    .into_bytes();
    bytes.reserve(grids.data().len() * 8);
    for v in grids.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_grids(path: &Path) -> Result<Matrix> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let bad = |reason: String| Error::Format {
        what: "grid file",
        reason,
    };
    let fields: Vec<&str> = header.trim_end().split(' ').collect();
    if fields.len() != 4 || fields[0] != GRID_MAGIC {
        return Err(bad(format!("bad header `{}`", header.trim_end())));
    }
    let field = |idx: usize, key: &str| -> Result<usize> {
        fields[idx]
            .strip_prefix(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad `{key}` field")))
    };
    if field(1, "version=")? != FORMAT_VERSION as usize {
        return Err(bad("unsupported version".into()));
    }
    let (rows, cols) = (field(2, "rows=")?, field(3, "cols=")?);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() != rows * cols * 8 {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            rows * cols * 8,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::new(rows, cols, data)
}

/// Writes raw text (used for reports that carry their own header line).
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(path)?
    };
    f.write_all(text.as_bytes())?;
    Ok(())
}
