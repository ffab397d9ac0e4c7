//! Line-delimited JSON records behind a versioned header line.
//!
//! Reals are written in scientific notation with 17 significant digits, so
//! every `f64` survives a round trip bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter};

use super::Scene;
use crate::{Error, Result};

pub const FORMAT_TAG: &str = "caad-scene";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Compact JSON with fixed-precision scientific floats.
struct ExactFloats;

impl Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        CompactFormatter.write_f32(writer, value)
    }
}

/// Serialises one value as a single JSON line (without the newline).
pub fn to_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::validation(format!("serialise: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Writes a header line tagged `format` followed by one record per line.
pub fn write_records<T: Serialize, W: Write>(mut w: W, format: &str, records: &[T]) -> Result<()> {
    let header = Header {
        format: format.to_string(),
        version: FORMAT_VERSION,
    };
    writeln!(w, "{}", to_line(&header)?)?;
    for r in records {
        writeln!(w, "{}", to_line(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records written by [`write_records`]; line numbers in errors are 1-based.
pub fn read_records<T: DeserializeOwned, R: Read>(r: R, format: &str) -> Result<Vec<T>> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header record".into(),
    })??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected {format} v{FORMAT_VERSION}, found {} v{}",
                header.format, header.version
            ),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_scenes<W: Write>(w: W, scenes: &[Scene]) -> Result<()> {
    write_records(w, FORMAT_TAG, scenes)
}

/// Reads scenes and checks their structural invariants.
pub fn read_scenes<R: Read>(r: R) -> Result<Vec<Scene>> {
    let scenes: Vec<Scene> = read_records(r, FORMAT_TAG)?;
    for (i, s) in scenes.iter().enumerate() {
        s.validate().map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
    }
    Ok(scenes)
}

pub fn save_scenes(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    write_scenes(BufWriter::new(File::create(path)?), scenes)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    read_scenes(File::open(path)?)
}
