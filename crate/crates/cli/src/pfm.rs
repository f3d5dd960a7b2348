//! Portable float map (grayscale `Pf`) reading and writing.
//!
//! Rows are stored bottom to top as the format prescribes; a negative scale
//! marks little-endian data. Parse failures carry the byte offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use sparsesplat_core::grid::ScalarMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfmError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message} at byte offset {offset}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },
}

fn parse_error(path: &Path, offset: usize, message: impl Into<String>) -> PfmError {
    PfmError::Parse {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

/// Writes a scalar map as a little-endian grayscale PFM (`f32` samples).
pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<(), PfmError> {
    let mut bytes = Vec::with_capacity(32 + map.len() * 4);
    write!(
        &mut bytes,
        "Pf\n{} {}\n-1.0\n",
        map.width(),
        map.height()
    )
    .expect("in-memory write");
    // Bottom row first.
    for y in (0..map.height()).rev() {
        for x in 0..map.width() {
            bytes.extend_from_slice(&(map.at(x, y) as f32).to_le_bytes());
        }
    }
    crate::formats::atomic_write(path, &bytes).map_err(|source| PfmError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a grayscale PFM into a scalar map (values widened to `f64`).
pub fn read_pfm(path: &Path) -> Result<ScalarMap, PfmError> {
    let bytes = fs::read(path).map_err(|source| PfmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut offset = 0usize;

    let token = |bytes: &[u8], offset: &mut usize| -> Result<String, PfmError> {
        while *offset < bytes.len() && bytes[*offset].is_ascii_whitespace() {
            *offset += 1;
        }
        let start = *offset;
        while *offset < bytes.len() && !bytes[*offset].is_ascii_whitespace() {
            *offset += 1;
        }
        if start == *offset {
            return Err(parse_error(path, start, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*offset]).into_owned())
    };

    let magic = token(&bytes, &mut offset)?;
    if magic != "Pf" {
        return Err(parse_error(path, 0, format!("expected 'Pf' magic, found '{magic}'")));
    }
    let width: usize = token(&bytes, &mut offset)?
        .parse()
        .map_err(|_| parse_error(path, offset, "invalid width"))?;
    let height: usize = token(&bytes, &mut offset)?
        .parse()
        .map_err(|_| parse_error(path, offset, "invalid height"))?;
    let scale: f64 = token(&bytes, &mut offset)?
        .parse()
        .map_err(|_| parse_error(path, offset, "invalid scale"))?;
    if width == 0 || height == 0 {
        return Err(parse_error(path, offset, "zero dimension"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if offset >= bytes.len() || !bytes[offset].is_ascii_whitespace() {
        return Err(parse_error(path, offset, "missing header terminator"));
    }
    offset += 1;

    let expected = width * height * 4;
    if bytes.len() - offset < expected {
        return Err(parse_error(
            path,
            bytes.len(),
            format!(
                "truncated samples: need {expected} bytes, found {}",
                bytes.len() - offset
            ),
        ));
    }
    let little_endian = scale < 0.0;
    let mut values = vec![0.0f64; width * height];
    for y_file in 0..height {
        let y = height - 1 - y_file;
        for x in 0..width {
            let raw: [u8; 4] = bytes[offset..offset + 4].try_into().expect("length checked");
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            values[y * width + x] = v as f64;
            offset += 4;
        }
    }
    Ok(ScalarMap::from_values(width, height, values).expect("dimensions validated"))
}
