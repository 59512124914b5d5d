//! Binary PPM (P6) and PGM (P5) files with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Raster read from a PNM file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Interleaved samples, `channels` per pixel.
    pub samples: Vec<u8>,
}

fn encode(magic: &str, width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    fs::write(path, encode("P6", width, height, rgb)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    fs::write(path, encode("P5", width, height, gray)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    read(path, "P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    read(path, "P5", 1)
}

fn read(path: &Path, magic: &str, channels: usize) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, magic, channels).map_err(|m| Error::format(path, m))
}

/// Parses a PNM buffer; header fields are whitespace separated and may be
/// interleaved with `#` comments.
pub fn parse(bytes: &[u8], magic: &str, channels: usize) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(format!("expected magic {magic}, found {:?}", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} {s:?} in header"));
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("zero-sized raster".into());
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let need = width * height * channels;
    let samples = bytes.get(pos..).filter(|s| s.len() == need).ok_or_else(|| {
        format!(
            "expected {need} sample bytes, found {}",
            bytes.len().saturating_sub(pos)
        )
    })?;
    Ok(Raster {
        width,
        height,
        samples: samples.to_vec(),
    })
}
