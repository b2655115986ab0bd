//! Binary PGM (P5, maxval 255) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `pixels` (row-major `height x width`) rounded and clamped to `[0, 255]`.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("expected P5 magic, got {:?}", fields[0])));
    }
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format(path, format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported PGM {w}x{h} maxval {maxval}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h {
        return Err(Error::format(
            path,
            format!("PGM payload has {} bytes, expected {}", data.len(), w * h),
        ));
    }
    let scale = 255.0 / maxval as f32;
    Ok((w, h, data.iter().map(|&b| b as f32 * scale).collect()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}
