//! Binary PGM (P5) reading and writing.
//!
//! Samples wider than 8 bits are big-endian as required by the Netpbm
//! format. Decoded intensities are divided by the header's maxval, so a
//! 16-bit file with maxval 65535 lands in `[0, 1]` with 65535 mapping to 1.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::plane::Plane;

/// Decoded PGM contents.
#[derive(Debug, Clone)]
pub struct Pgm {
    pub pixels: Plane,
    pub maxval: u16,
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_pgm(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    if magic != b"P5" {
        return Err(format!(
            "unsupported magic {:?}, expected P5",
            String::from_utf8_lossy(magic)
        ));
    }
    let width = parse_num(next_token(bytes, &mut pos), "width")?;
    let height = parse_num(next_token(bytes, &mut pos), "height")?;
    let maxval = parse_num(next_token(bytes, &mut pos), "maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bps;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let scale = 1.0 / maxval as f64;
    let data: Vec<f64> = if bps == 1 {
        raster.iter().map(|&b| (b as f64 * scale).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 * scale).min(1.0))
            .collect()
    };
    Ok(Pgm {
        pixels: Plane::new(width, height, data).map_err(|e| e.to_string())?,
        maxval: maxval as u16,
    })
}

/// Encodes a plane as 16-bit P5 with maxval 65535; values are clamped to `[0, 1]`.
pub fn encode_pgm16(plane: &Plane) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", plane.width(), plane.height()).into_bytes();
    out.reserve(plane.data().len() * 2);
    for &v in plane.data() {
        out.extend_from_slice(&quantize16(v).to_be_bytes());
    }
    out
}

pub fn write_pgm16(path: impl AsRef<Path>, plane: &Plane) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm16(plane))?;
    Ok(())
}

#[inline]
pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn parse_num(tok: Option<&[u8]>, what: &str) -> std::result::Result<usize, String> {
    let tok = tok.ok_or_else(|| format!("missing {what}"))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("bad {what}: {:?}", String::from_utf8_lossy(tok)))
}
