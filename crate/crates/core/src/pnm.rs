//! Binary PPM/PGM persistence for color, mask and depth buffers.
//!
//! Depth is stored as 16-bit big-endian PGM in units of 0.1 mm (0 = no data),
//! which is lossless to 0.1 mm over 0–6.5535 m.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::raster::RgbImage;
use crate::{Error, Result};

pub const DEPTH_UNITS_PER_METER: f64 = 10_000.0;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 3);
    for c in &img.data {
        for ch in c {
            out.push((ch.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(img))
}

pub fn write_mask_pgm(path: impl AsRef<Path>, mask: &[bool], width: usize, height: usize) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    write_file(path.as_ref(), &out)
}

pub fn encode_depth_pgm(depth: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(depth.len() * 2);
    for &d in depth {
        let v = if d > 0.0 {
            (d * DEPTH_UNITS_PER_METER).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn write_depth_pgm(path: impl AsRef<Path>, depth: &[f64], width: usize, height: usize) -> Result<()> {
    write_file(path.as_ref(), &encode_depth_pgm(depth, width, height))
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    maxval: u32,
}

fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::Data(e.to_string()))? == 0 {
            break;
        }
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip).map_err(|e| Error::Data(e.to_string()))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Data("truncated PNM header".into()));
    }
    Ok(tok)
}

fn read_header(r: &mut impl BufRead) -> Result<Header> {
    let magic = read_token(r)?;
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PNM header value {s}")));
    let width = num(read_token(r)?)?;
    let height = num(read_token(r)?)?;
    let maxval = num(read_token(r)?)? as u32;
    Ok(Header {
        magic,
        width,
        height,
        maxval,
    })
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    Ok(BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

pub fn decode_ppm(mut r: impl BufRead) -> Result<RgbImage> {
    let h = read_header(&mut r)?;
    if h.magic != "P6" || h.maxval != 255 {
        return Err(Error::Data(format!("expected 8-bit P6, got {} max {}", h.magic, h.maxval)));
    }
    let mut raw = vec![0u8; h.width * h.height * 3];
    r.read_exact(&mut raw).map_err(|e| Error::Data(format!("truncated PPM: {e}")))?;
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data: raw
            .chunks_exact(3)
            .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
            .collect(),
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(open(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Returns `(depth in meters, width, height)`.
pub fn decode_depth_pgm(mut r: impl BufRead) -> Result<(Vec<f64>, usize, usize)> {
    let h = read_header(&mut r)?;
    if h.magic != "P5" || h.maxval != 65535 {
        return Err(Error::Data(format!("expected 16-bit P5, got {} max {}", h.magic, h.maxval)));
    }
    let mut raw = vec![0u8; h.width * h.height * 2];
    r.read_exact(&mut raw).map_err(|e| Error::Data(format!("truncated PGM: {e}")))?;
    let depth = raw
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / DEPTH_UNITS_PER_METER)
        .collect();
    Ok((depth, h.width, h.height))
}

pub fn read_depth_pgm(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let path = path.as_ref();
    decode_depth_pgm(open(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<(Vec<bool>, usize, usize)> {
    let path = path.as_ref();
    let mut r = open(path)?;
    let h = read_header(&mut r)?;
    if h.magic != "P5" || h.maxval != 255 {
        return Err(Error::Data(format!("{}: expected 8-bit P5", path.display())));
    }
    let mut raw = vec![0u8; h.width * h.height];
    r.read_exact(&mut raw).map_err(|e| Error::Data(format!("truncated PGM: {e}")))?;
    Ok((raw.into_iter().map(|v| v > 127).collect(), h.width, h.height))
}
