//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Images are stored quantized to 8 bits and dequantized to [0, 1] on read.
//! The decoder is defensive: it is exposed to untrusted bytes through the
//! fuzz harness, so every length and dimension is checked before allocation.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Dimension guard: sides beyond this are rejected as malformed rather than
/// allocated.
const MAX_SIDE: usize = 1 << 15;
const MAX_PIXELS: usize = 1 << 26;

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.expect_magic(b"P5")?;
    let width = cur.read_dim("width")?;
    let height = cur.read_dim("height")?;
    cur.read_maxval()?;
    let n = width * height;
    let payload = cur.take(n, "pixel payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after pixel payload",
            bytes.len() - cur.pos
        )));
    }
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    GrayImage::from_vec(width, height, data)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    decode_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Interleaved RGB rows, one byte per channel.
pub fn encode_ppm(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "rgb buffer holds {} bytes, needs {}x{}x3",
            rgb.len(),
            width,
            height
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_ppm(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    fs::write(path, encode_ppm(rgb, width, height)?)?;
    Ok(())
}

/// (rgb bytes, width, height); used by tests and the overlay round-trip.
pub fn decode_ppm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.expect_magic(b"P6")?;
    let width = cur.read_dim("width")?;
    let height = cur.read_dim("height")?;
    cur.read_maxval()?;
    let payload = cur.take(width * height * 3, "rgb payload")?;
    Ok((payload.to_vec(), width, height))
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes.len() < magic.len() || &self.bytes[..magic.len()] != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.pos = magic.len();
        Ok(())
    }

    /// Skip whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
            if self.pos - start > 8 {
                return Err(Error::Format(format!("{what} out of range")));
            }
        }
        if self.pos == start {
            return Err(Error::Format(format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("{what} out of range")))
    }

    fn read_dim(&mut self, what: &str) -> Result<usize> {
        let v = self.read_number(what)?;
        if v == 0 || v > MAX_SIDE {
            return Err(Error::Format(format!("{what} {v} outside 1..={MAX_SIDE}")));
        }
        Ok(v)
    }

    fn read_maxval(&mut self) -> Result<()> {
        let v = self.read_number("maxval")?;
        if v != 255 {
            return Err(Error::Format(format!("unsupported maxval {v}, need 255")));
        }
        // exactly one whitespace byte separates maxval from the payload
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::Format("missing separator after maxval".into()));
        }
        self.pos += 1;
        Ok(())
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > MAX_PIXELS * 3 {
            return Err(Error::Format(format!("{what} too large")));
        }
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "{what} truncated: have {}, need {n}",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
