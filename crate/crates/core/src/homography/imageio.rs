//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.
//!
//! Samples map to `[0, 1]` as `v / 255`; writing rounds `255 v` after
//! clamping, so any image read from disk writes back byte-identically.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Nearest 8-bit level of `v` in `[0, 1]`.
pub fn quantize(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every sample to its 8-bit level.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as Real / 255.0)
}

pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let hw = h * w;
    for p in 0..hw {
        for ch in 0..c {
            out.push(quantize(image.data()[ch * hw + p]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Header<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                self.pos = start;
                self.err(format!("{what} out of range"))
            })
    }
}

pub fn decode_pnm(buf: &[u8], path: &Path) -> Result<Tensor> {
    let mut hd = Header { buf, pos: 0, path };
    let c = match buf.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(hd.err("expected P5 or P6 magic")),
    };
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        return Err(hd.err(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(hd.err("empty image"));
    }
    match buf.get(hd.pos) {
        Some(b) if b.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(hd.err("expected whitespace after header")),
    }
    let need = c * h * w;
    let body = &buf[hd.pos..];
    if body.len() < need {
        hd.pos = buf.len();
        return Err(hd.err(format!(
            "pixel data truncated: {} of {} bytes",
            body.len(),
            need
        )));
    }
    if body.len() > need {
        hd.pos += need;
        return Err(hd.err("trailing bytes after pixel data"));
    }
    let hw = h * w;
    let mut data = vec![0.0 as Real; need];
    for p in 0..hw {
        for ch in 0..c {
            data[ch * hw + p] = body[p * c + ch] as Real / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data)
}

pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pnm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&buf, path)
}

/// Reads a PNM and expands grayscale to three channels.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let t = read_pnm(path)?;
    let (c, h, w) = t.chw()?;
    if c == 3 {
        return Ok(t);
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[3, h, w], data)
}
