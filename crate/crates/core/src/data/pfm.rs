//! Grayscale PFM (`Pf`): text header `Pf\n<w> <h>\n<scale>\n` then 32-bit
//! floats, rows stored bottom-up. A negative scale means little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a single-channel map as `(1, 1, H, W)`, rows top-down.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode(&fs::read(path)?, path)
}

/// Writes a `(1, 1, H, W)` map little-endian.
pub fn write_pfm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(map)?)?;
    Ok(())
}

pub fn encode(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.batch != 1 || s.channels != 1 {
        return Err(Error::shape("write_pfm", format!("expected (1,1,H,W), got {s}")));
    }
    let mut out = format!("Pf\n{} {}\n-1\n", s.width, s.height).into_bytes();
    out.reserve(s.numel() * 4);
    for row in map.data().chunks(s.width).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits off one whitespace-terminated header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || *pos >= bytes.len() {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |detail: String| Error::format(path, detail);
    let mut pos = 0;
    match token(bytes, &mut pos) {
        Some("Pf") => {}
        Some("PF") => return Err(bad("color PFM (PF) is not supported".into())),
        other => return Err(bad(format!("expected Pf magic, found {other:?}"))),
    }
    let mut dim = |what: &str| -> Result<usize> {
        token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| bad(format!("bad {what} in header")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let scale: f64 = token(bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| bad("bad scale in header".into()))?;
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() < need {
        return Err(bad(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; w * h];
    for (i, c) in payload[..need].chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, x) = (i / w, i % w);
        data[(h - 1 - file_row) * w + x] = v;
    }
    Tensor::from_vec([1, 1, h, w], data)
}
