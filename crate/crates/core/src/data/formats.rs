//! Portable float map (PFM) and binary netpbm (P6 colour, P5 grey) codecs.

use std::path::Path;

use crate::error::{Error, ParseKind, Result};
use crate::tensor::Tensor;

/// Splits a netpbm-style header into `count` whitespace-separated tokens
/// (skipping `#` comments) and returns them with the payload offset. Exactly
/// one whitespace byte separates the last token from the payload.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, format: &'static str) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(format, ParseKind::Header(format!("expected {count} header fields"))));
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| Error::parse(format, ParseKind::Header("non-ASCII header".into())))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(Error::parse(format, ParseKind::Header("missing separator before payload".into())));
    }
    Ok((tokens, i + 1))
}

fn dim(tok: &str, format: &'static str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::parse(format, ParseKind::Header(format!("bad extent {tok:?}")))),
    }
}

fn payload<'a>(bytes: &'a [u8], start: usize, expected: usize, format: &'static str) -> Result<&'a [u8]> {
    let found = bytes.len() - start;
    if found < expected {
        return Err(Error::parse(format, ParseKind::Truncated { expected, found }));
    }
    Ok(&bytes[start..start + expected])
}

/// Encodes a `[H, W]` map as little-endian grayscale PFM.
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = match map.shape() {
        &[h, w] => [h, w],
        s => return Err(Error::invalid(format!("PFM maps are [H, W], got {s:?}"))),
    };
    if !map.is_finite() {
        return Err(Error::NonFinite("PFM payload"));
    }
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for &v in &map.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a grayscale PFM. Non-finite payload values are kept as they are.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    const F: &str = "pfm";
    if bytes.len() < 2 || &bytes[..2] != b"Pf" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::parse(F, ParseKind::BadMagic(magic)));
    }
    let (tok, start) = header_tokens(bytes, 4, F)?;
    if tok[0] != "Pf" {
        return Err(Error::parse(F, ParseKind::BadMagic(tok[0].to_string())));
    }
    let (w, h) = (dim(tok[1], F)?, dim(tok[2], F)?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::parse(F, ParseKind::Header(format!("bad scale {:?}", tok[3]))))?;
    if scale == 0.0 {
        return Err(Error::parse(F, ParseKind::ZeroScale));
    }
    let raw = payload(bytes, start, 4 * h * w, F)?;
    let mut data = vec![0.0; h * w];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        // Rows are stored bottom-to-top.
        let (row, col) = (h - 1 - i / w, i % w);
        data[row * w + col] = v as f64;
    }
    Tensor::new(&[h, w], data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[3, H, W]` image in `[0, 1]` as binary P6, maxval 255.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = match img.shape() {
        &[3, h, w] => [h, w],
        s => return Err(Error::invalid(format!("PPM images are [3, H, W], got {s:?}"))),
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(img.data()[c * plane + i]));
        }
    }
    Ok(out)
}

fn decode_pnm(bytes: &[u8], magic: &str, channels: usize, format: &'static str) -> Result<(usize, usize, Vec<u8>)> {
    let (tok, start) = header_tokens(bytes, 4, format)?;
    if tok[0] != magic {
        return Err(Error::parse(format, ParseKind::BadMagic(tok[0].to_string())));
    }
    let (w, h) = (dim(tok[1], format)?, dim(tok[2], format)?);
    let maxval: u32 = tok[3]
        .parse()
        .map_err(|_| Error::parse(format, ParseKind::Header(format!("bad maxval {:?}", tok[3]))))?;
    if maxval != 255 {
        return Err(Error::parse(format, ParseKind::Maxval(maxval)));
    }
    Ok((h, w, payload(bytes, start, channels * h * w, format)?.to_vec()))
}

/// Decodes binary P6 into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, raw) = decode_pnm(bytes, "P6", 3, "ppm")?;
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Encodes a validity mask as binary P5 (255 = valid).
pub fn encode_mask(mask: &[bool], h: usize, w: usize) -> Result<Vec<u8>> {
    if mask.len() != h * w {
        return Err(Error::invalid(format!("mask has {} entries for {h}x{w}", mask.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    Ok(out)
}

/// Decodes a P5 mask; grey levels of 128 and above count as valid.
pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let (h, w, raw) = decode_pnm(bytes, "P5", 1, "pgm")?;
    Ok((h, w, raw.iter().map(|&v| v >= 128).collect()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pfm(&read(path.as_ref())?)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_pfm(map)?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_ppm(img)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    decode_mask(&read(path.as_ref())?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &[bool], h: usize, w: usize) -> Result<()> {
    write(path.as_ref(), &encode_mask(mask, h, w)?)
}
