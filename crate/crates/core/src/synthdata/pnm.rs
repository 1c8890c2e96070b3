//! Binary netpbm I/O: P6 for RGB images, P5 for label masks.
//!
//! Images are planar `3 x H x W` floats in `[0, 1]`, quantized on write as
//! `round(255 * v)`. Masks hold labels `{0, 1}` and are stored as `{0, 255}`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("mask value {value} at pixel {index} is neither 0 nor 255")]
    MaskValue { value: u8, index: usize },
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    f32::from(b) / 255.0
}

/// Encodes a planar RGB image as P6.
pub fn encode_ppm(image: &[f32], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(image.len(), 3 * height * width);
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            out.push(quantize(image[c * plane + p]));
        }
    }
    out
}

/// Encodes a `{0,1}` mask as P5 with values `{0,255}`.
pub fn encode_pgm_mask(mask: &[u8], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(mask.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m > 0 { 255 } else { 0 }));
    out
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> std::result::Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PnmError::BadMagic {
            expected: magic,
            found,
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PnmError::Header("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| PnmError::Header(format!("number out of range: {text}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PnmError::Header("missing whitespace after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PnmError::Header(format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(PnmError::Header(format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> std::result::Result<&'a [u8], PnmError> {
    let expected = header.width * header.height * channels;
    let found = bytes.len() - header.offset;
    if found < expected {
        return Err(PnmError::Truncated { expected, found });
    }
    Ok(&bytes[header.offset..header.offset + expected])
}

/// Decodes P6 into a planar image; returns `(image, height, width)`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<(Vec<f32>, usize, usize), PnmError> {
    let header = parse_header(bytes, "P6")?;
    let raw = payload(bytes, &header, 3)?;
    let plane = header.width * header.height;
    let mut image = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            image[c * plane + p] = dequantize(raw[3 * p + c]);
        }
    }
    Ok((image, header.height, header.width))
}

/// Decodes a `{0,255}` P5 mask into labels `{0,1}`.
pub fn decode_pgm_mask(bytes: &[u8]) -> std::result::Result<(Vec<u8>, usize, usize), PnmError> {
    let header = parse_header(bytes, "P5")?;
    let raw = payload(bytes, &header, 1)?;
    let mask = raw
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(PnmError::MaskValue { value, index }),
        })
        .collect::<std::result::Result<Vec<u8>, _>>()?;
    Ok((mask, header.height, header.width))
}

pub fn write_ppm(path: &Path, image: &[f32], height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_ppm(image, height, width)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm_mask(path: &Path, mask: &[u8], height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_pgm_mask(mask, height, width)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|source| Error::Pnm {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_pgm_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm_mask(&bytes).map_err(|source| Error::Pnm {
        path: path.to_path_buf(),
        source,
    })
}
