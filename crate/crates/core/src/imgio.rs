//! Binary portable-pixmap I/O: P6 images scaled to [0, 1] and P5 label
//! maps with one byte per pixel.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::numerics::Tensor;

fn format_err(reason: impl Into<String>) -> Error {
    Error::FormatError {
        line: 0,
        reason: reason.into(),
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
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
    if start == *pos {
        return Err(format_err("unexpected end of header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0;
    let got = next_token(bytes, &mut pos)?;
    if got != magic {
        return Err(format_err(format!("expected {magic}, got {got}")));
    }
    let width: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("bad width"))?;
    let height: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("bad height"))?;
    let maxval: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(format!("maxval must be 255, got {maxval}")));
    }
    // exactly one whitespace byte separates header and raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("missing raster separator"));
    }
    Ok((width, height, pos + 1))
}

/// Encodes an [h x w x 3] image with values in [0, 1] as binary P6.
pub fn ppm_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = *img.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "P6 needs [h x w x 3], got {:?}",
            img.shape()
        )));
    };
    if c != 3 {
        return Err(Error::ShapeMismatch("P6 needs 3 channels".into()));
    }
    let mut out = Vec::with_capacity(h * w * 3 + 32);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    for &v in img.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

/// Decodes binary P6 into an [h x w x 3] image scaled to [0, 1].
pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, start) = parse_header(bytes, "P6")?;
    let need = w * h * 3;
    let raster = &bytes[start..];
    if raster.len() != need {
        return Err(format_err(format!(
            "raster holds {} bytes, expected {need}",
            raster.len()
        )));
    }
    Ok(Tensor::new(
        vec![h, w, 3],
        raster.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

/// Encodes a label map as binary P5, one byte per pixel = class index.
pub fn pgm_bytes(labels: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.labels().len() + 32);
    write!(out, "P5\n{} {}\n255\n", labels.width(), labels.height()).expect("vec write");
    out.extend_from_slice(labels.labels());
    out
}

pub fn parse_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, start) = parse_header(bytes, "P5")?;
    let raster = &bytes[start..];
    if raster.len() != w * h {
        return Err(format_err(format!(
            "raster holds {} bytes, expected {}",
            raster.len(),
            w * h
        )));
    }
    LabelMap::new(h, w, raster.to_vec())
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, ppm_bytes(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    std::fs::write(path, pgm_bytes(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}
