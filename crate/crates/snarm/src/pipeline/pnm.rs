//! Minimal PNM codec: P6 RGB images, P5 8-bit masks (0/255) and P5 16-bit
//! anomaly maps. Byte-exact writes keep generated datasets and exported maps
//! fully deterministic.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SnarmError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pnm {
    Gray8 { w: usize, h: usize, data: Vec<u8> },
    Gray16 { w: usize, h: usize, data: Vec<u16> },
    Rgb8 { w: usize, h: usize, data: Vec<u8> },
}

pub fn write_ppm8(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(SnarmError::shape(
            format!("{}x{}x3", w, h),
            format!("{} bytes", rgb.len()),
        ));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

pub fn write_pgm8(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(SnarmError::shape(
            format!("{}x{}", w, h),
            format!("{} bytes", gray.len()),
        ));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(gray)?;
    Ok(())
}

/// 16-bit graymap, big-endian samples per the PNM convention.
pub fn write_pgm16(path: &Path, w: usize, h: usize, gray: &[u16]) -> Result<()> {
    if gray.len() != w * h {
        return Err(SnarmError::shape(
            format!("{}x{}", w, h),
            format!("{} samples", gray.len()),
        ));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n65535\n")?;
    let mut buf = Vec::with_capacity(gray.len() * 2);
    for v in gray {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(u8, usize, usize, usize, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(SnarmError::data(format!(
            "{} is not a supported PNM file",
            path.display()
        )));
    }
    let kind = bytes[1];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(SnarmError::data(format!(
                "{}: malformed PNM header",
                path.display()
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| SnarmError::data(format!("{}: bad header field", path.display())))?;
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    Ok((kind, fields[0], fields[1], fields[2], pos))
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (kind, w, h, maxval, offset) = parse_header(&bytes, path)?;
    let raster = &bytes[offset..];
    match (kind, maxval) {
        (b'6', 255) => {
            if raster.len() != w * h * 3 {
                return Err(SnarmError::data(format!(
                    "{}: raster size mismatch",
                    path.display()
                )));
            }
            Ok(Pnm::Rgb8 {
                w,
                h,
                data: raster.to_vec(),
            })
        }
        (b'5', 255) => {
            if raster.len() != w * h {
                return Err(SnarmError::data(format!(
                    "{}: raster size mismatch",
                    path.display()
                )));
            }
            Ok(Pnm::Gray8 {
                w,
                h,
                data: raster.to_vec(),
            })
        }
        (b'5', 65535) => {
            if raster.len() != w * h * 2 {
                return Err(SnarmError::data(format!(
                    "{}: raster size mismatch",
                    path.display()
                )));
            }
            let data = raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect();
            Ok(Pnm::Gray16 { w, h, data })
        }
        _ => Err(SnarmError::data(format!(
            "{}: unsupported PNM variant (maxval {maxval})",
            path.display()
        ))),
    }
}
