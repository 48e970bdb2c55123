//! Depth rasters as 16-bit PGM (binary `P5`, big-endian) or plain float text,
//! and binary masks as PBM (`P4` written, `P1` also read).
//!
//! PGM stores integers, so the writer picks a quantization step and records it
//! in a `# depth-scale <meters-per-unit>` header comment; the reader applies
//! it (defaulting to millimeters when absent). Zero always means "no depth".

use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::recovery::{BinaryMask, DepthMap};

/// Writes `depth` as binary 16-bit PGM, choosing the finest quantization step
/// that still fits the maximum depth into 65535 units.
pub fn write_pgm16(path: &Path, depth: &DepthMap) -> Result<()> {
    let max = depth
        .data
        .iter()
        .cloned()
        .filter(|d| d.is_finite() && *d > 0.0)
        .fold(0.0, Real::max);
    let scale = if max > 0.0 { max / 65535.0 } else { 1.0 };
    let mut out = Vec::with_capacity(depth.data.len() * 2 + 64);
    out.extend_from_slice(
        format!(
            "P5\n# depth-scale {scale:.17e}\n{} {}\n65535\n",
            depth.width, depth.height
        )
        .as_bytes(),
    );
    for d in &depth.data {
        let q: u16 = if d.is_finite() && *d > 0.0 {
            ((d / scale).round() as i64).clamp(0, 65535) as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    write_bytes(path, &out)
}

type Real = crate::geom::Real;

/// Header tokens of a PNM file: magic, dims, optional maxval, data offset,
/// plus any `depth-scale` comment seen on the way.
struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
    depth_scale: Option<Real>,
}

fn parse_pnm_header(path: &Path, bytes: &[u8], expect_maxval: bool) -> Result<PnmHeader> {
    if bytes.len() < 2 {
        return Err(Error::parse(path, "file too short for PNM header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2usize;
    let mut fields: Vec<usize> = Vec::new();
    let needed = if expect_maxval { 3 } else { 2 };
    let mut depth_scale = None;

    while fields.len() < needed {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                let end = bytes[pos..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map(|o| pos + o)
                    .unwrap_or(bytes.len());
                let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
                let mut parts = comment.split_whitespace();
                if parts.next() == Some("depth-scale") {
                    depth_scale = parts.next().and_then(|s| s.parse().ok());
                }
                pos = end;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::parse(path, "truncated PNM header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::parse(path, "non-utf8 header"))?;
        fields.push(token.parse().map_err(|_| Error::parse(path, "bad header number"))?);
    }
    // Exactly one whitespace byte separates the header from binary data.
    if pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    Ok(PnmHeader {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: if expect_maxval { fields[2] } else { 1 },
        data_start: pos,
        depth_scale,
    })
}

/// Reads 8- or 16-bit binary PGM as a depth map in meters.
pub fn read_pgm16(path: &Path) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let header = parse_pnm_header(path, &bytes, true)?;
    if &header.magic != b"P5" {
        return Err(Error::parse(path, "expected binary PGM (P5)"));
    }
    if header.maxval == 0 || header.maxval > 65535 {
        return Err(Error::parse(path, format!("unsupported maxval {}", header.maxval)));
    }
    let n = header.width * header.height;
    let wide = header.maxval > 255;
    let expected = n * if wide { 2 } else { 1 };
    let data_bytes = &bytes[header.data_start..];
    if data_bytes.len() < expected {
        return Err(Error::parse(path, "pixel data shorter than header promises"));
    }
    let scale = header.depth_scale.unwrap_or(1e-3);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::parse(path, "bad depth-scale comment"));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let q = if wide {
            u16::from_be_bytes([data_bytes[2 * i], data_bytes[2 * i + 1]]) as u32
        } else {
            data_bytes[i] as u32
        };
        data.push(q as Real * scale);
    }
    DepthMap::new(header.width, header.height, data)
}

/// Writes a depth map as exact decimal text: `depth-text W H` then row-major
/// values. Lossless apart from decimal/binary float conversion at 17 digits.
pub fn write_depth_text(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut out = format!("depth-text {} {}\n", depth.width, depth.height);
    for row in 0..depth.height {
        let line: Vec<String> = (0..depth.width)
            .map(|col| format!("{:.17e}", depth.at(row, col)))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_depth_text(path: &Path) -> Result<DepthMap> {
    let text = super::read_to_string(path)?;
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("depth-text") {
        return Err(Error::parse(path, "missing depth-text magic"));
    }
    let width: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(path, "bad width"))?;
    let height: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::parse(path, "bad height"))?;
    let mut data = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let v: Real = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(path, "missing depth value"))?;
        data.push(v);
    }
    DepthMap::new(width, height, data)
}

/// Writes a mask as binary PBM (`P4`): bit 1 = masked-in, rows padded to bytes.
pub fn write_pbm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let row_bytes = mask.width.div_ceil(8);
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    for row in 0..mask.height {
        let mut packed = vec![0u8; row_bytes];
        for col in 0..mask.width {
            if mask.at(row, col) {
                packed[col / 8] |= 0x80 >> (col % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    write_bytes(path, &out)
}

/// Reads `P4` (binary) or `P1` (ascii) PBM.
pub fn read_pbm(path: &Path) -> Result<BinaryMask> {
    let bytes = read_bytes(path)?;
    let header = parse_pnm_header(path, &bytes, false)?;
    let n = header.width * header.height;
    match &header.magic {
        b"P4" => {
            let row_bytes = header.width.div_ceil(8);
            let data_bytes = &bytes[header.data_start..];
            if data_bytes.len() < row_bytes * header.height {
                return Err(Error::parse(path, "mask data shorter than header promises"));
            }
            let mut data = Vec::with_capacity(n);
            for row in 0..header.height {
                for col in 0..header.width {
                    let byte = data_bytes[row * row_bytes + col / 8];
                    data.push(byte & (0x80 >> (col % 8)) != 0);
                }
            }
            BinaryMask::new(header.width, header.height, data)
        }
        b"P1" => {
            let text = String::from_utf8_lossy(&bytes[header.data_start..]);
            let mut data = Vec::with_capacity(n);
            for tok in text.split_whitespace() {
                for ch in tok.chars() {
                    match ch {
                        '0' => data.push(false),
                        '1' => data.push(true),
                        _ => return Err(Error::parse(path, format!("bad P1 digit '{ch}'"))),
                    }
                }
            }
            if data.len() < n {
                return Err(Error::parse(path, "too few P1 digits"));
            }
            data.truncate(n);
            BinaryMask::new(header.width, header.height, data)
        }
        _ => Err(Error::parse(path, "expected PBM (P1 or P4)")),
    }
}
