//! IDX image/label files (big-endian header, unsigned-byte payload).

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn ingest(offset: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingest(offset, "truncated header"))
}

/// Parses an IDX image file into an `(n, rows·cols)` matrix scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<DenseMatrix> {
    let magic = read_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(ingest(
            0,
            format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let width = rows * cols;
    let body = &bytes[16..];
    let need = n * width;
    if body.len() != need {
        return Err(ingest(
            16 + body.len().min(need),
            format!(
                "header declares {n} images of {rows}x{cols} ({need} bytes), payload has {}",
                body.len()
            ),
        ));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    DenseMatrix::from_vec(n, width, data)
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(ingest(
            0,
            format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(ingest(
            8 + body.len().min(n),
            format!("header declares {n} labels, payload has {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn read_images(path: &Path) -> Result<DenseMatrix> {
    parse_images(&std::fs::read(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&std::fs::read(path)?)
}

/// Encodes `[0, 1]` images as an IDX file (values rounded to bytes).
pub fn encode_images(images: &DenseMatrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != images.cols() {
        return Err(Error::dim("idx image size", images.cols(), rows * cols));
    }
    let mut out = Vec::with_capacity(16 + images.as_slice().len());
    for w in [IMAGES_MAGIC, images.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend(
        images
            .as_slice()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
