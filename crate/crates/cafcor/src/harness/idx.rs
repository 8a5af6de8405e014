//! IDX-format dataset ingestion (MNIST and friends).
//!
//! Big-endian magic plus 32-bit dimensions; images use magic `0x00000803`
//! with dims `(count, rows, cols)`, labels use `0x00000801` with `(count,)`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::training::task::{Dataset, Example};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("magic mismatch: expected {expected:#010x}, got {got:#010x}")]
    MagicMismatch { expected: u32, got: u32 },
    #[error("file truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("images file holds {images} items but labels file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, `count * rows * cols` bytes.
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages, IdxError> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::MagicMismatch {
            expected: IMAGES_MAGIC,
            got: magic,
        });
    }
    let count = read_u32(&bytes, 4)? as usize;
    let rows = read_u32(&bytes, 8)? as usize;
    let cols = read_u32(&bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            got: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..needed].to_vec(),
    })
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::MagicMismatch {
            expected: LABELS_MAGIC,
            got: magic,
        });
    }
    let count = read_u32(&bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Pixel transform applied on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `(x/255 - 0.1307) / 0.3081`.
    Mnist,
    /// Plain `x/255`.
    Unit,
}

pub fn normalize_pixel(px: u8, normalization: Normalization) -> f64 {
    let unit = px as f64 / 255.0;
    match normalization {
        Normalization::Mnist => (unit - 0.1307) / 0.3081,
        Normalization::Unit => unit,
    }
}

/// Load an image/label pair into a dataset.
///
/// `flip_horizontal` mirrors every image left-to-right as a deterministic
/// preprocessing step. `limit` truncates to the first examples.
pub fn load_idx_dataset(
    images_path: &Path,
    labels_path: &Path,
    normalization: Normalization,
    flip_horizontal: bool,
    limit: Option<usize>,
) -> Result<Dataset, IdxError> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let take = limit.unwrap_or(images.count).min(images.count);
    let span = images.rows * images.cols;
    let mut out = Vec::with_capacity(take);
    for (i, &label) in labels.iter().enumerate().take(take) {
        let raw = &images.pixels[i * span..(i + 1) * span];
        let mut x = Vec::with_capacity(span);
        for r in 0..images.rows {
            let row = &raw[r * images.cols..(r + 1) * images.cols];
            if flip_horizontal {
                for px in row.iter().rev() {
                    x.push(normalize_pixel(*px, normalization));
                }
            } else {
                for px in row {
                    x.push(normalize_pixel(*px, normalization));
                }
            }
        }
        out.push(Example {
            x,
            y: label as usize,
        });
    }
    Ok(out)
}

/// Write images in IDX format; used for fixtures and synthetic corpora.
pub fn write_idx_images(
    path: &Path,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
) -> Result<(), IdxError> {
    let mut bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.len(), rows * cols);
        bytes.extend_from_slice(img);
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), IdxError> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}
