use std::path::Path;

use super::ClassDataset;
use crate::error::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(path: &Path, expected: u32, actual: u32) -> Result<()> {
    if expected != actual {
        return Err(Error::format(
            path.display().to_string(),
            format!("bad IDX magic: expected {expected:#010x}, found {actual:#010x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0).ok_or_else(|| truncated(path, "header"))?;
    check_magic(path, IDX_IMAGE_MAGIC, magic)?;
    let dims: Vec<usize> = (0..3)
        .map(|k| be_u32(bytes, 4 + 4 * k).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| truncated(path, "header"))?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(truncated(path, "image data"));
    }
    if body.len() > need {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} trailing bytes after {n} images", body.len() - need),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| truncated(path, "header"))?;
    check_magic(path, IDX_LABEL_MAGIC, magic)?;
    let n = be_u32(bytes, 4).ok_or_else(|| truncated(path, "header"))? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(truncated(path, "label data"));
    }
    if body.len() > n {
        return Err(Error::format(
            path.display().to_string(),
            format!("{} trailing bytes after {n} labels", body.len() - n),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair as `N × 1 × rows × cols` examples
/// with pixels scaled to `[0, 1]` and ten classes.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<ClassDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(images_path, &images)?;
    let labels = parse_idx_labels(labels_path, &labels)?;
    if labels.len() != n {
        return Err(Error::format(
            "mnist",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::format(
            labels_path.display().to_string(),
            format!("label {bad} is not a digit"),
        ));
    }
    ClassDataset::from_pixels(vec![1, rows, cols], pixels, labels, 10)
}
