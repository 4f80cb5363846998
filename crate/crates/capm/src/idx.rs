//! IDX dataset ingestion (the MNIST container format), plus a raw JSON
//! fallback for multi-channel arrays.

use crate::error::{CapmError, Result};
use crate::tensor::FeatureMap;
use serde::Deserialize;
use std::fs;
use std::path::Path;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(CapmError::Truncated {
            expected: end,
            found: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load an IDX image file: big-endian magic 0x00000803, then count, rows,
/// cols, then one unsigned byte per pixel. Pixels are scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Vec<FeatureMap>> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(CapmError::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(&bytes, 4)? as usize;
    let rows = read_u32(&bytes, 8)? as usize;
    let cols = read_u32(&bytes, 12)? as usize;
    if rows != cols {
        return Err(CapmError::ShapeMismatch(format!(
            "IDX images must be square, got {rows}x{cols}"
        )));
    }
    let expected = count * rows * cols;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() < expected {
        return Err(CapmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let data = payload[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        images.push(FeatureMap::from_vec(1, rows, data)?);
    }
    Ok(images)
}

/// Load an IDX label file: big-endian magic 0x00000801, count, one byte per
/// label.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(CapmError::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(&bytes, 4)? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() < count {
        return Err(CapmError::Truncated {
            expected: count,
            found: payload.len(),
        });
    }
    Ok(payload[..count].iter().map(|&b| b as usize).collect())
}

/// Reject labels outside [0, classes).
pub fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CapmError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawImagesFile {
    channels: usize,
    side: usize,
    /// Row-major (channel, row, col) pixel values in [0, 1].
    images: Vec<Vec<f64>>,
}

/// Raw-array fallback for multi-channel datasets: a JSON file with
/// `{channels, side, images: [[...], ...]}`.
pub fn load_raw_images(path: &Path) -> Result<Vec<FeatureMap>> {
    let text = fs::read_to_string(path)?;
    let file: RawImagesFile =
        serde_json::from_str(&text).map_err(|e| CapmError::ParseError(e.to_string()))?;
    file.images
        .into_iter()
        .map(|data| FeatureMap::from_vec(file.channels, file.side, data))
        .collect()
}

/// Load images by extension: `.json` uses the raw-array fallback, anything
/// else is treated as IDX.
pub fn load_images(path: &Path) -> Result<Vec<FeatureMap>> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        load_raw_images(path)
    } else {
        load_idx_images(path)
    }
}

/// Serialize images into IDX bytes; test and fixture helper.
pub fn idx_image_bytes(images: &[FeatureMap]) -> Vec<u8> {
    let side = images.first().map(|m| m.side).unwrap_or(0);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(side as u32).to_be_bytes());
    bytes.extend_from_slice(&(side as u32).to_be_bytes());
    for m in images {
        bytes.extend(m.data.iter().map(|&v| (v * 255.0).round() as u8));
    }
    bytes
}

/// Serialize labels into IDX bytes; test and fixture helper.
pub fn idx_label_bytes(labels: &[usize]) -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend(labels.iter().map(|&l| l as u8));
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<FeatureMap> = (0..4)
            .map(|i| {
                FeatureMap::from_vec(
                    1,
                    28,
                    (0..28 * 28).map(|p| ((p + i * 37) % 256) as f64 / 255.0).collect(),
                )
                .unwrap()
            })
            .collect();
        let path = dir.path().join("images.idx");
        fs::write(&path, idx_image_bytes(&images)).unwrap();
        let loaded = load_idx_images(&path).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in loaded.iter().zip(&images) {
            assert_eq!(a.side, 28);
            assert_eq!(a.channels, 1);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        let mut bytes = idx_image_bytes(&[FeatureMap::zeros(1, 2)]);
        bytes[3] = 0x01; // now a label magic in an image loader
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_idx_images(&path),
            Err(CapmError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut bytes = idx_image_bytes(&[FeatureMap::zeros(1, 4)]);
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_idx_images(&path),
            Err(CapmError::Truncated { .. })
        ));
    }

    #[test]
    fn labels_round_trip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.idx");
        fs::write(&path, idx_label_bytes(&[3, 1, 12, 0])).unwrap();
        let labels = load_idx_labels(&path).unwrap();
        assert_eq!(labels, vec![3, 1, 12, 0]);
        assert!(check_labels(&labels, 13).is_ok());
        let err = check_labels(&labels, 10).unwrap_err();
        assert!(matches!(
            err,
            CapmError::LabelOutOfRange { label: 12, classes: 10 }
        ));
    }
}
