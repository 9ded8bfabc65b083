//! MNIST-style IDX readers (big-endian headers).

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const IMAGE_MAGIC: u32 = 0x0000_0803; // u8 payload, rank 3
const LABEL_MAGIC: u32 = 0x0000_0801; // u8 payload, rank 1

fn be_u32(bytes: &[u8], at: usize, total: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Truncated {
            expected: (at + 4) as u64,
            actual: total as u64,
        })
}

/// Parse an IDX image/label file pair into a `[N, 1, rows, cols]` dataset
/// scaled to [0, 1].
pub fn read_idx<S: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<S>> {
    let img_bytes = std::fs::read(&images_path)?;
    let lbl_bytes = std::fs::read(&labels_path)?;

    let magic = be_u32(&img_bytes, 0, img_bytes.len())?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(&img_bytes, 4, img_bytes.len())? as usize;
    let rows = be_u32(&img_bytes, 8, img_bytes.len())? as usize;
    let cols = be_u32(&img_bytes, 12, img_bytes.len())? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            actual: img_bytes.len() as u64,
        });
    }

    let lmagic = be_u32(&lbl_bytes, 0, lbl_bytes.len())?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: LABEL_MAGIC,
            found: lmagic,
        });
    }
    let lcount = be_u32(&lbl_bytes, 4, lbl_bytes.len())? as usize;
    if lbl_bytes.len() != 8 + lcount {
        return Err(Error::Truncated {
            expected: (8 + lcount) as u64,
            actual: lbl_bytes.len() as u64,
        });
    }
    if lcount != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lcount,
        });
    }

    let scale = S::from_f64(1.0 / 255.0);
    let data: Vec<S> = img_bytes[16..]
        .iter()
        .map(|&b| S::from_f64(b as f64) * scale)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(Tensor::new(vec![count, 1, rows, cols], data), labels, 10)
}

/// Serialize images/labels into IDX bytes (test and tooling support).
pub fn write_idx_bytes(images: &[u8], count: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(images.len(), count * rows * cols);
    assert_eq!(labels.len(), count);
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(count as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(images);
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(count as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    (img, lbl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &std::path::Path, img: &[u8], lbl: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images-idx3-ubyte");
        let lp = dir.join("labels-idx1-ubyte");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn standard_header_parses() {
        // same header fields as the official 10000-image test set
        let count = 10_000;
        let images = vec![128u8; count * 28 * 28];
        let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        let (ib, lb) = write_idx_bytes(&images, count, 28, 28, &labels);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &ib, &lb);
        let ds = read_idx::<f32>(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 10_000);
        assert_eq!(ds.images.shape(), &[10_000, 1, 28, 28]);
        assert!((ds.images.data()[0] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let (ib, lb) = write_idx_bytes(&[0u8; 2 * 4], 2, 2, 2, &[0, 1]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &ib[..ib.len() - 2], &lb);
        match read_idx::<f32>(&ip, &lp) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, 24);
                assert_eq!(actual, 22);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn image_label_count_mismatch_is_error() {
        let (ib, _) = write_idx_bytes(&[0u8; 2 * 4], 2, 2, 2, &[0, 1]);
        let (_, lb) = write_idx_bytes(&[0u8; 3 * 4], 3, 2, 2, &[0, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &ib, &lb);
        assert!(matches!(
            read_idx::<f32>(&ip, &lp),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn bad_magic_is_error() {
        let (mut ib, lb) = write_idx_bytes(&[0u8; 4], 1, 2, 2, &[0]);
        ib[2] = 0xFF;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &ib, &lb);
        assert!(matches!(read_idx::<f32>(&ip, &lp), Err(Error::BadMagic { .. })));
    }
}
