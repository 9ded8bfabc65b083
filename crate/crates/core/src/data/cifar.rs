//! CIFAR-10 binary reader: 3073-byte records (1 label byte + 3x32x32 planar
//! RGB pixels).

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const RECORD: usize = 3073;
const PIXELS: usize = 3072;

/// Read one or more CIFAR-10 batch files into a `[N, 3, 32, 32]` dataset
/// scaled to [0, 1].
pub fn read_cifar10<S: Scalar>(paths: &[impl AsRef<Path>]) -> Result<Dataset<S>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR-10 batch files given".into()));
    }
    let mut data: Vec<S> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let scale = S::from_f64(1.0 / 255.0);
    for path in paths {
        let bytes = std::fs::read(path)?;
        if bytes.len() % RECORD != 0 {
            return Err(Error::Truncated {
                expected: (bytes.len() / RECORD * RECORD + RECORD) as u64,
                actual: bytes.len() as u64,
            });
        }
        for rec in bytes.chunks_exact(RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Format(format!("CIFAR-10 label {label} out of range")));
            }
            labels.push(label);
            data.extend(rec[1..].iter().map(|&b| S::from_f64(b as f64) * scale));
        }
    }
    let n = labels.len();
    debug_assert_eq!(data.len(), n * PIXELS);
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data), labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_record_count_is_file_length_over_3073() {
        let records = 5;
        let bytes = vec![0u8; records * RECORD];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        std::fs::write(&p, &bytes).unwrap();
        let ds = read_cifar10::<f32>(&[&p]).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.images.shape(), &[5, 3, 32, 32]);
    }

    #[test]
    fn zero_record_is_zero_image_label_zero() {
        let bytes = vec![0u8; RECORD];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, &bytes).unwrap();
        let ds = read_cifar10::<f32>(&[&p]).unwrap();
        assert_eq!(ds.labels[0], 0);
        assert!(ds.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_file_length_is_error() {
        let bytes = vec![0u8; RECORD + 1];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_cifar10::<f32>(&[&p]),
            Err(Error::Truncated { .. })
        ));
    }
}
