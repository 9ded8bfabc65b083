//! Minimal training augmentation: pad-and-random-crop, horizontal flip,
//! per-channel normalization. Deterministic under a seed.

use crate::data::DatasetBatch;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Default)]
pub struct AugmentOps {
    /// Zero-pad by `p` on every side, then random-crop back to the original
    /// extent.
    pub pad_crop: Option<usize>,
    /// Probability of a horizontal flip per sample.
    pub hflip: f64,
    /// Per-channel `(x - mean) / std`.
    pub normalize: Option<(Vec<f64>, Vec<f64>)>,
}

/// Apply `ops` to a batch. All randomness comes from `seed`; the same seed
/// reproduces the same batch on every platform.
pub fn augment<S: Scalar>(
    batch: &DatasetBatch<S>,
    ops: &AugmentOps,
    seed: u64,
) -> Result<DatasetBatch<S>> {
    let [n, c, h, w] = batch.images.shape() else {
        return Err(Error::InvalidArgument(format!(
            "augment expects [N,C,H,W], got {:?}",
            batch.images.shape()
        )));
    };
    let (n, c, h, w) = (*n, *c, *h, *w);
    if let Some(p) = ops.pad_crop {
        if p >= h || p >= w {
            return Err(Error::InvalidArgument(format!(
                "pad_crop {p} is not smaller than the {h}x{w} image"
            )));
        }
    }
    if let Some((mean, std)) = &ops.normalize {
        if mean.len() != c || std.len() != c {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                lhs: vec![c],
                rhs: vec![mean.len(), std.len()],
            });
        }
        if std.contains(&0.0) {
            return Err(Error::InvalidArgument("normalize: zero std".into()));
        }
    }

    let rng = SplitMix64::new(seed);
    let mut out = batch.images.data().to_vec();
    let plane = h * w;

    for i in 0..n {
        // one sub-stream per sample keeps the result independent of batch size
        let mut r = rng.fork(i as u64);
        let sample = &mut out[i * c * plane..(i + 1) * c * plane];

        if let Some(p) = ops.pad_crop {
            // crop offset in the zero-padded (h+2p) x (w+2p) canvas
            let oy = r.next_below(2 * p + 1);
            let ox = r.next_below(2 * p + 1);
            let mut cropped = vec![S::ZERO; c * plane];
            for ch in 0..c {
                for y in 0..h {
                    let sy = y as isize + oy as isize - p as isize;
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + ox as isize - p as isize;
                        if sx < 0 || sx as usize >= w {
                            continue;
                        }
                        cropped[ch * plane + y * w + x] =
                            sample[ch * plane + sy as usize * w + sx as usize];
                    }
                }
            }
            sample.copy_from_slice(&cropped);
        }

        if ops.hflip > 0.0 && r.next_f64() < ops.hflip {
            for ch in 0..c {
                for y in 0..h {
                    let row = &mut sample[ch * plane + y * w..ch * plane + (y + 1) * w];
                    row.reverse();
                }
            }
        }

        if let Some((mean, std)) = &ops.normalize {
            for ch in 0..c {
                let (m, s) = (S::from_f64(mean[ch]), S::from_f64(std[ch]));
                for v in &mut sample[ch * plane..(ch + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
    }

    Ok(DatasetBatch {
        images: Tensor::new(vec![n, c, h, w], out),
        labels: batch.labels.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch() -> DatasetBatch<f32> {
        let mut rng = SplitMix64::new(5);
        DatasetBatch {
            images: Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut rng),
            labels: vec![0, 1],
        }
    }

    #[test]
    fn hflip_prob_zero_is_identity() {
        let b = sample_batch();
        let out = augment(&b, &AugmentOps { hflip: 0.0, ..Default::default() }, 1).unwrap();
        assert_eq!(out.images.data(), b.images.data());
    }

    #[test]
    fn forced_double_flip_is_identity() {
        let b = sample_batch();
        let ops = AugmentOps { hflip: 1.0, ..Default::default() };
        let once = augment(&b, &ops, 1).unwrap();
        let twice = augment(&once, &ops, 2).unwrap();
        assert_eq!(twice.images.data(), b.images.data());
    }

    #[test]
    fn normalize_then_unnormalize_recovers_input() {
        let b = sample_batch();
        let mean = vec![0.4, 0.45, 0.5];
        let std = vec![0.2, 0.25, 0.3];
        let fwd = augment(
            &b,
            &AugmentOps { normalize: Some((mean.clone(), std.clone())), ..Default::default() },
            1,
        )
        .unwrap();
        // invert: x = y * std + mean expressed as (y - (-mean/std)) / (1/std)
        let inv_mean: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| -m / s).collect();
        let inv_std: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
        let back = augment(
            &fwd,
            &AugmentOps { normalize: Some((inv_mean, inv_std)), ..Default::default() },
            1,
        )
        .unwrap();
        for (a, b) in back.images.data().iter().zip(b.images.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_seed_reproduces() {
        let b = sample_batch();
        let ops = AugmentOps { pad_crop: Some(2), hflip: 0.5, ..Default::default() };
        let a1 = augment(&b, &ops, 42).unwrap();
        let a2 = augment(&b, &ops, 42).unwrap();
        assert_eq!(a1.images.data(), a2.images.data());
        let a3 = augment(&b, &ops, 43).unwrap();
        assert_ne!(a1.images.data(), a3.images.data());
    }

    #[test]
    fn oversized_pad_crop_is_error() {
        let b = sample_batch();
        assert!(augment(&b, &AugmentOps { pad_crop: Some(8), ..Default::default() }, 1).is_err());
    }
}
