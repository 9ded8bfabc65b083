//! Procedurally generated classification data: each class is a thick bright
//! bar at a class-specific orientation, with positional jitter and pixel
//! noise. Fully seeded, so tests and demos run without any dataset on disk.

use crate::data::Dataset;
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Generate `n` images of `size` x `size` with `channels` channels across
/// `num_classes` orientation classes.
pub fn synth_dataset<S: Scalar>(
    n: usize,
    size: usize,
    channels: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset<S>> {
    let rng = SplitMix64::new(seed);
    let mut data = Vec::with_capacity(n * channels * size * size);
    let mut labels = Vec::with_capacity(n);
    let half = size as f64 / 2.0;

    for i in 0..n {
        let mut r = rng.fork(i as u64);
        let class = r.next_below(num_classes);
        labels.push(class);

        let angle = std::f64::consts::PI * class as f64 / num_classes as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        let cx = half + (r.next_f64() - 0.5) * 4.0;
        let cy = half + (r.next_f64() - 0.5) * 4.0;
        let thickness = 1.6;

        let mut plane = vec![0.0f64; size * size];
        for y in 0..size {
            for x in 0..size {
                // distance from pixel center to the oriented line through (cx, cy)
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let dist = (px * dy - py * dx).abs();
                let along = (px * dx + py * dy).abs();
                if dist < thickness && along < half * 0.9 {
                    plane[y * size + x] = 1.0;
                }
            }
        }
        for ch in 0..channels {
            let tint = 1.0 - 0.15 * ch as f64;
            for &v in &plane {
                let noisy = (v * tint + 0.08 * r.next_normal()).clamp(0.0, 1.0);
                data.push(S::from_f64(noisy));
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, channels, size, size], data),
        labels,
        num_classes,
    )
}
