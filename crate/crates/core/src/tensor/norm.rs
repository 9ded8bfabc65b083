//! Layer and batch normalization primitives.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Per-token normalization over the last axis, then affine:
/// `y = gamma * (x - mu) / sqrt(var + eps) + beta`.
pub fn layernorm<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let d = *x.shape().last().ok_or_else(|| {
        Error::InvalidArgument("layernorm requires rank >= 1".into())
    })?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            lhs: vec![d],
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.len() / d;
    let eps = S::from_f64(eps);
    let inv_d = S::ONE / S::from_f64(d as f64);

    let mut out = vec![S::ZERO; x.len()];
    let mut xhat = vec![S::ZERO; x.len()];
    let mut inv_std = vec![S::ZERO; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = S::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let istd = S::ONE / (var + eps).sqrt();
        inv_std[r] = istd;
        for (i, &v) in row.iter().enumerate() {
            let h = (v - mean) * istd;
            xhat[r * d + i] = h;
            out[r * d + i] = gamma.data()[i] * h + beta.data()[i];
        }
    }
    let mut result = Tensor::new(x.shape().to_vec(), out);

    let (x_node, g_node, b_node) = (x.node, gamma.node, beta.node);
    if tape.is_recording() && (x_node.is_some() || g_node.is_some() || b_node.is_some()) {
        let gamma_saved = gamma.detach();
        let shape = x.shape().to_vec();
        let node = tape.push(
            "layernorm",
            result.shape(),
            vec![x_node, g_node, b_node],
            Box::new(move |grad| {
                let gx = x_node.map(|_| {
                    let mut dx = vec![S::ZERO; shape.iter().product()];
                    let inv_d = S::ONE / S::from_f64(d as f64);
                    for r in 0..rows {
                        let gy = &grad.data()[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = S::ZERO;
                        let mut mean_dh_xh = S::ZERO;
                        for i in 0..d {
                            let dh = gy[i] * gamma_saved.data()[i];
                            mean_dh += dh;
                            mean_dh_xh += dh * xh[i];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_xh = mean_dh_xh * inv_d;
                        for i in 0..d {
                            let dh = gy[i] * gamma_saved.data()[i];
                            dx[r * d + i] = inv_std[r] * (dh - mean_dh - xh[i] * mean_dh_xh);
                        }
                    }
                    Tensor::new(shape.clone(), dx)
                });
                let gg = g_node.map(|_| {
                    let mut dg = vec![S::ZERO; d];
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += grad.data()[r * d + i] * xhat[r * d + i];
                        }
                    }
                    Tensor::new(vec![d], dg)
                });
                let gb = b_node.map(|_| {
                    let mut db = vec![S::ZERO; d];
                    for r in 0..rows {
                        for (acc, &g) in db.iter_mut().zip(&grad.data()[r * d..(r + 1) * d]) {
                            *acc += g;
                        }
                    }
                    Tensor::new(vec![d], db)
                });
                vec![gx, gg, gb]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

/// Output of [`batchnorm2d`]: the normalized tensor plus, in training mode,
/// the updated running statistics for the caller to store.
pub struct BatchNormOut<S: Scalar> {
    pub output: Tensor<S>,
    pub updated_running: Option<(Tensor<S>, Tensor<S>)>,
}

/// Channel-wise batch normalization of `[B, C, H, W]`.
///
/// Training mode normalizes with batch statistics (biased variance) and
/// returns running stats updated as `(1-momentum)*old + momentum*batch`
/// (running variance uses the unbiased estimate). Eval mode normalizes with
/// the provided running statistics. The affine transform is applied last.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<BatchNormOut<S>> {
    let [b, c, h, w] = x.shape() else {
        return Err(Error::InvalidArgument(format!(
            "batchnorm2d expects [B,C,H,W], got {:?}",
            x.shape()
        )));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                lhs: vec![c],
                rhs: t.shape().to_vec(),
            });
        }
        let _ = name;
    }
    let n = b * h * w;
    if training && n < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm2d training requires B*H*W >= 2, got {n}"
        )));
    }
    let eps_s = S::from_f64(eps);
    let hw = h * w;

    // per-channel statistics used for normalization
    let (mean, var) = if training {
        let inv_n = S::ONE / S::from_f64(n as f64);
        let mut mean = vec![S::ZERO; c];
        let mut var = vec![S::ZERO; c];
        for ci in 0..c {
            let mut acc = S::ZERO;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for &v in &x.data()[base..base + hw] {
                    acc += v;
                }
            }
            let mu = acc * inv_n;
            let mut acc2 = S::ZERO;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for &v in &x.data()[base..base + hw] {
                    let d = v - mu;
                    acc2 += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = acc2 * inv_n;
        }
        (mean, var)
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec())
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps_s).sqrt()).collect();
    let mut out = vec![S::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let (g, bt, mu, istd) = (gamma.data()[ci], beta.data()[ci], mean[ci], inv_std[ci]);
            for i in 0..hw {
                out[base + i] = g * (x.data()[base + i] - mu) * istd + bt;
            }
        }
    }
    let mut output = Tensor::new(x.shape().to_vec(), out);

    let updated_running = if training {
        let m = S::from_f64(momentum);
        let one_m = S::ONE - m;
        // unbiased variance for the running estimate
        let unbias = S::from_f64(n as f64 / (n as f64 - 1.0));
        let new_mean: Vec<S> = running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(&o, &bm)| one_m * o + m * bm)
            .collect();
        let new_var: Vec<S> = running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(&o, &bv)| one_m * o + m * bv * unbias)
            .collect();
        Some((Tensor::new(vec![c], new_mean), Tensor::new(vec![c], new_var)))
    } else {
        None
    };

    let (x_node, g_node, b_node) = (x.node, gamma.node, beta.node);
    if tape.is_recording() && (x_node.is_some() || g_node.is_some() || b_node.is_some()) {
        let x_saved = x.detach();
        let gamma_saved = gamma.detach();
        let mean_saved = mean.clone();
        let inv_std_saved = inv_std.clone();
        let node = tape.push(
            "batchnorm2d",
            output.shape(),
            vec![x_node, g_node, b_node],
            Box::new(move |grad| {
                let hw = h * w;
                let n_s = S::from_f64((b * hw) as f64);
                let xhat_at = |bi: usize, ci: usize, i: usize| {
                    (x_saved.data()[(bi * c + ci) * hw + i] - mean_saved[ci]) * inv_std_saved[ci]
                };
                // per-channel sums of dy and dy*xhat
                let mut sum_dy = vec![S::ZERO; c];
                let mut sum_dy_xh = vec![S::ZERO; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            let dy = grad.data()[base + i];
                            sum_dy[ci] += dy;
                            sum_dy_xh[ci] += dy * xhat_at(bi, ci, i);
                        }
                    }
                }
                let gx = x_node.map(|_| {
                    let mut dx = vec![S::ZERO; x_saved.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let scale = gamma_saved.data()[ci] * inv_std_saved[ci];
                            for i in 0..hw {
                                let dy = grad.data()[base + i];
                                dx[base + i] = if training {
                                    scale
                                        * (dy
                                            - sum_dy[ci] / n_s
                                            - xhat_at(bi, ci, i) * sum_dy_xh[ci] / n_s)
                                } else {
                                    scale * dy
                                };
                            }
                        }
                    }
                    Tensor::new(x_saved.shape().to_vec(), dx)
                });
                let gg = g_node.map(|_| Tensor::new(vec![c], sum_dy_xh.clone()));
                let gb = b_node.map(|_| Tensor::new(vec![c], sum_dy.clone()));
                vec![gx, gg, gb]
            }),
        );
        output = output.with_node(node);
    }
    Ok(BatchNormOut {
        output,
        updated_running,
    })
}
