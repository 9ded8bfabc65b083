//! 2-D convolution via im2col + GEMM.
//!
//! The column-matrix row order is `(channel, ky, kx)`, matching the row-major
//! `[Cout, Cin/g, kh, kw]` weight layout, so a 1x1 kernel zero-padded to 3x3
//! produces exactly the same accumulation sequence of nonzero terms as the
//! original 1x1 convolution (the kernel-inflation exactness contract).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tape, Tensor};

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    k_rows: usize,
}

fn geometry<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    let [batch, cin, h, w] = input.shape() else {
        return Err(Error::InvalidArgument(format!(
            "conv2d expects input [B,Cin,H,W], got {:?}",
            input.shape()
        )));
    };
    let [cout, wc, kh, kw] = weight.shape() else {
        return Err(Error::InvalidArgument(format!(
            "conv2d expects weight [Cout,Cin/g,kh,kw], got {:?}",
            weight.shape()
        )));
    };
    let (batch, cin, h, w) = (*batch, *cin, *h, *w);
    let (cout, wc, kh, kw) = (*cout, *wc, *kh, *kw);
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d: channels (in {cin}, out {cout}) not divisible by groups {g}"
        )));
    }
    if (kh, kw) != spec.kernel || wc != cin / g {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let (ho, wo) = spec.out_hw(h, w)?;
    Ok(Geometry {
        batch,
        cin,
        h,
        w,
        cout,
        ho,
        wo,
        groups: g,
        cin_g: cin / g,
        cout_g: cout / g,
        k_rows: (cin / g) * kh * kw,
    })
}

/// Fill `cols` (`[cin_g*kh*kw, ho*wo]`, row-major) from one sample's channel
/// group. Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    input: &[S],
    cols: &mut [S],
    geo: &Geometry,
    spec: &ConvSpec,
    group: usize,
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let n_out = geo.ho * geo.wo;
    for c in 0..geo.cin_g {
        let chan = &input[(group * geo.cin_g + c) * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..geo.ho {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    let row_ok = iy >= 0 && (iy as usize) < geo.h;
                    for ox in 0..geo.wo {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        dst[oy * geo.wo + ox] = if row_ok && ix >= 0 && (ix as usize) < geo.w {
                            chan[iy as usize * geo.w + ix as usize]
                        } else {
                            S::ZERO
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back into one sample's channel group.
fn col2im_add<S: Scalar>(
    cols: &[S],
    input_grad: &mut [S],
    geo: &Geometry,
    spec: &ConvSpec,
    group: usize,
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let n_out = geo.ho * geo.wo;
    for c in 0..geo.cin_g {
        let chan =
            &mut input_grad[(group * geo.cin_g + c) * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..geo.ho {
                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                    if iy < 0 || iy as usize >= geo.h {
                        continue;
                    }
                    for ox in 0..geo.wo {
                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                        if ix < 0 || ix as usize >= geo.w {
                            continue;
                        }
                        chan[iy as usize * geo.w + ix as usize] += src[oy * geo.wo + ox];
                    }
                }
            }
        }
    }
}

fn forward_one<S: Scalar>(
    input_b: &[S],
    out_b: &mut [S],
    weight: &[S],
    bias: Option<&[S]>,
    geo: &Geometry,
    spec: &ConvSpec,
    cols: &mut [S],
) {
    let n_out = geo.ho * geo.wo;
    for g in 0..geo.groups {
        im2col(input_b, cols, geo, spec, g);
        unsafe {
            S::gemm(
                geo.cout_g,
                geo.k_rows,
                n_out,
                S::ONE,
                weight.as_ptr().add(g * geo.cout_g * geo.k_rows),
                geo.k_rows as isize,
                1,
                cols.as_ptr(),
                n_out as isize,
                1,
                S::ZERO,
                out_b.as_mut_ptr().add(g * geo.cout_g * n_out),
                n_out as isize,
                1,
            );
        }
    }
    if let Some(bias) = bias {
        for (c, &bv) in bias.iter().enumerate() {
            for v in &mut out_b[c * n_out..(c + 1) * n_out] {
                *v += bv;
            }
        }
    }
}

/// `input [B,Cin,H,W] * weight [Cout,Cin/g,kh,kw] (+bias [Cout])` under `spec`.
///
/// Dilation inserts `d-1` gaps between kernel taps; grouped convolution
/// partitions channels. Output extents follow the ConvSpec formula and a
/// zero-size output is an error.
pub fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: ConvSpec,
) -> Result<Tensor<S>> {
    let geo = geometry(input, weight, &spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![geo.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let n_out = geo.ho * geo.wo;
    let mut out = vec![S::ZERO; geo.batch * geo.cout * n_out];
    let in_sz = geo.cin * geo.h * geo.w;
    let out_sz = geo.cout * n_out;
    out.par_chunks_mut(out_sz)
        .zip(input.data().par_chunks(in_sz))
        .for_each(|(out_b, in_b)| {
            let mut cols = vec![S::ZERO; geo.k_rows * n_out];
            forward_one(
                in_b,
                out_b,
                weight.data(),
                bias.map(Tensor::data),
                &geo,
                &spec,
                &mut cols,
            );
        });
    let mut result = Tensor::new(vec![geo.batch, geo.cout, geo.ho, geo.wo], out);

    let (x_node, w_node, b_node) = (input.node, weight.node, bias.and_then(|b| b.node));
    if tape.is_recording() && (x_node.is_some() || w_node.is_some() || b_node.is_some()) {
        let x_saved = input.detach();
        let w_saved = weight.detach();
        let node = tape.push(
            "conv2d",
            result.shape(),
            vec![x_node, w_node, b_node],
            Box::new(move |grad| {
                let geo = geometry(&x_saved, &w_saved, &spec).unwrap();
                let n_out = geo.ho * geo.wo;
                let in_sz = geo.cin * geo.h * geo.w;
                let out_sz = geo.cout * n_out;

                let gx = x_node.map(|_| {
                    let mut dx = vec![S::ZERO; x_saved.len()];
                    dx.par_chunks_mut(in_sz)
                        .zip(grad.data().par_chunks(out_sz))
                        .for_each(|(dx_b, dy_b)| {
                            let mut cols = vec![S::ZERO; geo.k_rows * n_out];
                            for g in 0..geo.groups {
                                // cols_grad = W_g^T @ dY_g
                                unsafe {
                                    S::gemm(
                                        geo.k_rows,
                                        geo.cout_g,
                                        n_out,
                                        S::ONE,
                                        w_saved
                                            .data()
                                            .as_ptr()
                                            .add(g * geo.cout_g * geo.k_rows),
                                        1,
                                        geo.k_rows as isize,
                                        dy_b.as_ptr().add(g * geo.cout_g * n_out),
                                        n_out as isize,
                                        1,
                                        S::ZERO,
                                        cols.as_mut_ptr(),
                                        n_out as isize,
                                        1,
                                    );
                                }
                                col2im_add(&cols, dx_b, &geo, &spec, g);
                            }
                        });
                    Tensor::new(x_saved.shape().to_vec(), dx)
                });

                let gw = w_node.map(|_| {
                    // dW accumulates over the batch in index order.
                    let mut dw = vec![S::ZERO; w_saved.len()];
                    let mut cols = vec![S::ZERO; geo.k_rows * n_out];
                    for b in 0..geo.batch {
                        let in_b = &x_saved.data()[b * in_sz..(b + 1) * in_sz];
                        let dy_b = &grad.data()[b * out_sz..(b + 1) * out_sz];
                        for g in 0..geo.groups {
                            im2col(in_b, &mut cols, &geo, &spec, g);
                            unsafe {
                                S::gemm(
                                    geo.cout_g,
                                    n_out,
                                    geo.k_rows,
                                    S::ONE,
                                    dy_b.as_ptr().add(g * geo.cout_g * n_out),
                                    n_out as isize,
                                    1,
                                    cols.as_ptr(),
                                    1,
                                    n_out as isize,
                                    S::ONE,
                                    dw.as_mut_ptr().add(g * geo.cout_g * geo.k_rows),
                                    geo.k_rows as isize,
                                    1,
                                );
                            }
                        }
                    }
                    Tensor::new(w_saved.shape().to_vec(), dw)
                });

                let gb = b_node.map(|_| {
                    let mut db = vec![S::ZERO; geo.cout];
                    for b in 0..geo.batch {
                        for (c, acc) in db.iter_mut().enumerate() {
                            let base = b * out_sz + c * n_out;
                            for &v in &grad.data()[base..base + n_out] {
                                *acc += v;
                            }
                        }
                    }
                    Tensor::new(vec![geo.cout], db)
                });

                vec![gx, gw, gb]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}
