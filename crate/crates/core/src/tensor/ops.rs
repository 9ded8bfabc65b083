//! Differentiable tensor operations.
//!
//! Every op takes `&mut Tape<S>` and registers a backward closure when the
//! tape is recording and at least one input is traced. Reduction orders are
//! fixed (row-major, batch-sequential accumulation) so identical inputs give
//! bit-identical outputs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{row_major_strides, Scalar, Tape, Tensor};

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

/// Per-axis element strides of `b` when broadcast against `a_shape`
/// (right-aligned; 0 where `b` is missing the axis or has extent 1).
fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let b_strides = row_major_strides(b_shape);
    let offset = a_shape.len() - b_shape.len();
    let mut out = vec![0usize; a_shape.len()];
    for (i, &ad) in a_shape.iter().enumerate() {
        if i < offset {
            continue;
        }
        let bd = b_shape[i - offset];
        if bd == ad {
            out[i] = b_strides[i - offset];
        } else if bd == 1 {
            out[i] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sum `t` down to `target` shape (inverse of broadcasting `target` up to `t`).
pub(crate) fn reduce_to_shape<S: Scalar>(t: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if t.shape() == target {
        return t.detach();
    }
    let strides = broadcast_strides(t.shape(), target)
        .expect("reduce_to_shape: target is not broadcast-compatible");
    let mut out = vec![S::ZERO; target.iter().product()];
    let shape = t.shape();
    let mut coords = vec![0usize; shape.len()];
    for &v in t.data() {
        let mut idx = 0usize;
        for (c, s) in coords.iter().zip(&strides) {
            idx += c * s;
        }
        out[idx] += v;
        // odometer increment
        for ax in (0..shape.len()).rev() {
            coords[ax] += 1;
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
    Tensor::new(target.to_vec(), out)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

/// Untraced elementwise add of same-shape tensors (gradient accumulation).
pub(crate) fn add_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape(), "add_raw shape mismatch");
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Pointwise `a (op) b`. `b` must broadcast to `a` over trailing dimensions:
/// the result always has `a`'s shape.
pub fn elementwise<S: Scalar>(
    tape: &mut Tape<S>,
    op: BinaryOp,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    };
    let Some(bstrides) = broadcast_strides(a.shape(), b.shape()) else {
        return Err(Error::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    };

    let a_shape = a.shape().to_vec();
    let mut out = Vec::with_capacity(a.len());
    if b.shape() == a.shape() {
        // fast path: same shape
        for (&x, &y) in a.data().iter().zip(b.data()) {
            out.push(apply(op, x, y));
        }
    } else if !b.is_empty() && a_shape.ends_with(b.shape()) {
        // fast path: b is a contiguous trailing block (e.g. a [D] bias)
        let bl = b.len();
        for (i, &x) in a.data().iter().enumerate() {
            out.push(apply(op, x, b.data()[i % bl]));
        }
    } else {
        let mut coords = vec![0usize; a_shape.len()];
        for &x in a.data() {
            let mut bi = 0usize;
            for (c, s) in coords.iter().zip(&bstrides) {
                bi += c * s;
            }
            out.push(apply(op, x, b.data()[bi]));
            for ax in (0..a_shape.len()).rev() {
                coords[ax] += 1;
                if coords[ax] < a_shape[ax] {
                    break;
                }
                coords[ax] = 0;
            }
        }
    }
    let mut result = Tensor::new(a_shape, out);

    let (a_node, b_node) = (a.node, b.node);
    if tape.is_recording() && (a_node.is_some() || b_node.is_some()) {
        let a_saved = a.detach();
        let b_saved = b.detach();
        let b_shape = b.shape().to_vec();
        let node = tape.push(
            name,
            result.shape(),
            vec![a_node, b_node],
            Box::new(move |grad| {
                let ga = a_node.map(|_| match op {
                    BinaryOp::Add | BinaryOp::Sub => grad.detach(),
                    BinaryOp::Mul => {
                        let mut t = Tape::inference();
                        elementwise(&mut t, BinaryOp::Mul, grad, &b_saved).unwrap()
                    }
                });
                let gb = b_node.map(|_| {
                    let full = match op {
                        BinaryOp::Add => grad.detach(),
                        BinaryOp::Sub => neg_raw(grad),
                        BinaryOp::Mul => {
                            let mut t = Tape::inference();
                            elementwise(&mut t, BinaryOp::Mul, grad, &a_saved).unwrap()
                        }
                    };
                    reduce_to_shape(&full, &b_shape)
                });
                vec![ga, gb]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

fn apply<S: Scalar>(op: BinaryOp, x: S, y: S) -> S {
    match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    }
}

fn neg_raw<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| -x).collect())
}

pub fn add<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    elementwise(tape, BinaryOp::Add, a, b)
}

pub fn sub<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    elementwise(tape, BinaryOp::Sub, a, b)
}

pub fn mul<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    elementwise(tape, BinaryOp::Mul, a, b)
}

/// `t * c` for a constant scalar.
pub fn scale<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<S>, c: S) -> Tensor<S> {
    let data = t.data().iter().map(|&x| x * c).collect();
    let mut out = Tensor::new(t.shape().to_vec(), data);
    let t_node = t.node;
    let node = tape.push(
        "scale",
        out.shape(),
        vec![t_node],
        Box::new(move |grad| {
            let mut tape = Tape::inference();
            vec![Some(scale(&mut tape, grad, c))]
        }),
    );
    out = out.with_node(node);
    out
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

struct MatmulPlan {
    out_shape: Vec<usize>,
    batch: Vec<usize>,
    m: usize,
    k: usize,
    p: usize,
    a_bstrides: Vec<usize>,
    b_bstrides: Vec<usize>,
}

fn matmul_plan(a_shape: &[usize], b_shape: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a_shape.to_vec(),
        rhs: b_shape.to_vec(),
    };
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (k2, p) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let rank = a_batch.len().max(b_batch.len());
    let mut batch = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i + a_batch.len() >= rank { a_batch[i + a_batch.len() - rank] } else { 1 };
        let bd = if i + b_batch.len() >= rank { b_batch[i + b_batch.len() - rank] } else { 1 };
        batch[i] = match (ad, bd) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch()),
        };
    }
    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(p);

    // strides over the broadcast batch dims, in matrix units
    let stride_of = |dims: &[usize]| {
        let mut strides = vec![0usize; rank];
        let mut acc = 1usize;
        for i in (0..dims.len()).rev() {
            let pos = i + rank - dims.len();
            if dims[i] != 1 {
                strides[pos] = acc;
            }
            acc *= dims[i];
        }
        strides
    };
    Ok(MatmulPlan {
        out_shape,
        batch,
        m,
        k,
        p,
        a_bstrides: stride_of(a_batch),
        b_bstrides: stride_of(b_batch),
    })
}

fn for_each_batch(plan: &MatmulPlan, mut f: impl FnMut(usize, usize, usize)) {
    let nb: usize = plan.batch.iter().product::<usize>().max(1);
    let mut coords = vec![0usize; plan.batch.len()];
    for ob in 0..nb {
        let mut ai = 0;
        let mut bi = 0;
        for ((c, sa), sb) in coords.iter().zip(&plan.a_bstrides).zip(&plan.b_bstrides) {
            ai += c * sa;
            bi += c * sb;
        }
        f(ob, ai, bi);
        for ax in (0..coords.len()).rev() {
            coords[ax] += 1;
            if coords[ax] < plan.batch[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
}

/// `C = A @ B` on row-major slices.
fn gemm_rm<S: Scalar>(m: usize, k: usize, p: usize, a: &[S], b: &[S], c: &mut [S]) {
    unsafe {
        S::gemm(
            m,
            k,
            p,
            S::ONE,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            p as isize,
            1,
            S::ZERO,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

/// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]` with
/// numpy-style broadcasting over the leading batch dimensions.
///
/// A rank-2 right operand (the linear-layer case) collapses into a single
/// GEMM over all rows; equal batch shapes run one GEMM per batch element in
/// parallel (outputs are disjoint, so the result is deterministic).
pub fn matmul<S: Scalar>(tape: &mut Tape<S>, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, p) = (plan.m, plan.k, plan.p);
    let nb: usize = plan.batch.iter().product::<usize>().max(1);
    let mut out = vec![S::ZERO; plan.out_shape.iter().product()];

    let flat_rhs = b.rank() == 2;
    if flat_rhs {
        gemm_rm(nb * m, k, p, a.data(), b.data(), &mut out);
    } else if plan.a_bstrides == plan.b_bstrides && !plan.a_bstrides.contains(&0) || nb == 1 {
        out.par_chunks_mut(m * p).enumerate().for_each(|(ob, c)| {
            gemm_rm(
                m,
                k,
                p,
                &a.data()[ob * m * k..(ob + 1) * m * k],
                &b.data()[ob * k * p..(ob + 1) * k * p],
                c,
            );
        });
    } else {
        for_each_batch(&plan, |ob, ai, bi| {
            gemm_rm(
                m,
                k,
                p,
                &a.data()[ai * m * k..(ai + 1) * m * k],
                &b.data()[bi * k * p..(bi + 1) * k * p],
                &mut out[ob * m * p..(ob + 1) * m * p],
            );
        });
    }
    let mut result = Tensor::new(plan.out_shape.clone(), out);

    let (a_node, b_node) = (a.node, b.node);
    if tape.is_recording() && (a_node.is_some() || b_node.is_some()) {
        let a_saved = a.detach();
        let b_saved = b.detach();
        let node = tape.push(
            "matmul",
            result.shape(),
            vec![a_node, b_node],
            Box::new(move |grad| {
                let plan = matmul_plan(a_saved.shape(), b_saved.shape()).unwrap();
                let (m, k, p) = (plan.m, plan.k, plan.p);
                let nb: usize = plan.batch.iter().product::<usize>().max(1);
                let flat_rhs = b_saved.rank() == 2;
                let same_batch =
                    plan.a_bstrides == plan.b_bstrides && !plan.a_bstrides.contains(&0) || nb == 1;

                // dA = dY @ B^T
                let ga = a_node.map(|_| {
                    let mut da = vec![S::ZERO; a_saved.len()];
                    let bt_gemm = |dy: &[S], bmat: &[S], dst: &mut [S]| unsafe {
                        S::gemm(
                            dy.len() / p,
                            p,
                            k,
                            S::ONE,
                            dy.as_ptr(),
                            p as isize,
                            1,
                            bmat.as_ptr(),
                            1,
                            p as isize,
                            S::ONE,
                            dst.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    };
                    if flat_rhs {
                        bt_gemm(grad.data(), b_saved.data(), &mut da);
                    } else if same_batch {
                        da.par_chunks_mut(m * k).enumerate().for_each(|(ob, dst)| {
                            bt_gemm(
                                &grad.data()[ob * m * p..(ob + 1) * m * p],
                                &b_saved.data()[ob * k * p..(ob + 1) * k * p],
                                dst,
                            );
                        });
                    } else {
                        // broadcast inputs accumulate sequentially in batch
                        // order (deterministic)
                        for_each_batch(&plan, |ob, ai, bi| {
                            bt_gemm(
                                &grad.data()[ob * m * p..(ob + 1) * m * p],
                                &b_saved.data()[bi * k * p..(bi + 1) * k * p],
                                &mut da[ai * m * k..(ai + 1) * m * k],
                            );
                        });
                    }
                    Tensor::new(a_saved.shape().to_vec(), da)
                });

                // dB = A^T @ dY
                let gb = b_node.map(|_| {
                    let mut db = vec![S::ZERO; b_saved.len()];
                    let at_gemm = |amat: &[S], dy: &[S], dst: &mut [S]| unsafe {
                        S::gemm(
                            k,
                            amat.len() / k,
                            p,
                            S::ONE,
                            amat.as_ptr(),
                            1,
                            k as isize,
                            dy.as_ptr(),
                            p as isize,
                            1,
                            S::ONE,
                            dst.as_mut_ptr(),
                            p as isize,
                            1,
                        );
                    };
                    if flat_rhs {
                        at_gemm(a_saved.data(), grad.data(), &mut db);
                    } else if same_batch {
                        db.par_chunks_mut(k * p).enumerate().for_each(|(ob, dst)| {
                            at_gemm(
                                &a_saved.data()[ob * m * k..(ob + 1) * m * k],
                                &grad.data()[ob * m * p..(ob + 1) * m * p],
                                dst,
                            );
                        });
                    } else {
                        for_each_batch(&plan, |ob, ai, bi| {
                            at_gemm(
                                &a_saved.data()[ai * m * k..(ai + 1) * m * k],
                                &grad.data()[ob * m * p..(ob + 1) * m * p],
                                &mut db[bi * k * p..(bi + 1) * k * p],
                            );
                        });
                    }
                    Tensor::new(b_saved.shape().to_vec(), db)
                });
                vec![ga, gb]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// softmax / gelu
// ---------------------------------------------------------------------------

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

/// Numerically stable softmax along `axis` (max-subtraction).
pub fn softmax<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(Error::AxisOutOfRange {
            op: "softmax",
            axis,
            rank: x.rank(),
        });
    }
    let (outer, lane, inner) = lane_dims(x.shape(), axis);
    let mut out = vec![S::ZERO; x.len()];
    let data = x.data();
    if inner == 1 {
        // contiguous lanes (softmax over the last axis, the attention case)
        for (dst, src) in out.chunks_exact_mut(lane).zip(data.chunks_exact(lane)) {
            let mut max = src[0];
            for &v in &src[1..] {
                max = max.maximum(v);
            }
            let mut sum = S::ZERO;
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *d = e;
                sum += e;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
    } else {
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * lane * inner + l * inner + i;
                let mut max = data[at(0)];
                for l in 1..lane {
                    max = max.maximum(data[at(l)]);
                }
                let mut sum = S::ZERO;
                for l in 0..lane {
                    let e = (data[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[at(l)] = out[at(l)] / sum;
                }
            }
        }
    }
    let mut result = Tensor::new(x.shape().to_vec(), out);

    let x_node = x.node;
    if tape.is_recording() && x_node.is_some() {
        let y = result.detach();
        let node = tape.push(
            "softmax",
            result.shape(),
            vec![x_node],
            Box::new(move |grad| {
                // dx = y * (g - sum(g * y) along axis)
                let (outer, lane, inner) = lane_dims(y.shape(), axis);
                let mut dx = vec![S::ZERO; y.len()];
                if inner == 1 {
                    for ((dst, yv), gv) in dx
                        .chunks_exact_mut(lane)
                        .zip(y.data().chunks_exact(lane))
                        .zip(grad.data().chunks_exact(lane))
                    {
                        let mut dot = S::ZERO;
                        for (a, b) in gv.iter().zip(yv) {
                            dot += *a * *b;
                        }
                        for ((d, &yi), &gi) in dst.iter_mut().zip(yv).zip(gv) {
                            *d = yi * (gi - dot);
                        }
                    }
                } else {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * lane * inner + l * inner + i;
                            let mut dot = S::ZERO;
                            for l in 0..lane {
                                dot += grad.data()[at(l)] * y.data()[at(l)];
                            }
                            for l in 0..lane {
                                dx[at(l)] = y.data()[at(l)] * (grad.data()[at(l)] - dot);
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), dx))]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF evaluated through erf.
pub fn gelu<S: Scalar>(tape: &mut Tape<S>, x: &Tensor<S>) -> Tensor<S> {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let data = x
        .data()
        .iter()
        .map(|&v| v * half * (S::ONE + (v * inv_sqrt2).erf()))
        .collect();
    let mut out = Tensor::new(x.shape().to_vec(), data);

    let x_node = x.node;
    if tape.is_recording() && x_node.is_some() {
        let saved = x.detach();
        let node = tape.push(
            "gelu",
            out.shape(),
            vec![x_node],
            Box::new(move |grad| {
                let inv_sqrt_tau = S::from_f64(1.0 / (std::f64::consts::TAU).sqrt());
                let half = S::from_f64(0.5);
                let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let dx = saved
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| {
                        let phi_cdf = half * (S::ONE + (v * inv_sqrt2).erf());
                        let pdf = (-(v * v) * half).exp() * inv_sqrt_tau;
                        g * (phi_cdf + v * pdf)
                    })
                    .collect();
                vec![Some(Tensor::new(saved.shape().to_vec(), dx))]
            }),
        );
        out = out.with_node(node);
    }
    out
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

pub fn reshape<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
    let mut out = t.reshaped(shape.to_vec())?;
    let t_node = t.node;
    let old_shape = t.shape().to_vec();
    let node = tape.push(
        "reshape",
        out.shape(),
        vec![t_node],
        Box::new(move |grad| vec![Some(grad.reshaped(old_shape.clone()).unwrap())]),
    );
    out = out.with_node(node);
    Ok(out)
}

fn permute_raw<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = t.strides();
    let mut out = vec![S::ZERO; t.len()];
    if t.is_empty() {
        return Tensor::new(out_shape, out);
    }
    // when the innermost axis stays innermost, whole rows stay contiguous
    if *axes.last().unwrap() == t.rank() - 1 {
        let run = *in_shape.last().unwrap();
        let outer_axes = &axes[..axes.len() - 1];
        let mut coords = vec![0usize; outer_axes.len()];
        for chunk in out.chunks_exact_mut(run) {
            let mut src = 0usize;
            for (c, &ax) in coords.iter().zip(outer_axes) {
                src += c * in_strides[ax];
            }
            chunk.copy_from_slice(&t.data()[src..src + run]);
            for ax in (0..coords.len()).rev() {
                coords[ax] += 1;
                if coords[ax] < out_shape[ax] {
                    break;
                }
                coords[ax] = 0;
            }
        }
        return Tensor::new(out_shape, out);
    }
    let mut coords = vec![0usize; out_shape.len()];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for (c, &ax) in coords.iter().zip(axes) {
            src += c * in_strides[ax];
        }
        *slot = t.data()[src];
        for ax in (0..out_shape.len()).rev() {
            coords[ax] += 1;
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Reorder axes; `axes` must be a permutation of `0..rank`.
pub fn permute<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let mut seen = vec![false; t.rank()];
    if axes.len() != t.rank() || axes.iter().any(|&a| a >= t.rank() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::InvalidArgument(format!(
            "permute: {:?} is not a permutation of 0..{}",
            axes,
            t.rank()
        )));
    }
    let mut out = permute_raw(t, axes);
    let t_node = t.node;
    let axes_owned = axes.to_vec();
    let node = tape.push(
        "permute",
        out.shape(),
        vec![t_node],
        Box::new(move |grad| {
            let mut inverse = vec![0usize; axes_owned.len()];
            for (i, &a) in axes_owned.iter().enumerate() {
                inverse[a] = i;
            }
            vec![Some(permute_raw(grad, &inverse))]
        }),
    );
    out = out.with_node(node);
    Ok(out)
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<S: Scalar>(tape: &mut Tape<S>, parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::AxisOutOfRange {
            op: "concat",
            axis,
            rank: first.rank(),
        });
    }
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != first.rank()
            || p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;

    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut result = Tensor::new(out_shape, out);

    let nodes: Vec<Option<usize>> = parts.iter().map(|p| p.node).collect();
    if tape.is_recording() && nodes.iter().any(Option::is_some) {
        let part_axis: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let nodes_saved = nodes.clone();
        let node = tape.push(
            "concat",
            result.shape(),
            nodes,
            Box::new(move |grad| {
                let mut tape = Tape::inference();
                let mut start = 0;
                nodes_saved
                    .iter()
                    .zip(&part_axis)
                    .map(|(n, &len)| {
                        let piece = n
                            .map(|_| narrow(&mut tape, grad, axis, start, len).unwrap());
                        start += len;
                        piece
                    })
                    .collect()
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn narrow<S: Scalar>(
    tape: &mut Tape<S>,
    t: &Tensor<S>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<S>> {
    if axis >= t.rank() {
        return Err(Error::AxisOutOfRange {
            op: "narrow",
            axis,
            rank: t.rank(),
        });
    }
    if start + len > t.shape()[axis] {
        return Err(Error::InvalidArgument(format!(
            "narrow: [{start}, {}) exceeds extent {} on axis {axis}",
            start + len,
            t.shape()[axis]
        )));
    }
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = len;
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let full_block = t.shape()[axis] * inner;
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        let base = o * full_block + start * inner;
        out.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut result = Tensor::new(out_shape, out);

    let t_node = t.node;
    if tape.is_recording() && t_node.is_some() {
        let full_shape = t.shape().to_vec();
        let node = tape.push(
            "narrow",
            result.shape(),
            vec![t_node],
            Box::new(move |grad| {
                let mut dx = vec![S::ZERO; full_shape.iter().product()];
                let inner: usize = full_shape[axis + 1..].iter().product();
                let outer: usize = full_shape[..axis].iter().product();
                let full_block = full_shape[axis] * inner;
                let slice_block = len * inner;
                for o in 0..outer {
                    let dst = o * full_block + start * inner;
                    dx[dst..dst + slice_block]
                        .copy_from_slice(&grad.data()[o * slice_block..(o + 1) * slice_block]);
                }
                vec![Some(Tensor::new(full_shape.clone(), dx))]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

/// Materialize `t` broadcast up to `shape` (right-aligned).
pub fn broadcast_to<S: Scalar>(
    tape: &mut Tape<S>,
    t: &Tensor<S>,
    shape: &[usize],
) -> Result<Tensor<S>> {
    let Some(strides) = broadcast_strides(shape, t.shape()) else {
        return Err(Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: shape.to_vec(),
            rhs: t.shape().to_vec(),
        });
    };
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut coords = vec![0usize; shape.len()];
    for _ in 0..total {
        let mut src = 0usize;
        for (c, s) in coords.iter().zip(&strides) {
            src += c * s;
        }
        out.push(t.data()[src]);
        for ax in (0..shape.len()).rev() {
            coords[ax] += 1;
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
    let mut result = Tensor::new(shape.to_vec(), out);

    let t_node = t.node;
    if tape.is_recording() && t_node.is_some() {
        let t_shape = t.shape().to_vec();
        let node = tape.push(
            "broadcast_to",
            result.shape(),
            vec![t_node],
            Box::new(move |grad| vec![Some(reduce_to_shape(grad, &t_shape))]),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Sum of all elements, as a rank-0 tensor.
pub fn sum_all<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<S>) -> Tensor<S> {
    let mut acc = S::ZERO;
    for &v in t.data() {
        acc += v;
    }
    let mut out = Tensor::scalar(acc);
    let t_node = t.node;
    if tape.is_recording() && t_node.is_some() {
        let shape = t.shape().to_vec();
        let node = tape.push(
            "sum",
            out.shape(),
            vec![t_node],
            Box::new(move |grad| vec![Some(Tensor::full(&shape, grad.item()))]),
        );
        out = out.with_node(node);
    }
    out
}

pub fn mean_all<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<S>) -> Tensor<S> {
    let n = S::from_f64(t.len() as f64);
    let s = sum_all(tape, t);
    scale(tape, &s, S::ONE / n)
}

/// Sum over one axis (the axis is removed).
pub fn sum_axis<S: Scalar>(tape: &mut Tape<S>, t: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= t.rank() {
        return Err(Error::AxisOutOfRange {
            op: "sum_axis",
            axis,
            rank: t.rank(),
        });
    }
    let (outer, lane, inner) = lane_dims(t.shape(), axis);
    let mut out_shape = t.shape().to_vec();
    out_shape.remove(axis);
    let mut out = vec![S::ZERO; outer * inner];
    for o in 0..outer {
        for l in 0..lane {
            for i in 0..inner {
                out[o * inner + i] += t.data()[o * lane * inner + l * inner + i];
            }
        }
    }
    let mut result = Tensor::new(out_shape, out);

    let t_node = t.node;
    if tape.is_recording() && t_node.is_some() {
        let in_shape = t.shape().to_vec();
        let node = tape.push(
            "sum_axis",
            result.shape(),
            vec![t_node],
            Box::new(move |grad| {
                let (outer, lane, inner) = lane_dims(&in_shape, axis);
                let mut dx = vec![S::ZERO; in_shape.iter().product()];
                for o in 0..outer {
                    for l in 0..lane {
                        for i in 0..inner {
                            dx[o * lane * inner + l * inner + i] = grad.data()[o * inner + i];
                        }
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), dx))]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// gather / scatter over the token axis
// ---------------------------------------------------------------------------

/// Gather rows of `[B, N, D]` tokens: per-sample index lists select `[B, K, D]`.
pub fn select_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    t: &Tensor<S>,
    indices: &[Vec<usize>],
) -> Result<Tensor<S>> {
    let [b, n, d] = t.shape() else {
        return Err(Error::InvalidArgument(format!(
            "select_tokens expects [B,N,D], got {:?}",
            t.shape()
        )));
    };
    let (b, n, d) = (*b, *n, *d);
    if indices.len() != b {
        return Err(Error::InvalidArgument(format!(
            "select_tokens: {} index lists for batch {b}",
            indices.len()
        )));
    }
    let k = indices.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(b * k * d);
    for (bi, idx) in indices.iter().enumerate() {
        if idx.len() != k {
            return Err(Error::InvalidArgument(
                "select_tokens: ragged index lists".into(),
            ));
        }
        for &j in idx {
            if j >= n {
                return Err(Error::InvalidArgument(format!(
                    "select_tokens: index {j} out of range for {n} tokens"
                )));
            }
            let base = (bi * n + j) * d;
            out.extend_from_slice(&t.data()[base..base + d]);
        }
    }
    let mut result = Tensor::new(vec![b, k, d], out);

    let t_node = t.node;
    if tape.is_recording() && t_node.is_some() {
        let idx_saved: Vec<Vec<usize>> = indices.to_vec();
        let node = tape.push(
            "select_tokens",
            result.shape(),
            vec![t_node],
            Box::new(move |grad| {
                let mut dx = vec![S::ZERO; b * n * d];
                for (bi, idx) in idx_saved.iter().enumerate() {
                    for (kj, &j) in idx.iter().enumerate() {
                        let src = (bi * k + kj) * d;
                        let dst = (bi * n + j) * d;
                        for c in 0..d {
                            dx[dst + c] += grad.data()[src + c];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, n, d], dx))]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

/// Inverse of `select_tokens`: place `[B, K, D]` rows at per-sample positions
/// in an `[B, N, D]` output whose remaining rows are all `fill` (a `[D]`
/// vector, typically a learned mask token).
pub fn scatter_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    kept: &Tensor<S>,
    fill: &Tensor<S>,
    indices: &[Vec<usize>],
    n: usize,
) -> Result<Tensor<S>> {
    let [b, k, d] = kept.shape() else {
        return Err(Error::InvalidArgument(format!(
            "scatter_tokens expects [B,K,D], got {:?}",
            kept.shape()
        )));
    };
    let (b, k, d) = (*b, *k, *d);
    if fill.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "scatter_tokens",
            lhs: kept.shape().to_vec(),
            rhs: fill.shape().to_vec(),
        });
    }
    if indices.len() != b || indices.iter().any(|ix| ix.len() != k) {
        return Err(Error::InvalidArgument(
            "scatter_tokens: index lists must be [B][K]".into(),
        ));
    }
    let mut out = vec![S::ZERO; b * n * d];
    for bi in 0..b {
        for j in 0..n {
            out[(bi * n + j) * d..(bi * n + j + 1) * d].copy_from_slice(fill.data());
        }
        for (kj, &j) in indices[bi].iter().enumerate() {
            if j >= n {
                return Err(Error::InvalidArgument(format!(
                    "scatter_tokens: index {j} out of range for {n} tokens"
                )));
            }
            let src = (bi * k + kj) * d;
            out[(bi * n + j) * d..(bi * n + j + 1) * d]
                .copy_from_slice(&kept.data()[src..src + d]);
        }
    }
    let mut result = Tensor::new(vec![b, n, d], out);

    let (kept_node, fill_node) = (kept.node, fill.node);
    if tape.is_recording() && (kept_node.is_some() || fill_node.is_some()) {
        let idx_saved: Vec<Vec<usize>> = indices.to_vec();
        let node = tape.push(
            "scatter_tokens",
            result.shape(),
            vec![kept_node, fill_node],
            Box::new(move |grad| {
                let gk = kept_node.map(|_| {
                    let mut dk = vec![S::ZERO; b * k * d];
                    for (bi, idx) in idx_saved.iter().enumerate() {
                        for (kj, &j) in idx.iter().enumerate() {
                            let src = (bi * n + j) * d;
                            let dst = (bi * k + kj) * d;
                            dk[dst..dst + d].copy_from_slice(&grad.data()[src..src + d]);
                        }
                    }
                    Tensor::new(vec![b, k, d], dk)
                });
                let gf = fill_node.map(|_| {
                    let mut df = vec![S::ZERO; d];
                    for (bi, idx) in idx_saved.iter().enumerate() {
                        let mut kept_rows = vec![false; n];
                        for &j in idx {
                            kept_rows[j] = true;
                        }
                        for (j, &is_kept) in kept_rows.iter().enumerate() {
                            if !is_kept {
                                let base = (bi * n + j) * d;
                                for (acc, &g) in df.iter_mut().zip(&grad.data()[base..base + d]) {
                                    *acc += g;
                                }
                            }
                        }
                    }
                    Tensor::new(vec![d], df)
                });
                vec![gk, gf]
            }),
        );
        result = result.with_node(node);
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// classification loss
// ---------------------------------------------------------------------------

/// Mean cross-entropy of `[B, C]` logits against integer labels. Uses the
/// log-sum-exp trick; backward is the fused `(softmax - onehot) / B`.
pub fn cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>> {
    let [b, c] = logits.shape() else {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy expects [B,C] logits, got {:?}",
            logits.shape()
        )));
    };
    let (b, c) = (*b, *c);
    if labels.len() != b {
        return Err(Error::CountMismatch {
            images: b,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut total = S::ZERO;
    for (bi, &label) in labels.iter().enumerate() {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let mut max = row[0];
        for &v in row {
            max = max.maximum(v);
        }
        let mut sum = S::ZERO;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + S::from_f64(sum.to_f64().ln());
        total += lse - row[label];
    }
    let mut out = Tensor::scalar(total / S::from_f64(b as f64));

    let l_node = logits.node;
    if tape.is_recording() && l_node.is_some() {
        let saved = logits.detach();
        let labels_saved = labels.to_vec();
        let node = tape.push(
            "cross_entropy",
            out.shape(),
            vec![l_node],
            Box::new(move |grad| {
                let g = grad.item();
                let inv_b = S::ONE / S::from_f64(b as f64);
                let mut dx = vec![S::ZERO; b * c];
                for (bi, &label) in labels_saved.iter().enumerate() {
                    let row = &saved.data()[bi * c..(bi + 1) * c];
                    let mut max = row[0];
                    for &v in row {
                        max = max.maximum(v);
                    }
                    let mut sum = S::ZERO;
                    for &v in row {
                        sum += (v - max).exp();
                    }
                    for (ci, &v) in row.iter().enumerate() {
                        let p = (v - max).exp() / sum;
                        let delta = if ci == label { S::ONE } else { S::ZERO };
                        dx[bi * c + ci] = g * inv_b * (p - delta);
                    }
                }
                vec![Some(Tensor::new(vec![b, c], dx))]
            }),
        );
        out = out.with_node(node);
    }
    Ok(out)
}

/// Index of the max logit per row (untraced).
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = *logits.shape().last().expect("argmax on rank-0");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
