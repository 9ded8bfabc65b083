//! Behavioral oracles for attention and the two cell types: direct
//! evaluation of the attention formula, permutation equivariance, window
//! locality, and the ablation probes that reduce cells to plain blocks.

use vitae_core::attention::{AttentionKind, AttnScale, MultiHeadAttention, WindowSpec};
use vitae_core::cells::{img2seq, NormalCell, RcBuild, ReductionCell, TokenGrid};
use vitae_core::nn::{Module, SlotMut};
use vitae_core::rng::SplitMix64;
use vitae_core::tensor::{ops, Tape, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Zero every parameter whose path starts with `prefix`.
fn zero_params<M: Module<f64>>(module: &mut M, prefix: &str) {
    module.visit_mut("", &mut |name, slot| {
        if let SlotMut::Param(p) = slot {
            if name.starts_with(prefix) {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    });
}

// ---------------------------------------------------------------------------
// multi-head self-attention
// ---------------------------------------------------------------------------

/// Single token: softmax over one key is 1, so the output is `v W_O + b`.
#[test]
fn single_token_attention_is_value_projection() {
    let mut rng = SplitMix64::new(1);
    let attn = MultiHeadAttention::<f64>::new(6, 6, 2, AttnScale::PerHead, &mut rng).unwrap();
    let x = randn(&[1, 1, 6], 2);
    let mut tape = Tape::inference();
    let (out, _) = attn.forward(&mut tape, &x, false).unwrap();

    let v = attn.wv.forward(&mut tape, &x).unwrap();
    let expect = attn.wo.forward(&mut tape, &v).unwrap();
    for (a, e) in out.data().iter().zip(expect.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

/// Head-count 1 against a direct evaluation of
/// `softmax(QK^T / sqrt(D)) V W_O` written out longhand.
#[test]
#[allow(clippy::needless_range_loop)]
fn single_head_matches_direct_formula() {
    let (n, d) = (4, 6);
    let mut rng = SplitMix64::new(3);
    let attn = MultiHeadAttention::<f64>::new(d, d, 1, AttnScale::PerHead, &mut rng).unwrap();
    let x = randn(&[1, n, d], 4);
    let mut tape = Tape::inference();
    let (out, _) = attn.forward(&mut tape, &x, false).unwrap();

    // longhand: per-row projections, logits, softmax, weighted values
    let lin = |w: &vitae_core::nn::Linear<f64>, row: &[f64]| -> Vec<f64> {
        let wt = &w.weight.value;
        let b = w.bias.as_ref().unwrap();
        (0..d)
            .map(|j| {
                b.value.data()[j]
                    + row
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * wt.data()[i * d + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let rows: Vec<&[f64]> = (0..n).map(|i| &x.data()[i * d..(i + 1) * d]).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.wq, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.wk, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| lin(&attn.wv, r)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| scale * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let ctx: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|j| exps[j] / z * v[j][c]).sum())
            .collect();
        let expect = lin(&attn.wo, &ctx);
        for (a, e) in out.data()[i * d..(i + 1) * d].iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10, "{a} vs {e}");
        }
    }
}

/// No positional term inside attention: permuting tokens permutes outputs.
#[test]
fn attention_is_permutation_equivariant() {
    let (n, d) = (5, 8);
    let mut rng = SplitMix64::new(5);
    let attn = MultiHeadAttention::<f64>::new(d, d, 2, AttnScale::PerHead, &mut rng).unwrap();
    let x = randn(&[1, n, d], 6);
    let perm = [3usize, 0, 4, 1, 2];
    let mut permuted = vec![0.0; n * d];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[dst * d..(dst + 1) * d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
    }
    let xp = Tensor::new(vec![1, n, d], permuted);

    let mut tape = Tape::inference();
    let (y, _) = attn.forward(&mut tape, &x, false).unwrap();
    let (yp, _) = attn.forward(&mut tape, &xp, false).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..d {
            let a = yp.data()[dst * d + c];
            let e = y.data()[src * d + c];
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn captured_weights_are_row_stochastic() {
    let mut rng = SplitMix64::new(7);
    let attn = MultiHeadAttention::<f64>::new(8, 8, 2, AttnScale::PerHead, &mut rng).unwrap();
    let x = randn(&[2, 6, 8], 8);
    let mut tape = Tape::inference();
    let (_, stats) = attn.forward(&mut tape, &x, true).unwrap();
    let w = stats.unwrap();
    assert_eq!(w.shape(), &[2, 2, 6, 6]);
    for row in w.data().chunks(6) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

/// Adding a constant to every attention logit leaves the output unchanged
/// (softmax shift invariance), checked through the softmax op itself.
#[test]
fn logit_shift_invariance() {
    let mut tape = Tape::inference();
    let logits = randn(&[2, 4, 4], 9);
    let base = ops::softmax(&mut tape, &logits, 2).unwrap();
    let shifted_in = ops::add(&mut tape, &logits, &Tensor::full(&[1], 7.5f64)).unwrap();
    let shifted = ops::softmax(&mut tape, &shifted_in, 2).unwrap();
    for (a, b) in base.data().iter().zip(shifted.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

// ---------------------------------------------------------------------------
// window attention
// ---------------------------------------------------------------------------

/// One window covering the whole grid degenerates to full attention.
#[test]
fn full_window_equals_global_attention() {
    for seed in [10u64, 11, 12, 13, 14] {
        let (hg, wg, d) = (4, 4, 8);
        let mut rng = SplitMix64::new(seed);
        let attn = MultiHeadAttention::<f64>::new(d, d, 2, AttnScale::PerHead, &mut rng).unwrap();
        let grid = randn(&[1, hg, wg, d], seed ^ 1);
        let mut tape = Tape::inference();
        let (windowed, _) = attn
            .window_forward(&mut tape, &grid, WindowSpec { wh: hg, ww: wg }, false)
            .unwrap();
        let flat = grid.reshaped(vec![1, hg * wg, d]).unwrap();
        let (full, _) = attn.forward(&mut tape, &flat, false).unwrap();
        for (a, e) in windowed.data().iter().zip(full.data()) {
            assert!((a - e).abs() < 1e-6, "seed {seed}: {a} vs {e}");
        }
    }
}

/// The attention-path Jacobian between distinct windows is identically zero:
/// backpropagating from one window produces exactly zero gradient on tokens
/// of the other windows.
#[test]
fn cross_window_jacobian_is_exactly_zero() {
    let (hg, wg, d, w) = (4, 4, 6, 2);
    let mut rng = SplitMix64::new(15);
    let attn = MultiHeadAttention::<f64>::new(d, d, 1, AttnScale::PerHead, &mut rng).unwrap();
    let grid = randn(&[1, hg, wg, d], 16);

    let mut tape = Tape::recording();
    let traced = tape.watch_tensor(&grid);
    let (out, _) = attn
        .window_forward(&mut tape, &traced, WindowSpec::square(w), false)
        .unwrap();
    // loss reads only the top-left window's outputs
    let rows = ops::narrow(&mut tape, &out, 1, 0, w).unwrap();
    let window = ops::narrow(&mut tape, &rows, 2, 0, w).unwrap();
    let loss = ops::sum_all(&mut tape, &window);
    tape.backward(&loss).unwrap();
    let g = tape.grad_of(&traced).unwrap();

    for y in 0..hg {
        for x in 0..wg {
            let inside = y < w && x < w;
            let row = &g.data()[(y * wg + x) * d..(y * wg + x + 1) * d];
            if inside {
                assert!(row.iter().any(|&v| v != 0.0), "window token ({y},{x}) got no gradient");
            } else {
                assert!(
                    row.iter().all(|&v| v == 0.0),
                    "token ({y},{x}) outside the window leaked gradient {row:?}"
                );
            }
        }
    }
}

#[test]
fn indivisible_window_grid_is_error() {
    let mut rng = SplitMix64::new(17);
    let attn = MultiHeadAttention::<f64>::new(4, 4, 1, AttnScale::PerHead, &mut rng).unwrap();
    let grid = randn(&[1, 7, 7, 4], 18);
    let mut tape = Tape::inference();
    let err = attn
        .window_forward(&mut tape, &grid, WindowSpec::square(2), false)
        .unwrap_err();
    assert!(err.to_string().contains("adjust the input size"));
}

/// The literal `1/sqrt(D)` scaling variant changes logits but still yields a
/// row-stochastic, shape-preserving result (A/B switch sanity).
#[test]
fn full_dim_scale_variant_runs() {
    let mut rng = SplitMix64::new(19);
    let a = MultiHeadAttention::<f64>::new(8, 8, 2, AttnScale::PerHead, &mut rng).unwrap();
    let mut rng2 = SplitMix64::new(19);
    let b = MultiHeadAttention::<f64>::new(8, 8, 2, AttnScale::FullDim, &mut rng2).unwrap();
    let x = randn(&[1, 5, 8], 20);
    let mut tape = Tape::inference();
    let (ya, _) = a.forward(&mut tape, &x, false).unwrap();
    let (yb, _) = b.forward(&mut tape, &x, false).unwrap();
    assert_eq!(ya.shape(), yb.shape());
    assert!(ya.data().iter().zip(yb.data()).any(|(p, q)| (p - q).abs() > 1e-9));
}

// ---------------------------------------------------------------------------
// reduction cell
// ---------------------------------------------------------------------------

fn rc_build<'a>(
    cin: usize,
    dout: usize,
    reduction: usize,
    kernel: usize,
    dilations: &'a [usize],
    pcm_hidden: usize,
) -> RcBuild<'a> {
    RcBuild {
        cin,
        dout,
        reduction,
        kernel,
        dilations,
        heads: 1,
        kind: AttentionKind::Full,
        scale: AttnScale::PerHead,
        pcm_hidden,
        ffn_ratio: 2.0,
    }
}

/// First reduction cell of the tiny preset family at full input size:
/// 224x224x3 with S=[1,2,3,4], r=4, branch width 16 concatenates to
/// 56x56x64.
#[test]
fn prm_first_stage_extents() {
    let mut rng = SplitMix64::new(21);
    let rc = ReductionCell::<f32>::new(&rc_build(3, 64, 4, 7, &[1, 2, 3, 4], 16), &mut rng).unwrap();
    assert_eq!(rc.prm.branches.len(), 4);
    assert_eq!(rc.prm.branches[0].weight.value.shape(), &[16, 3, 7, 7]);
    let mut xr = SplitMix64::new(22);
    let x = Tensor::<f32>::randn(&[1, 3, 224, 224], 1.0, &mut xr);
    let mut tape = Tape::inference();
    let ms = rc.prm.forward(&mut tape, &x).unwrap();
    assert_eq!(ms.shape(), &[1, 64, 56, 56]);
    let (out, _) = rc.forward(&mut tape, &x, false, false).unwrap();
    assert_eq!(out.shape(), &[1, 64, 56, 56]);
}

/// A single unit branch (|S|=1, k=1, r=1, weight 1) passes the input through.
#[test]
fn prm_identity_configuration() {
    let mut rng = SplitMix64::new(23);
    let mut rc = ReductionCell::<f64>::new(&rc_build(1, 1, 1, 1, &[1], 1), &mut rng).unwrap();
    rc.prm.branches[0].weight.value = Tensor::ones(&[1, 1, 1, 1]);
    if let Some(b) = &mut rc.prm.branches[0].bias {
        b.value = Tensor::zeros(&[1]);
    }
    let x = randn(&[1, 1, 4, 4], 24);
    let mut tape = Tape::inference();
    let out = rc.prm.forward(&mut tape, &x).unwrap();
    assert_eq!(out.data(), x.data());
}

#[test]
fn empty_dilation_set_is_error() {
    let mut rng = SplitMix64::new(25);
    assert!(ReductionCell::<f64>::new(&rc_build(3, 8, 2, 3, &[], 4), &mut rng).is_err());
}

/// PRM concat width always satisfies |S| * branch_width.
#[test]
fn prm_concat_width_relation() {
    let mut rng = SplitMix64::new(26);
    for (dout, ns) in [(64usize, 4usize), (64, 3), (256, 2), (128, 3)] {
        let dil: Vec<usize> = (1..=ns).collect();
        let rc =
            ReductionCell::<f64>::new(&rc_build(4, dout, 2, 3, &dil, dout / 4), &mut rng).unwrap();
        let cb = dout.div_ceil(ns);
        assert_eq!(rc.prm.out_channels(), ns * cb);
        assert_eq!(rc.norm.gamma.value.shape(), &[ns * cb]);
        assert_eq!(rc.attn.wq.weight.value.shape(), &[ns * cb, dout]);
    }
}

/// PCM spatial plans: stride product equals the declared cell reduction.
#[test]
fn pcm_stride_schedules() {
    let mut rng = SplitMix64::new(27);
    let rc4 = ReductionCell::<f64>::new(&rc_build(3, 8, 4, 7, &[1, 2], 4), &mut rng).unwrap();
    assert_eq!(rc4.pcm.reduction(), 4);
    let rc2 = ReductionCell::<f64>::new(&rc_build(3, 8, 2, 3, &[1, 2], 4), &mut rng).unwrap();
    assert_eq!(rc2.pcm.reduction(), 2);
    let x = randn(&[1, 3, 16, 16], 28);
    let mut tape = Tape::inference();
    assert_eq!(rc4.pcm.forward(&mut tape, &x, false).unwrap().shape(), &[1, 8, 4, 4]);
    assert_eq!(rc2.pcm.forward(&mut tape, &x, false).unwrap().shape(), &[1, 8, 8, 8]);
}

/// Grouped conv parameter count follows Cout*(Cin/g)*k^2 + Cout per layer.
#[test]
fn grouped_conv_parameter_count_closed_form() {
    let mut rng = SplitMix64::new(29);
    let nc = NormalCell::<f64>::new(16, 2, AttentionKind::Full, AttnScale::PerHead, 4, 3, 2.0, &mut rng)
        .unwrap();
    for conv in &nc.pcm.convs {
        let w = conv.weight.value.len();
        let b = conv.bias.as_ref().unwrap().value.len();
        assert_eq!(w + b, 16 * (16 / 4) * 9 + 16);
    }
}

/// Zero FFN weights reduce the residual block to identity.
#[test]
fn zero_ffn_is_identity() {
    let mut rng = SplitMix64::new(30);
    let mut ffn = vitae_core::cells::FeedForward::<f64>::new(8, 4.0, &mut rng);
    assert_eq!(ffn.w1.weight.value.shape(), &[8, 32]); // hidden = rho * D
    zero_params(&mut ffn, "w1");
    zero_params(&mut ffn, "w2");
    let x = randn(&[2, 5, 8], 31);
    let mut tape = Tape::inference();
    let y = ffn.forward(&mut tape, &x).unwrap();
    assert_eq!(y.data(), x.data());
}

/// Reduction cells chain 224 -> 56 -> 28 -> 14 at reductions 4, 2, 2.
#[test]
fn rc_chain_halves_then_quarters() {
    let mut rng = SplitMix64::new(32);
    let rc1 = ReductionCell::<f32>::new(&rc_build(3, 16, 4, 7, &[1, 2, 3, 4], 8), &mut rng).unwrap();
    let rc2 = ReductionCell::<f32>::new(&rc_build(16, 16, 2, 3, &[1, 2, 3], 8), &mut rng).unwrap();
    let rc3 = ReductionCell::<f32>::new(&rc_build(16, 32, 2, 3, &[1, 2], 8), &mut rng).unwrap();
    let mut xr = SplitMix64::new(33);
    let x = Tensor::<f32>::randn(&[1, 3, 224, 224], 0.5, &mut xr);
    let mut tape = Tape::inference();
    let (f1, _) = rc1.forward(&mut tape, &x, false, false).unwrap();
    assert_eq!(f1.shape(), &[1, 16, 56, 56]);
    let (f2, _) = rc2.forward(&mut tape, &f1, false, false).unwrap();
    assert_eq!(f2.shape(), &[1, 16, 28, 28]);
    let (f3, _) = rc3.forward(&mut tape, &f2, false, false).unwrap();
    assert_eq!(f3.shape(), &[1, 32, 14, 14]);
}

/// Zeroing the PCM reduces the cell to its attention + FFN path.
#[test]
fn zeroed_pcm_leaves_pure_attention_path() {
    let mut rng = SplitMix64::new(34);
    let mut rc = ReductionCell::<f64>::new(&rc_build(2, 8, 2, 3, &[1, 2], 4), &mut rng).unwrap();
    zero_params(&mut rc, "pcm");
    let x = randn(&[1, 2, 6, 6], 35);
    let mut tape = Tape::inference();
    let (out, _) = rc.forward(&mut tape, &x, false, false).unwrap();

    // reference: PRM -> tokens -> LN -> attention -> FFN (no PCM term)
    let ms = rc.prm.forward(&mut tape, &x).unwrap();
    let tokens = img2seq(&mut tape, &ms).unwrap();
    let normed = rc.norm.forward(&mut tape, &tokens).unwrap();
    let (global, _) = rc.attn.forward(&mut tape, &normed, false).unwrap();
    let reference = rc.ffn.forward(&mut tape, &global).unwrap();
    let out_tokens = img2seq(&mut tape, &out).unwrap();
    for (a, e) in out_tokens.data().iter().zip(reference.data()) {
        assert!((a - e).abs() < 1e-6);
    }
}

/// An odd spatial extent cannot host window attention at the reduced grid.
#[test]
fn window_rc_with_indivisible_reduced_grid_is_error() {
    let mut rng = SplitMix64::new(36);
    let rc = ReductionCell::<f64>::new(
        &RcBuild {
            kind: AttentionKind::Window(2),
            ..rc_build(1, 4, 2, 3, &[1], 2)
        },
        &mut rng,
    )
    .unwrap();
    let x = randn(&[1, 1, 14, 14], 37); // reduces to 7x7, not divisible by 2
    let mut tape = Tape::inference();
    assert!(rc.forward(&mut tape, &x, false, false).is_err());
}

// ---------------------------------------------------------------------------
// normal cell
// ---------------------------------------------------------------------------

#[test]
fn normal_cell_preserves_token_count_and_width() {
    let mut rng = SplitMix64::new(38);
    let nc = NormalCell::<f32>::new(256, 4, AttentionKind::Full, AttnScale::PerHead, 64, 3, 2.0, &mut rng)
        .unwrap();
    let mut xr = SplitMix64::new(39);
    let x = Tensor::<f32>::randn(&[1, 197, 256], 1.0, &mut xr);
    let mut tape = Tape::inference();
    let (y, _) = nc
        .forward(&mut tape, &x, true, TokenGrid::Spatial(14, 14), false, false)
        .unwrap();
    assert_eq!(y.shape(), &[1, 197, 256]);
}

#[test]
fn token_grid_mismatch_is_error() {
    let mut rng = SplitMix64::new(40);
    let nc = NormalCell::<f64>::new(8, 2, AttentionKind::Full, AttnScale::PerHead, 2, 3, 2.0, &mut rng)
        .unwrap();
    let x = randn(&[1, 10, 8], 41);
    let mut tape = Tape::inference();
    assert!(nc
        .forward(&mut tape, &x, false, TokenGrid::Spatial(3, 3), false, false)
        .is_err());
}

/// The class-token output row does not depend on the PCM weights.
#[test]
fn class_row_is_independent_of_pcm() {
    let mut rng = SplitMix64::new(42);
    let mut nc = NormalCell::<f64>::new(8, 2, AttentionKind::Full, AttnScale::PerHead, 2, 3, 2.0, &mut rng)
        .unwrap();
    let x = randn(&[1, 10, 8], 43);
    let mut tape = Tape::inference();
    let (before, _) = nc
        .forward(&mut tape, &x, true, TokenGrid::Spatial(3, 3), false, false)
        .unwrap();
    // perturb every PCM weight
    nc.visit_mut("", &mut |name, slot| {
        if let SlotMut::Param(p) = slot {
            if name.starts_with("pcm") {
                let bumped: Vec<f64> = p.value.data().iter().map(|&v| v + 0.37).collect();
                p.value = Tensor::new(p.value.shape().to_vec(), bumped);
            }
        }
    });
    let (after, _) = nc
        .forward(&mut tape, &x, true, TokenGrid::Spatial(3, 3), false, false)
        .unwrap();
    let d = 8;
    for c in 0..d {
        assert_eq!(before.data()[c], after.data()[c], "class row changed at {c}");
    }
    assert!(
        before.data()[d..].iter().zip(&after.data()[d..]).any(|(a, b)| a != b),
        "spatial rows should feel the PCM perturbation"
    );
}

/// With PCM and FFN zeroed and one head, the cell output equals the direct
/// attention formula over the layer-normed tokens.
#[test]
fn zeroed_cell_matches_direct_attention_formula() {
    let (n, d) = (9, 6);
    let mut rng = SplitMix64::new(44);
    let mut nc = NormalCell::<f64>::new(d, 1, AttentionKind::Full, AttnScale::PerHead, 1, 3, 2.0, &mut rng)
        .unwrap();
    zero_params(&mut nc, "pcm");
    zero_params(&mut nc, "ffn.w1");
    zero_params(&mut nc, "ffn.w2");
    let x = randn(&[1, n, d], 45);
    let mut tape = Tape::inference();
    let (out, _) = nc
        .forward(&mut tape, &x, false, TokenGrid::Spatial(3, 3), false, false)
        .unwrap();
    let normed = nc.norm.forward(&mut tape, &x).unwrap();
    let (expect, _) = nc.attn.forward(&mut tape, &normed, false).unwrap();
    for (a, e) in out.data().iter().zip(expect.data()) {
        assert!((a - e).abs() < 1e-10, "{a} vs {e}");
    }
}

/// Window attention on a class-token sequence is rejected.
#[test]
fn windowed_class_token_sequence_is_error() {
    let mut rng = SplitMix64::new(46);
    let nc = NormalCell::<f64>::new(8, 2, AttentionKind::Window(2), AttnScale::PerHead, 2, 3, 2.0, &mut rng)
        .unwrap();
    let x = randn(&[1, 17, 8], 47);
    let mut tape = Tape::inference();
    assert!(nc
        .forward(&mut tape, &x, true, TokenGrid::Spatial(4, 4), false, false)
        .is_err());
}
