//! The two building blocks: reduction cells and normal cells.
//!
//! A reduction cell downsamples spatially while fusing three parallel paths:
//! a pyramid of strided dilated convolutions (PRM) feeding attention, and a
//! three-layer convolution stack (PCM) matching the same reduction, summed
//! before a residual FFN. A normal cell keeps token count and width, fusing
//! attention over all tokens with a grouped-convolution PCM over the spatial
//! tokens only.

use crate::attention::{AttentionKind, MultiHeadAttention, WindowSpec};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Slot, SlotMut};
use crate::rng::SplitMix64;
use crate::tensor::{ops, ConvSpec, Scalar, Tape, Tensor};

/// `[B, C, H, W] -> [B, H*W, C]` in row-major raster order.
pub fn img2seq<S: Scalar>(tape: &mut Tape<S>, fmap: &Tensor<S>) -> Result<Tensor<S>> {
    let [b, c, h, w] = fmap.shape() else {
        return Err(Error::InvalidArgument(format!(
            "img2seq expects [B,C,H,W], got {:?}",
            fmap.shape()
        )));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    let t = ops::permute(tape, fmap, &[0, 2, 3, 1])?;
    ops::reshape(tape, &t, &[b, h * w, c])
}

/// Inverse of [`img2seq`] for a known grid.
pub fn seq2img<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: &Tensor<S>,
    grid: (usize, usize),
) -> Result<Tensor<S>> {
    let [b, n, c] = tokens.shape() else {
        return Err(Error::InvalidArgument(format!(
            "seq2img expects [B,N,C], got {:?}",
            tokens.shape()
        )));
    };
    let (b, n, c) = (*b, *n, *c);
    if n != grid.0 * grid.1 {
        return Err(Error::ShapeMismatch {
            op: "seq2img",
            lhs: vec![n],
            rhs: vec![grid.0, grid.1],
        });
    }
    let t = ops::reshape(tape, tokens, &[b, grid.0, grid.1, c])?;
    ops::permute(tape, &t, &[0, 3, 1, 2])
}

/// Pre-norm residual FFN: `t + W2 gelu(W1 LN(t))`.
#[derive(Debug)]
pub struct FeedForward<S: Scalar> {
    pub norm: LayerNorm<S>,
    pub w1: Linear<S>,
    pub w2: Linear<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn new(dim: usize, ratio: f64, rng: &mut SplitMix64) -> Self {
        let hidden = (ratio * dim as f64).round() as usize;
        Self {
            norm: LayerNorm::new(dim),
            w1: Linear::new(dim, hidden, true, rng),
            w2: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, t: &Tensor<S>) -> Result<Tensor<S>> {
        if t.shape().last() != Some(&self.w1.in_features()) {
            return Err(Error::ShapeMismatch {
                op: "ffn",
                lhs: t.shape().to_vec(),
                rhs: vec![self.w1.in_features()],
            });
        }
        let x = self.norm.forward(tape, t)?;
        let x = self.w1.forward(tape, &x)?;
        let x = ops::gelu(tape, &x);
        let x = self.w2.forward(tape, &x)?;
        ops::add(tape, t, &x)
    }
}

impl<S: Scalar> Module<S> for FeedForward<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.w1.visit(&join(prefix, "w1"), f);
        self.w2.visit(&join(prefix, "w2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.w1.visit_mut(&join(prefix, "w1"), f);
        self.w2.visit_mut(&join(prefix, "w2"), f);
    }
}

/// Pyramid reduction module: parallel strided convolutions with distinct
/// dilation rates, channel-concatenated in ascending-dilation order.
#[derive(Debug)]
pub struct PyramidReduction<S: Scalar> {
    pub branches: Vec<Conv2d<S>>,
    pub dilations: Vec<usize>,
}

impl<S: Scalar> PyramidReduction<S> {
    pub fn new(
        cin: usize,
        branch_width: usize,
        kernel: usize,
        stride: usize,
        dilations: &[usize],
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::Config("PRM requires a nonempty dilation set".into()));
        }
        let mut sorted = dilations.to_vec();
        sorted.sort_unstable();
        let branches = sorted
            .iter()
            .map(|&d| Conv2d::new(cin, branch_width, ConvSpec::same(kernel, stride, d), rng))
            .collect();
        Ok(Self {
            branches,
            dilations: sorted,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.branches.len() * self.branches[0].out_channels()
    }

    pub fn forward(&self, tape: &mut Tape<S>, f: &Tensor<S>) -> Result<Tensor<S>> {
        let outs: Vec<Tensor<S>> = self
            .branches
            .iter()
            .map(|conv| conv.forward(tape, f))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<S>> = outs.iter().collect();
        ops::concat(tape, &refs, 1)
    }
}

impl<S: Scalar> Module<S> for PyramidReduction<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{i}")), f);
        }
    }
}

/// Parallel convolutional module: exactly three conv+BN stages with GELU
/// between them and none after the last, so the fusion sum mixes a
/// linear-scale conv feature with the attention feature.
#[derive(Debug)]
pub struct ParallelConv<S: Scalar> {
    pub convs: Vec<Conv2d<S>>,
    pub bns: Vec<BatchNorm2d<S>>,
}

impl<S: Scalar> ParallelConv<S> {
    pub fn new(
        cin: usize,
        hidden: usize,
        cout: usize,
        strides: [usize; 3],
        kernel: usize,
        groups: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let widths = [(cin, hidden), (hidden, hidden), (hidden, cout)];
        for (i, o) in widths {
            if i % groups != 0 || o % groups != 0 {
                return Err(Error::Config(format!(
                    "PCM channels {i}->{o} not divisible by groups {groups}"
                )));
            }
        }
        let convs = widths
            .iter()
            .zip(strides)
            .map(|(&(i, o), s)| {
                Conv2d::new(i, o, ConvSpec::same(kernel, s, 1).with_groups(groups), rng)
            })
            .collect::<Vec<_>>();
        let bns = widths.iter().map(|&(_, o)| BatchNorm2d::new(o)).collect();
        Ok(Self { convs, bns })
    }

    pub fn reduction(&self) -> usize {
        self.convs.iter().map(|c| c.spec.stride.0).product()
    }

    pub fn kernel(&self) -> usize {
        self.convs[0].spec.kernel.0
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let mut t = x.detach().with_node(x.node);
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            t = conv.forward(tape, &t)?;
            t = bn.forward(tape, &t, training)?;
            if i + 1 < self.convs.len() {
                t = ops::gelu(tape, &t);
            }
        }
        Ok(t)
    }
}

impl<S: Scalar> Module<S> for ParallelConv<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        for (i, (c, b)) in self.convs.iter().zip(&self.bns).enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
            b.visit(&join(prefix, &format!("bn{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        for (i, (c, b)) in self.convs.iter_mut().zip(self.bns.iter_mut()).enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
            b.visit_mut(&join(prefix, &format!("bn{i}")), f);
        }
    }
}

/// Reduction cell: `f -> PRM -> attention`, fused early with `PCM(f)`, then a
/// residual FFN, reshaped back to a feature map at `1/r` resolution.
#[derive(Debug)]
pub struct ReductionCell<S: Scalar> {
    pub prm: PyramidReduction<S>,
    pub norm: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub kind: AttentionKind,
    pub pcm: ParallelConv<S>,
    pub ffn: FeedForward<S>,
    pub reduction: usize,
}

pub struct RcBuild<'a> {
    pub cin: usize,
    pub dout: usize,
    pub reduction: usize,
    pub kernel: usize,
    pub dilations: &'a [usize],
    pub heads: usize,
    pub kind: AttentionKind,
    pub scale: crate::attention::AttnScale,
    pub pcm_hidden: usize,
    pub ffn_ratio: f64,
}

impl<S: Scalar> ReductionCell<S> {
    pub fn new(build: &RcBuild<'_>, rng: &mut SplitMix64) -> Result<Self> {
        let ns = build.dilations.len();
        if ns == 0 {
            return Err(Error::Config("reduction cell needs >= 1 dilation".into()));
        }
        // Branch width ~ Dout/|S| so the concat width tracks the stage
        // embedding; rectangular attention projections absorb the remainder
        // when |S| does not divide Dout.
        let branch_width = build.dout.div_ceil(ns);
        let concat = ns * branch_width;
        let strides = match build.reduction {
            4 => [2, 2, 1],
            2 => [2, 1, 1],
            1 => [1, 1, 1],
            r => {
                return Err(Error::Config(format!(
                    "unsupported reduction ratio {r} (expected 1, 2 or 4)"
                )))
            }
        };
        Ok(Self {
            prm: PyramidReduction::new(
                build.cin,
                branch_width,
                build.kernel,
                build.reduction,
                build.dilations,
                rng,
            )?,
            norm: LayerNorm::new(concat),
            attn: MultiHeadAttention::new(concat, build.dout, build.heads, build.scale, rng)?,
            kind: build.kind,
            pcm: ParallelConv::new(
                build.cin,
                build.pcm_hidden,
                build.dout,
                strides,
                3,
                1,
                rng,
            )?,
            ffn: FeedForward::new(build.dout, build.ffn_ratio, rng),
            reduction: build.reduction,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.attn.out_dim()
    }

    /// Returns the reduced feature map and, when requested, the captured
    /// attention weights.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        f: &Tensor<S>,
        training: bool,
        capture_stats: bool,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let ms = self.prm.forward(tape, f)?;
        let [b, _m, ho, wo] = ms.shape() else { unreachable!() };
        let (b, ho, wo) = (*b, *ho, *wo);
        let d = self.out_dim();

        let (global, stats) = match self.kind {
            AttentionKind::Full => {
                let tokens = img2seq(tape, &ms)?;
                let normed = self.norm.forward(tape, &tokens)?;
                self.attn.forward(tape, &normed, capture_stats)?
            }
            AttentionKind::Window(w) => {
                let grid_tokens = ops::permute(tape, &ms, &[0, 2, 3, 1])?;
                let normed = self.norm.forward(tape, &grid_tokens)?;
                let (out, stats) = self.attn.window_forward(
                    tape,
                    &normed,
                    WindowSpec::square(w),
                    capture_stats,
                )?;
                (ops::reshape(tape, &out, &[b, ho * wo, d])?, stats)
            }
        };

        let local = self.pcm.forward(tape, f, training)?;
        let local_tokens = img2seq(tape, &local)?;
        let fused = ops::add(tape, &global, &local_tokens)?;
        let out = self.ffn.forward(tape, &fused)?;
        Ok((seq2img(tape, &out, (ho, wo))?, stats))
    }

    fn out_dim(&self) -> usize {
        self.attn.out_dim()
    }
}

impl<S: Scalar> Module<S> for ReductionCell<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.prm.visit(&join(prefix, "prm"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.pcm.visit(&join(prefix, "pcm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.prm.visit_mut(&join(prefix, "prm"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.pcm.visit_mut(&join(prefix, "pcm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// How a normal cell's PCM sees its tokens: laid out on a spatial grid
/// (kernel 3 convolution) or as a bare token list (1x1 kernels only; the
/// masked-pretraining mode where spatial structure is gone).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenGrid {
    Spatial(usize, usize),
    Flat,
}

/// Normal cell: token count and width preserved. Attention runs over all
/// tokens (class token included); the PCM path runs over spatial tokens only,
/// with a zero row re-inserted at the class position before the element-wise
/// fusion `t_g + t_l`.
#[derive(Debug)]
pub struct NormalCell<S: Scalar> {
    pub norm: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub kind: AttentionKind,
    pub pcm: ParallelConv<S>,
    pub ffn: FeedForward<S>,
}

impl<S: Scalar> NormalCell<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        heads: usize,
        kind: AttentionKind,
        scale: crate::attention::AttnScale,
        groups: usize,
        pcm_kernel: usize,
        ffn_ratio: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, dim, heads, scale, rng)?,
            kind,
            pcm: ParallelConv::new(dim, dim, dim, [1, 1, 1], pcm_kernel, groups, rng)?,
            ffn: FeedForward::new(dim, ffn_ratio, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.out_dim()
    }

    pub fn pcm_kernel(&self) -> usize {
        self.pcm.kernel()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        tokens: &Tensor<S>,
        has_class_token: bool,
        grid: TokenGrid,
        training: bool,
        capture_stats: bool,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let [b, t_total, d] = tokens.shape() else {
            return Err(Error::InvalidArgument(format!(
                "normal cell expects [B,N,D] tokens, got {:?}",
                tokens.shape()
            )));
        };
        let (b, t_total, d) = (*b, *t_total, *d);
        let n_spatial = t_total - usize::from(has_class_token);
        if let TokenGrid::Spatial(hg, wg) = grid {
            if n_spatial != hg * wg {
                return Err(Error::ShapeMismatch {
                    op: "normal_cell",
                    lhs: vec![n_spatial],
                    rhs: vec![hg, wg],
                });
            }
        }

        // global branch: attention over every token, class token included
        let (global, stats) = match self.kind {
            AttentionKind::Full => {
                let normed = self.norm.forward(tape, tokens)?;
                self.attn.forward(tape, &normed, capture_stats)?
            }
            AttentionKind::Window(w) => {
                let TokenGrid::Spatial(hg, wg) = grid else {
                    return Err(Error::Config(
                        "window attention requires a spatial token grid".into(),
                    ));
                };
                if has_class_token {
                    return Err(Error::Config(
                        "window attention operates on pure spatial grids (no class token)".into(),
                    ));
                }
                let gridded = ops::reshape(tape, tokens, &[b, hg, wg, d])?;
                let normed = self.norm.forward(tape, &gridded)?;
                let (out, stats) = self.attn.window_forward(
                    tape,
                    &normed,
                    WindowSpec::square(w),
                    capture_stats,
                )?;
                (ops::reshape(tape, &out, &[b, t_total, d])?, stats)
            }
        };

        // local branch: PCM over spatial tokens only
        let spatial = if has_class_token {
            ops::narrow(tape, tokens, 1, 1, n_spatial)?
        } else {
            tokens.detach().with_node(tokens.node)
        };
        let fmap = match grid {
            TokenGrid::Spatial(hg, wg) => seq2img(tape, &spatial, (hg, wg))?,
            TokenGrid::Flat => {
                if self.pcm_kernel() != 1 {
                    return Err(Error::Config(
                        "flat token layout requires 1x1 PCM kernels".into(),
                    ));
                }
                let t = ops::permute(tape, &spatial, &[0, 2, 1])?;
                ops::reshape(tape, &t, &[b, d, n_spatial, 1])?
            }
        };
        let local = self.pcm.forward(tape, &fmap, training)?;
        let local_tokens = match grid {
            TokenGrid::Spatial(_, _) => img2seq(tape, &local)?,
            TokenGrid::Flat => {
                let t = ops::reshape(tape, &local, &[b, d, n_spatial])?;
                ops::permute(tape, &t, &[0, 2, 1])?
            }
        };
        let local_full = if has_class_token {
            // class token has no spatial connections: zero row at index 0
            let zero_row = Tensor::zeros(&[b, 1, d]);
            ops::concat(tape, &[&zero_row, &local_tokens], 1)?
        } else {
            local_tokens
        };

        let fused = ops::add(tape, &global, &local_full)?;
        Ok((self.ffn.forward(tape, &fused)?, stats))
    }
}

impl<S: Scalar> Module<S> for NormalCell<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.pcm.visit(&join(prefix, "pcm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.pcm.visit_mut(&join(prefix, "pcm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}
