//! Exact multi-head self-attention and non-overlapping local window attention.
//!
//! Window attention partitions the token grid into `(Hg/wh) * (Wg/ww)`
//! windows, runs full attention independently inside each, and merges back in
//! raster order. There is no window shifting and no relative position bias:
//! the parallel convolution branch of the cells carries position information
//! and inter-window exchange instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, Slot, SlotMut};
use crate::rng::SplitMix64;
use crate::tensor::{ops, Scalar, Tape, Tensor};

/// Attention logit scaling. `PerHead` is the standard `1/sqrt(D/h)`;
/// `FullDim` is the literal `1/sqrt(D)` variant, kept switchable for A/B runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    #[default]
    PerHead,
    FullDim,
}

/// Which attention a cell runs: full attention over all tokens, or attention
/// inside non-overlapping square windows of the given side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Full,
    Window(usize),
}

/// Non-overlapping window geometry over a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub wh: usize,
    pub ww: usize,
}

impl WindowSpec {
    pub fn square(w: usize) -> Self {
        Self { wh: w, ww: w }
    }

    /// Strict divisibility: callers must size inputs so grids split evenly.
    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.wh == 0 || self.ww == 0 || !grid.0.is_multiple_of(self.wh) || !grid.1.is_multiple_of(self.ww) {
            return Err(Error::InvalidArgument(format!(
                "window {}x{} does not divide token grid {}x{}; adjust the input size",
                self.wh, self.ww, grid.0, grid.1
            )));
        }
        Ok(())
    }
}

/// Post-softmax attention weights captured for analysis, with the geometry
/// needed to turn them into pixel distances.
#[derive(Debug, Clone)]
pub struct AttentionStats<S: Scalar> {
    /// `[G, h, T, T]` row-stochastic weights; `G` is the batch size for full
    /// attention or batch x windows for windowed attention.
    pub weights: Tensor<S>,
    pub heads: usize,
    /// Token grid the weights live on.
    pub grid: (usize, usize),
    /// `Some((wh, ww))` when `weights` holds per-window attention.
    pub window: Option<(usize, usize)>,
    /// Pixels per token-grid step at this layer.
    pub stride_px: f64,
    /// Whether token 0 of each row is a class token (excluded from spatial
    /// metrics).
    pub includes_class_token: bool,
    /// Human-readable layer label for reports.
    pub label: String,
}

/// Multi-head self-attention with rectangular projections `D_in -> D`.
#[derive(Debug)]
pub struct MultiHeadAttention<S: Scalar> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub heads: usize,
    pub scale: AttnScale,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(
        din: usize,
        d: usize,
        heads: usize,
        scale: AttnScale,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(din, d, true, rng),
            wk: Linear::new(din, d, true, rng),
            wv: Linear::new(din, d, true, rng),
            wo: Linear::new(d, d, true, rng),
            heads,
            scale,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.wo.out_features()
    }

    fn logit_scale(&self) -> S {
        let d = self.out_dim();
        let denom = match self.scale {
            AttnScale::PerHead => (d / self.heads) as f64,
            AttnScale::FullDim => d as f64,
        };
        S::from_f64(1.0 / denom.sqrt())
    }

    /// Full attention over `[B, N, D_in]` tokens. Optionally returns the
    /// post-softmax weights `[B, h, N, N]` (detached).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        tokens: &Tensor<S>,
        capture_stats: bool,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let [b, n, din] = tokens.shape() else {
            return Err(Error::InvalidArgument(format!(
                "mhsa expects [B,N,D_in], got {:?}",
                tokens.shape()
            )));
        };
        let (b, n, _din) = (*b, *n, *din);
        let d = self.out_dim();
        let h = self.heads;
        let dh = d / h;

        let split = |tape: &mut Tape<S>, t: &Tensor<S>| -> Result<Tensor<S>> {
            let t = ops::reshape(tape, t, &[b, n, h, dh])?;
            ops::permute(tape, &t, &[0, 2, 1, 3]) // [B, h, N, dh]
        };
        let q_proj = self.wq.forward(tape, tokens)?;
        let k_proj = self.wk.forward(tape, tokens)?;
        let v_proj = self.wv.forward(tape, tokens)?;
        let q = split(tape, &q_proj)?;
        let k = split(tape, &k_proj)?;
        let v = split(tape, &v_proj)?;

        let q = ops::scale(tape, &q, self.logit_scale());
        let kt = ops::permute(tape, &k, &[0, 1, 3, 2])?; // [B, h, dh, N]
        let logits = ops::matmul(tape, &q, &kt)?; // [B, h, N, N]
        let attn = ops::softmax(tape, &logits, 3)?;
        let stats = capture_stats.then(|| attn.detach());

        let ctx = ops::matmul(tape, &attn, &v)?; // [B, h, N, dh]
        let ctx = ops::permute(tape, &ctx, &[0, 2, 1, 3])?;
        let ctx = ops::reshape(tape, &ctx, &[b, n, d])?;
        Ok((self.wo.forward(tape, &ctx)?, stats))
    }

    /// Window attention over a `[B, Hg, Wg, D_in]` token grid: independent
    /// full attention inside each window, merged back in raster order.
    /// Captured weights have shape `[B*nW, h, wh*ww, wh*ww]`.
    pub fn window_forward(
        &self,
        tape: &mut Tape<S>,
        fmap: &Tensor<S>,
        win: WindowSpec,
        capture_stats: bool,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let [b, hg, wg, din] = fmap.shape() else {
            return Err(Error::InvalidArgument(format!(
                "window_attention expects [B,Hg,Wg,D_in], got {:?}",
                fmap.shape()
            )));
        };
        let (b, hg, wg, din) = (*b, *hg, *wg, *din);
        win.validate((hg, wg))?;
        let (nh, nw) = (hg / win.wh, wg / win.ww);

        let t = ops::reshape(tape, fmap, &[b, nh, win.wh, nw, win.ww, din])?;
        let t = ops::permute(tape, &t, &[0, 1, 3, 2, 4, 5])?;
        let t = ops::reshape(tape, &t, &[b * nh * nw, win.wh * win.ww, din])?;

        let (out, stats) = self.forward(tape, &t, capture_stats)?;

        let d = self.out_dim();
        let out = ops::reshape(tape, &out, &[b, nh, nw, win.wh, win.ww, d])?;
        let out = ops::permute(tape, &out, &[0, 1, 3, 2, 4, 5])?;
        let out = ops::reshape(tape, &out, &[b, hg, wg, d])?;
        Ok((out, stats))
    }
}

impl<S: Scalar> Module<S> for MultiHeadAttention<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
    }
}
