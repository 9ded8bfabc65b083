//! Masked-image-modeling pretraining.
//!
//! The pretraining encoder operates on patch tokens (patchify replaces the
//! reduction cells): embed patches, drop a random 75%, run the normal-cell
//! stack with 1x1 PCM kernels (a bare token list has no spatial structure for
//! a 3x3 kernel to use), then decode all positions with learned mask tokens
//! and regress the masked pixels with MSE. After pretraining, 1x1 kernels are
//! zero-padded to 3x3, which preserves the function exactly.

use crate::cells::{FeedForward, NormalCell, TokenGrid};
use crate::checkpoint::{Checkpoint, Entry};
use crate::error::{Error, Result};
use crate::model::{sinusoid_table, ModelConfig};
use crate::nn::{join, LayerNorm, Linear, Module, Param, Slot, SlotMut};
use crate::rng::SplitMix64;
use crate::tensor::{ops, DType, Scalar, Tape, Tensor};

// ---------------------------------------------------------------------------
// masking
// ---------------------------------------------------------------------------

/// Kept/masked token indices for one sample; the two sets are disjoint and
/// cover all `N` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMask {
    pub kept: Vec<usize>,
    pub masked: Vec<usize>,
}

/// Per-sample masking decisions, reproducible from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub per_sample: Vec<SampleMask>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    /// `|masked| = round(ratio * n)` per sample, sampled uniformly without
    /// replacement; samples are independent.
    pub fn generate(batch: usize, n: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "mask ratio must be in [0, 1), got {ratio}"
            )));
        }
        let n_masked = (ratio * n as f64).round() as usize;
        let rng = SplitMix64::new(seed);
        let per_sample = (0..batch)
            .map(|b| {
                let mut r = rng.fork(b as u64);
                let mut kept = r.sample_without_replacement(n, n - n_masked);
                kept.sort_unstable();
                let kept_set: std::collections::HashSet<usize> = kept.iter().copied().collect();
                let masked = (0..n).filter(|i| !kept_set.contains(i)).collect();
                SampleMask { kept, masked }
            })
            .collect();
        Ok(Self {
            per_sample,
            ratio,
            seed,
        })
    }

    pub fn kept_count(&self) -> usize {
        self.per_sample.first().map_or(0, |s| s.kept.len())
    }

    pub fn masked_count(&self) -> usize {
        self.per_sample.first().map_or(0, |s| s.masked.len())
    }

    pub fn kept_indices(&self) -> Vec<Vec<usize>> {
        self.per_sample.iter().map(|s| s.kept.clone()).collect()
    }

    /// `[B, N, 1]` indicator of masked positions.
    pub fn mask_tensor<S: Scalar>(&self, n: usize) -> Tensor<S> {
        let b = self.per_sample.len();
        let mut data = vec![S::ZERO; b * n];
        for (bi, s) in self.per_sample.iter().enumerate() {
            for &j in &s.masked {
                data[bi * n + j] = S::ONE;
            }
        }
        Tensor::new(vec![b, n, 1], data)
    }
}

/// Drop `ratio` of the tokens per sample; returns the kept tokens and the
/// plan describing what was dropped.
pub fn mask_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    tokens: &Tensor<S>,
    ratio: f64,
    seed: u64,
) -> Result<(Tensor<S>, MaskPlan)> {
    let [b, n, _d] = tokens.shape() else {
        return Err(Error::InvalidArgument(format!(
            "mask_tokens expects [B,N,D], got {:?}",
            tokens.shape()
        )));
    };
    let plan = MaskPlan::generate(*b, *n, ratio, seed)?;
    let kept = ops::select_tokens(tape, tokens, &plan.kept_indices())?;
    Ok((kept, plan))
}

/// Mean squared error over the masked token positions only.
pub fn mim_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred_pixels: &Tensor<S>,
    target_pixels: &Tensor<S>,
    plan: &MaskPlan,
) -> Result<Tensor<S>> {
    if pred_pixels.shape() != target_pixels.shape() {
        return Err(Error::ShapeMismatch {
            op: "mim_loss",
            lhs: pred_pixels.shape().to_vec(),
            rhs: target_pixels.shape().to_vec(),
        });
    }
    let [b, n, p] = pred_pixels.shape() else {
        return Err(Error::InvalidArgument(format!(
            "mim_loss expects [B,N,P], got {:?}",
            pred_pixels.shape()
        )));
    };
    let (b, n, p) = (*b, *n, *p);
    let total_masked: usize = plan.per_sample.iter().map(|s| s.masked.len()).sum();
    if total_masked == 0 {
        return Err(Error::InvalidArgument(
            "mim_loss over an empty masked set".into(),
        ));
    }
    debug_assert_eq!(plan.per_sample.len(), b);
    let mask = plan.mask_tensor::<S>(n);
    let diff = ops::sub(tape, pred_pixels, target_pixels)?;
    let sq = ops::mul(tape, &diff, &diff)?;
    let masked_sq = ops::mul(tape, &sq, &mask)?;
    let total = ops::sum_all(tape, &masked_sq);
    Ok(ops::scale(
        tape,
        &total,
        S::ONE / S::from_f64((total_masked * p) as f64),
    ))
}

// ---------------------------------------------------------------------------
// patchify
// ---------------------------------------------------------------------------

/// `[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p]` patch pixels, channel-major
/// within each patch vector.
pub fn patchify<S: Scalar>(tape: &mut Tape<S>, images: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let [b, c, h, w] = images.shape() else {
        return Err(Error::InvalidArgument(format!(
            "patchify expects [B,C,H,W], got {:?}",
            images.shape()
        )));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {p} does not divide {h}x{w}"
        )));
    }
    let (nh, nw) = (h / p, w / p);
    let t = ops::reshape(tape, images, &[b, c, nh, p, nw, p])?;
    let t = ops::permute(tape, &t, &[0, 2, 4, 1, 3, 5])?; // [B, nh, nw, C, p, p]
    ops::reshape(tape, &t, &[b, nh * nw, c * p * p])
}

// ---------------------------------------------------------------------------
// encoder / decoder
// ---------------------------------------------------------------------------

/// Patch-token encoder: linear patch embedding, sinusoid positions, a stack
/// of normal cells, final layer norm. `pcm_kernel` is 1 during pretraining
/// and 3 for finetuning.
#[derive(Debug)]
pub struct MimEncoder<S: Scalar> {
    pub embed: Linear<S>,
    pub ncs: Vec<NormalCell<S>>,
    pub norm: LayerNorm<S>,
    pos: Tensor<S>,
    pub patch: usize,
    pub grid: usize,
    pub pcm_kernel: usize,
}

impl<S: Scalar> MimEncoder<S> {
    /// Derive the encoder from a model config: the final-stage embedding,
    /// head count, groups and normal-cell depth, on `mim_patch` patches.
    pub fn from_config(config: &ModelConfig, pcm_kernel: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if pcm_kernel != 1 && pcm_kernel != 3 {
            return Err(Error::Config(format!(
                "pcm_kernel must be 1 or 3, got {pcm_kernel}"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let stage = config.stages.last().unwrap();
        let d = stage.embed;
        let p = config.mim_patch;
        let grid = config.input_size / p;
        let depth = stage.nc_count.max(1);
        let ncs = (0..depth)
            .map(|_| {
                NormalCell::new(
                    d,
                    stage.nc_heads,
                    crate::attention::AttentionKind::Full,
                    config.attn_scale,
                    stage.nc_groups,
                    pcm_kernel,
                    config.ffn_ratio,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: Linear::new(config.in_channels * p * p, d, true, &mut rng),
            ncs,
            norm: LayerNorm::new(d),
            pos: sinusoid_table(grid * grid, d),
            patch: p,
            grid,
            pcm_kernel,
        })
    }

    pub fn dim(&self) -> usize {
        self.embed.out_features()
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Embed patch pixels and add position encodings (kept tokens retain
    /// their original positions downstream).
    pub fn embed_patches(&self, tape: &mut Tape<S>, patches: &Tensor<S>) -> Result<Tensor<S>> {
        let t = self.embed.forward(tape, patches)?;
        ops::add(tape, &t, &self.pos)
    }

    /// Run the normal-cell stack over a token subset (`Flat` layout, 1x1
    /// kernels) or the full grid (`Spatial`, any kernel).
    pub fn encode(
        &self,
        tape: &mut Tape<S>,
        tokens: &Tensor<S>,
        grid: TokenGrid,
        training: bool,
    ) -> Result<Tensor<S>> {
        let mut t = tokens.detach().with_node(tokens.node);
        for nc in &self.ncs {
            let (out, _) = nc.forward(tape, &t, false, grid, training, false)?;
            t = out;
        }
        self.norm.forward(tape, &t)
    }
}

impl<S: Scalar> Module<S> for MimEncoder<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, nc) in self.ncs.iter().enumerate() {
            nc.visit(&join(prefix, &format!("ncs.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, nc) in self.ncs.iter_mut().enumerate() {
            nc.visit_mut(&join(prefix, &format!("ncs.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// One plain pre-norm transformer block (identity shortcuts; this is the
/// lightweight decoder, not a ViTAE cell).
#[derive(Debug)]
struct DecoderBlock<S: Scalar> {
    norm: LayerNorm<S>,
    attn: crate::attention::MultiHeadAttention<S>,
    ffn: FeedForward<S>,
}

impl<S: Scalar> DecoderBlock<S> {
    fn forward(&self, tape: &mut Tape<S>, t: &Tensor<S>) -> Result<Tensor<S>> {
        let normed = self.norm.forward(tape, t)?;
        let (attended, _) = self.attn.forward(tape, &normed, false)?;
        let t = ops::add(tape, t, &attended)?;
        self.ffn.forward(tape, &t)
    }
}

impl<S: Scalar> Module<S> for DecoderBlock<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Lightweight reconstruction decoder: project to decoder width, fill masked
/// positions with a learned mask token, add positions, run two transformer
/// blocks, regress pixels.
#[derive(Debug)]
pub struct MimDecoder<S: Scalar> {
    pub proj: Linear<S>,
    pub mask_token: Param<S>,
    blocks: Vec<DecoderBlock<S>>,
    pub norm: LayerNorm<S>,
    pub pixel_head: Linear<S>,
    pos: Tensor<S>,
}

impl<S: Scalar> MimDecoder<S> {
    /// Decoder width is capped by the encoder width (`min(128, D_enc)`).
    pub fn new(
        encoder_dim: usize,
        num_tokens: usize,
        patch_pixels: usize,
        depth: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = SplitMix64::new(seed);
        let width = 128.min(encoder_dim);
        let heads = if width % heads == 0 { heads } else { 1 };
        let blocks = (0..depth)
            .map(|_| {
                Ok(DecoderBlock {
                    norm: LayerNorm::new(width),
                    attn: crate::attention::MultiHeadAttention::new(
                        width,
                        width,
                        heads,
                        Default::default(),
                        &mut rng,
                    )?,
                    ffn: FeedForward::new(width, 4.0, &mut rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj: Linear::new(encoder_dim, width, true, &mut rng),
            mask_token: Param::new(Tensor::randn(&[width], 0.02, &mut rng)),
            blocks,
            norm: LayerNorm::new(width),
            pixel_head: Linear::new(width, patch_pixels, true, &mut rng),
            pos: sinusoid_table(num_tokens, width),
        })
    }

    pub fn width(&self) -> usize {
        self.proj.out_features()
    }

    /// Decode encoded kept tokens back to per-token pixel predictions
    /// `[B, N, P]`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        encoded_kept: &Tensor<S>,
        plan: &MaskPlan,
        num_tokens: usize,
    ) -> Result<Tensor<S>> {
        let projected = self.proj.forward(tape, encoded_kept)?;
        let mask_tok = tape.watch(&self.mask_token);
        let full = ops::scatter_tokens(
            tape,
            &projected,
            &mask_tok,
            &plan.kept_indices(),
            num_tokens,
        )?;
        let mut t = ops::add(tape, &full, &self.pos)?;
        for block in &self.blocks {
            t = block.forward(tape, &t)?;
        }
        let t = self.norm.forward(tape, &t)?;
        self.pixel_head.forward(tape, &t)
    }
}

impl<S: Scalar> Module<S> for MimDecoder<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        f(join(prefix, "mask_token"), Slot::Param(&self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.pixel_head.visit(&join(prefix, "pixel_head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        f(join(prefix, "mask_token"), SlotMut::Param(&mut self.mask_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.pixel_head.visit_mut(&join(prefix, "pixel_head"), f);
    }
}

/// Encoder + decoder pair saved together in pretraining checkpoints.
#[derive(Debug)]
pub struct MimPipeline<S: Scalar> {
    pub encoder: MimEncoder<S>,
    pub decoder: MimDecoder<S>,
}

impl<S: Scalar> MimPipeline<S> {
    pub fn from_config(config: &ModelConfig, pcm_kernel: usize, seed: u64) -> Result<Self> {
        let encoder = MimEncoder::from_config(config, pcm_kernel, seed)?;
        let decoder = MimDecoder::new(
            encoder.dim(),
            encoder.num_tokens(),
            config.in_channels * config.mim_patch * config.mim_patch,
            2,
            4,
            seed ^ 0x5ca77e8,
        )?;
        Ok(Self { encoder, decoder })
    }
}

impl<S: Scalar> Module<S> for MimPipeline<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// One pretraining forward pass: patchify, mask, encode the kept tokens,
/// decode with mask tokens, masked-pixel MSE. Gradients flow to the encoder,
/// the decoder and the mask token.
pub fn pretrain_step<S: Scalar>(
    tape: &mut Tape<S>,
    pipeline: &MimPipeline<S>,
    images: &Tensor<S>,
    ratio: f64,
    seed: u64,
    training: bool,
) -> Result<Tensor<S>> {
    let enc = &pipeline.encoder;
    if enc.pcm_kernel != 1 {
        return Err(Error::Config(
            "pretraining requires the encoder in 1x1 PCM mode".into(),
        ));
    }
    let patches = patchify(tape, images, enc.patch)?;
    let tokens = enc.embed_patches(tape, &patches)?;
    let (kept, plan) = mask_tokens(tape, &tokens, ratio, seed)?;
    let encoded = enc.encode(tape, &kept, TokenGrid::Flat, training)?;
    let pred = pipeline
        .decoder
        .forward(tape, &encoded, &plan, enc.num_tokens())?;
    mim_loss(tape, &pred, &patches.detach(), &plan)
}

// ---------------------------------------------------------------------------
// kernel inflation
// ---------------------------------------------------------------------------

/// Zero-pad every PCM 1x1 convolution weight in a pretraining checkpoint to
/// 3x3 (original value at the center tap); all other tensors pass through
/// byte-identical. The header flag flips from `pcm_kernel=1` to `3`.
pub fn inflate_kernels(ckpt: &Checkpoint) -> Result<Checkpoint> {
    if ckpt.pcm_kernel != 1 {
        return Err(Error::InvalidArgument(format!(
            "checkpoint already holds {k}x{k} PCM kernels",
            k = ckpt.pcm_kernel
        )));
    }
    let is_pcm_conv_weight =
        |name: &str| name.contains(".pcm.conv") && name.ends_with(".weight");
    let entries = ckpt
        .entries
        .iter()
        .map(|e| {
            if !is_pcm_conv_weight(&e.name) {
                return Ok(e.clone());
            }
            let [co, ci, kh, kw] = e.dims[..] else {
                return Err(Error::Format(format!(
                    "PCM conv weight `{}` is not rank 4",
                    e.name
                )));
            };
            if (kh, kw) != (1, 1) {
                return Err(Error::InvalidArgument(format!(
                    "`{}` has kernel {kh}x{kw}, expected 1x1",
                    e.name
                )));
            }
            let elem = e.dtype.size();
            let mut payload = vec![0u8; co * ci * 9 * elem];
            for i in 0..co * ci {
                let src = &e.payload[i * elem..(i + 1) * elem];
                // center tap of the 3x3 kernel is index 4
                let dst = (i * 9 + 4) * elem;
                payload[dst..dst + elem].copy_from_slice(src);
            }
            Ok(Entry {
                name: e.name.clone(),
                dtype: e.dtype,
                dims: vec![co, ci, 3, 3],
                payload,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        pcm_kernel: 3,
        entries,
    })
}

/// Inflation sanity used by tests: center tap equals the original, the other
/// eight taps are exactly zero.
pub fn check_inflated_entry(original: &Entry, inflated: &Entry) -> bool {
    if inflated.dims.len() != 4 || inflated.dims[2] != 3 || inflated.dims[3] != 3 {
        return false;
    }
    let elem = original.dtype.size();
    let n = original.dims[0] * original.dims[1];
    let zero = match original.dtype {
        DType::F32 => 0f32.to_le_bytes().to_vec(),
        DType::F64 => return false, // pretraining checkpoints are f32
    };
    (0..n).all(|i| {
        (0..9).all(|tap| {
            let got = &inflated.payload[(i * 9 + tap) * elem..(i * 9 + tap + 1) * elem];
            if tap == 4 {
                got == &original.payload[i * elem..(i + 1) * elem]
            } else {
                got == &zero[..]
            }
        })
    })
}
