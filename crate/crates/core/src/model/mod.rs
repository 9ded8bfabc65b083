//! Model assembly: isotropic (three reduction cells, then a normal-cell stack
//! on a class-token sequence) and multi-stage (four stages of one reduction
//! cell plus normal cells on shrinking grids, global-average-pool head).

pub mod flops;
pub mod presets;

pub use flops::{count_flops_for_config, FlopReport, StageMacs};
pub use presets::{paper_budget, preset, PRESET_NAMES};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionStats, AttnScale};
use crate::cells::{img2seq, seq2img, NormalCell, RcBuild, ReductionCell, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::{count_state, join, LayerNorm, Linear, Module, Param, Slot, SlotMut};
use crate::rng::SplitMix64;
use crate::tensor::{ops, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Isotropic,
    Multistage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    ClassToken,
    GlobalAvgPool,
}

/// One stage: a reduction cell followed by `nc_count` normal cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Token embedding width produced by this stage.
    pub embed: usize,
    /// Spatial reduction ratio of the stage's reduction cell.
    pub reduction: usize,
    /// PRM convolution kernel size.
    pub kernel: usize,
    /// Ascending dilation rates of the PRM branches.
    pub dilations: Vec<usize>,
    pub rc_attention: AttentionKind,
    pub rc_heads: usize,
    /// This stage runs exact attention but occupies a Performer
    /// linear-attention slot in the published ViTAE configurations; the MAC
    /// report annotates it when comparing against published budgets.
    #[serde(default)]
    pub rc_performer_slot: bool,
    pub nc_count: usize,
    pub nc_attention: AttentionKind,
    pub nc_heads: usize,
    /// Hidden width of the reduction cell's PCM stack.
    pub pcm_hidden: usize,
    /// Channel groups of the normal cells' PCM convolutions.
    pub nc_groups: usize,
}

fn default_input_size() -> usize {
    224
}
fn default_in_channels() -> usize {
    3
}
fn default_num_classes() -> usize {
    1000
}
fn default_ffn_ratio() -> f64 {
    3.0
}
fn default_mim_patch() -> usize {
    16
}

/// Declarative description of a model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub head: HeadKind,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// FFN hidden width as a multiple of the token width.
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    #[serde(default)]
    pub attn_scale: AttnScale,
    /// Patch side length used by the masked-pretraining encoder.
    #[serde(default = "default_mim_patch")]
    pub mim_patch: usize,
    pub stages: Vec<StageConfig>,
}

impl ModelConfig {
    /// Token-grid side length after each stage.
    pub fn stage_grids(&self) -> Result<Vec<usize>> {
        let mut grids = Vec::with_capacity(self.stages.len());
        let mut size = self.input_size;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.reduction == 0 || !size.is_multiple_of(stage.reduction) {
                return Err(Error::Config(format!(
                    "stage {i}: extent {size} not divisible by reduction {}",
                    stage.reduction
                )));
            }
            size /= stage.reduction;
            grids.push(size);
        }
        Ok(grids)
    }

    pub fn validate(&self) -> Result<()> {
        let expect = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        expect(!self.stages.is_empty(), "model needs at least one stage")?;
        match self.variant {
            Variant::Isotropic => {
                expect(
                    self.stages.len() == 3,
                    "isotropic variant stacks exactly 3 reduction cells",
                )?;
                let reds: Vec<usize> = self.stages.iter().map(|s| s.reduction).collect();
                expect(reds == [4, 2, 2], "isotropic reductions must be (4, 2, 2)")?;
                expect(
                    self.stages[..2].iter().all(|s| s.nc_count == 0),
                    "isotropic variant places all normal cells after the last reduction cell",
                )?;
                expect(
                    self.head == HeadKind::ClassToken,
                    "isotropic variant uses the class-token head",
                )?;
                expect(
                    self.stages
                        .iter()
                        .all(|s| s.nc_attention == AttentionKind::Full),
                    "class-token sequences use full attention only",
                )?;
            }
            Variant::Multistage => {
                expect(
                    self.stages.len() == 4,
                    "multistage variant uses exactly 4 stages",
                )?;
                let reds: Vec<usize> = self.stages.iter().map(|s| s.reduction).collect();
                expect(reds == [4, 2, 2, 2], "multistage reductions must be (4, 2, 2, 2)")?;
                expect(
                    self.head == HeadKind::GlobalAvgPool,
                    "multistage variant uses the global-average-pool head",
                )?;
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            let ctx = |msg: String| Error::Config(format!("stage {i}: {msg}"));
            if s.dilations.is_empty() {
                return Err(ctx("empty dilation set".into()));
            }
            if s.embed == 0 || s.rc_heads == 0 || s.nc_heads == 0 {
                return Err(ctx("embed and head counts must be positive".into()));
            }
            if s.embed % s.rc_heads != 0 || s.embed % s.nc_heads != 0 {
                return Err(ctx(format!(
                    "embedding {} not divisible by heads ({}, {})",
                    s.embed, s.rc_heads, s.nc_heads
                )));
            }
            if s.nc_groups == 0 || s.embed % s.nc_groups != 0 {
                return Err(ctx(format!(
                    "embedding {} not divisible by PCM groups {}",
                    s.embed, s.nc_groups
                )));
            }
            if s.pcm_hidden == 0 {
                return Err(ctx("pcm_hidden must be positive".into()));
            }
            if s.kernel % 2 == 0 {
                return Err(ctx("PRM kernels must be odd for same-padding".into()));
            }
        }
        let grids = self.stage_grids()?;
        for (i, (s, &grid)) in self.stages.iter().zip(&grids).enumerate() {
            for (kind, who) in [(s.rc_attention, "reduction"), (s.nc_attention, "normal")] {
                if let AttentionKind::Window(w) = kind {
                    if w == 0 || grid % w != 0 {
                        return Err(Error::Config(format!(
                            "stage {i}: window {w} does not divide the {grid}x{grid} token \
                             grid of its {who} cells; adjust the input size"
                        )));
                    }
                }
            }
        }
        if self.mim_patch == 0 || !self.input_size.is_multiple_of(self.mim_patch) {
            return Err(Error::Config(format!(
                "mim_patch {} does not divide input size {}",
                self.mim_patch, self.input_size
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channels and classes must be positive".into()));
        }
        if self.ffn_ratio.is_nan() || self.ffn_ratio <= 0.0 {
            return Err(Error::Config("ffn_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn final_embed(&self) -> usize {
        self.stages.last().map(|s| s.embed).unwrap_or(0)
    }
}

/// Standard 1-D interleaved sine/cosine position table over token index,
/// geometric frequency progression with base 10000.
pub fn sinusoid_table<S: Scalar>(positions: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(positions * dim);
    for pos in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(S::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![positions, dim], data)
}

#[derive(Debug)]
pub struct Stage<S: Scalar> {
    pub rc: ReductionCell<S>,
    pub ncs: Vec<NormalCell<S>>,
}

/// A built classifier.
#[derive(Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub stages: Vec<Stage<S>>,
    /// Learned class token (isotropic head only); fixed at inference.
    pub class_token: Option<Param<S>>,
    /// Fixed sinusoid table (isotropic only); recomputed at build, not saved.
    pos_encoding: Option<Tensor<S>>,
    pub final_norm: LayerNorm<S>,
    pub head: Linear<S>,
}

/// Build a model from a validated config with seeded initialization.
pub fn build<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let grids = config.stage_grids()?;
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut cin = config.in_channels;
    for stage_cfg in &config.stages {
        let rc = ReductionCell::new(
            &RcBuild {
                cin,
                dout: stage_cfg.embed,
                reduction: stage_cfg.reduction,
                kernel: stage_cfg.kernel,
                dilations: &stage_cfg.dilations,
                heads: stage_cfg.rc_heads,
                kind: stage_cfg.rc_attention,
                scale: config.attn_scale,
                pcm_hidden: stage_cfg.pcm_hidden,
                ffn_ratio: config.ffn_ratio,
            },
            &mut rng,
        )?;
        let ncs = (0..stage_cfg.nc_count)
            .map(|_| {
                NormalCell::new(
                    stage_cfg.embed,
                    stage_cfg.nc_heads,
                    stage_cfg.nc_attention,
                    config.attn_scale,
                    stage_cfg.nc_groups,
                    3,
                    config.ffn_ratio,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage { rc, ncs });
        cin = stage_cfg.embed;
    }
    let d = config.final_embed();
    let (class_token, pos_encoding) = match config.head {
        HeadKind::ClassToken => {
            let grid = *grids.last().unwrap();
            let tokens = grid * grid + 1;
            (
                Some(Param::new(Tensor::randn(&[d], 0.02, &mut rng))),
                Some(sinusoid_table(tokens, d)),
            )
        }
        HeadKind::GlobalAvgPool => (None, None),
    };
    Ok(Model {
        config: config.clone(),
        stages,
        class_token,
        pos_encoding,
        final_norm: LayerNorm::new(d),
        head: Linear::new(d, config.num_classes, true, &mut rng),
    })
}

/// Build a named preset.
pub fn build_preset<S: Scalar>(name: &str, seed: u64) -> Result<Model<S>> {
    build(&preset(name)?, seed)
}

impl<S: Scalar> Model<S> {
    /// Classify a batch. Returns logits `[B, num_classes]` and, when
    /// requested, per-attention-layer weight captures.
    pub fn forward_classify(
        &self,
        tape: &mut Tape<S>,
        images: &Tensor<S>,
        training: bool,
        capture_stats: bool,
    ) -> Result<(Tensor<S>, Vec<AttentionStats<S>>)> {
        let [b, c, h, w] = images.shape() else {
            return Err(Error::InvalidArgument(format!(
                "expected image batch [B,C,H,W], got {:?}",
                images.shape()
            )));
        };
        let (b, c, h, w) = (*b, *c, *h, *w);
        if c != self.config.in_channels || h != self.config.input_size || w != self.config.input_size
        {
            return Err(Error::ShapeMismatch {
                op: "forward_classify",
                lhs: vec![
                    self.config.in_channels,
                    self.config.input_size,
                    self.config.input_size,
                ],
                rhs: vec![c, h, w],
            });
        }
        let mut stats = Vec::new();
        let grids = self.config.stage_grids()?;
        let mut fmap = images.detach();

        match self.config.head {
            HeadKind::ClassToken => {
                for (i, stage) in self.stages.iter().enumerate() {
                    let (out, rc_stats) = stage.rc.forward(tape, &fmap, training, capture_stats)?;
                    if let Some(weights) = rc_stats {
                        stats.push(self.wrap_stats(weights, i, grids[i], false, format!("stage{i}.rc")));
                    }
                    fmap = out;
                }
                let grid = *grids.last().unwrap();
                let d = self.config.final_embed();
                let mut tokens = img2seq(tape, &fmap)?;
                // prepend the class token, then add the sinusoid table
                let cls = tape.watch(self.class_token.as_ref().unwrap());
                let cls = ops::reshape(tape, &cls, &[1, 1, d])?;
                let cls = ops::broadcast_to(tape, &cls, &[b, 1, d])?;
                tokens = ops::concat(tape, &[&cls, &tokens], 1)?;
                tokens = ops::add(tape, &tokens, self.pos_encoding.as_ref().unwrap())?;
                let last = self.stages.len() - 1;
                for (j, nc) in self.stages[last].ncs.iter().enumerate() {
                    let (out, nc_stats) = nc.forward(
                        tape,
                        &tokens,
                        true,
                        TokenGrid::Spatial(grid, grid),
                        training,
                        capture_stats,
                    )?;
                    if let Some(weights) = nc_stats {
                        stats.push(self.wrap_stats(weights, last, grid, true, format!("nc{j}")));
                    }
                    tokens = out;
                }
                let cls_out = ops::narrow(tape, &tokens, 1, 0, 1)?;
                let cls_out = ops::reshape(tape, &cls_out, &[b, d])?;
                let cls_out = self.final_norm.forward(tape, &cls_out)?;
                Ok((self.head.forward(tape, &cls_out)?, stats))
            }
            HeadKind::GlobalAvgPool => {
                for (i, stage) in self.stages.iter().enumerate() {
                    let (out, rc_stats) = stage.rc.forward(tape, &fmap, training, capture_stats)?;
                    if let Some(weights) = rc_stats {
                        stats.push(self.wrap_stats(weights, i, grids[i], false, format!("stage{i}.rc")));
                    }
                    fmap = out;
                    if stage.ncs.is_empty() {
                        continue;
                    }
                    let grid = grids[i];
                    let mut tokens = img2seq(tape, &fmap)?;
                    for (j, nc) in stage.ncs.iter().enumerate() {
                        let (out, nc_stats) = nc.forward(
                            tape,
                            &tokens,
                            false,
                            TokenGrid::Spatial(grid, grid),
                            training,
                            capture_stats,
                        )?;
                        if let Some(weights) = nc_stats {
                            stats.push(self.wrap_stats(
                                weights,
                                i,
                                grid,
                                false,
                                format!("stage{i}.nc{j}"),
                            ));
                        }
                        tokens = out;
                    }
                    fmap = seq2img(tape, &tokens, (grid, grid))?;
                }
                let tokens = img2seq(tape, &fmap)?;
                let normed = self.final_norm.forward(tape, &tokens)?;
                let summed = ops::sum_axis(tape, &normed, 1)?;
                let n = *grids.last().unwrap();
                let pooled = ops::scale(tape, &summed, S::ONE / S::from_f64((n * n) as f64));
                Ok((self.head.forward(tape, &pooled)?, stats))
            }
        }
    }

    fn wrap_stats(
        &self,
        weights: Tensor<S>,
        stage: usize,
        grid: usize,
        includes_class_token: bool,
        label: String,
    ) -> AttentionStats<S> {
        let cfg = &self.config.stages[stage];
        let kind = if label.contains("rc") {
            cfg.rc_attention
        } else {
            cfg.nc_attention
        };
        let heads = if label.contains("rc") { cfg.rc_heads } else { cfg.nc_heads };
        AttentionStats {
            weights,
            heads,
            grid: (grid, grid),
            window: match kind {
                AttentionKind::Window(w) => Some((w, w)),
                AttentionKind::Full => None,
            },
            stride_px: self.config.input_size as f64 / grid as f64,
            includes_class_token,
            label,
        }
    }

    /// Total state element count plus a per-component breakdown.
    pub fn count_params(&self) -> ParamCount {
        let (total, trainable, buffers) = count_state(self);
        let mut breakdown: Vec<(String, usize)> = Vec::new();
        self.visit("", &mut |name, slot| {
            let n = match slot {
                Slot::Param(p) => p.value.len(),
                Slot::Buffer(b) => b.read().expect("lock").len(),
            };
            // group by the leading two path segments (e.g. "stage2.rc")
            let group: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
            match breakdown.last_mut() {
                Some((g, acc)) if *g == group => *acc += n,
                _ => breakdown.push((group, n)),
            }
        });
        ParamCount {
            total,
            trainable,
            buffers,
            breakdown,
        }
    }

    /// Analytic MAC counts for this model at the given input size.
    pub fn count_flops(&self, input_size: usize) -> Result<FlopReport> {
        let mut cfg = self.config.clone();
        cfg.input_size = input_size;
        count_flops_for_config(&cfg)
    }
}

/// Element counts of all model state. `total` is what a checkpoint stores;
/// `trainable` excludes batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub buffers: usize,
    pub breakdown: Vec<(String, usize)>,
}

impl<S: Scalar> Module<S> for Model<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.rc.visit(&join(prefix, &format!("stage{i}.rc")), f);
            for (j, nc) in stage.ncs.iter().enumerate() {
                nc.visit(&join(prefix, &format!("stage{i}.nc{j}")), f);
            }
        }
        if let Some(cls) = &self.class_token {
            f(join(prefix, "class_token"), Slot::Param(cls));
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.rc.visit_mut(&join(prefix, &format!("stage{i}.rc")), f);
            for (j, nc) in stage.ncs.iter_mut().enumerate() {
                nc.visit_mut(&join(prefix, &format!("stage{i}.nc{j}")), f);
            }
        }
        if let Some(cls) = &mut self.class_token {
            f(join(prefix, "class_token"), SlotMut::Param(cls));
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
