//! Named model presets matching the published ViTAE / ViTAEv2 configurations,
//! plus `tiny-desk`, a reduced isotropic config for 32x32 inputs.

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig, StageConfig, Variant};

pub const PRESET_NAMES: &[&str] = &[
    "vitae-t",
    "vitae-6m",
    "vitae-13m",
    "vitae-s",
    "vitaev2-s",
    "vitaev2-48m",
    "vitaev2-b",
    "tiny-desk",
];

/// Published (params in millions, MACs in G at 224) for the presets that have
/// them; used by the accounting report.
pub fn paper_budget(name: &str) -> Option<(f64, f64)> {
    match name {
        "vitae-t" => Some((4.8, 1.5)),
        "vitae-6m" => Some((6.5, 2.0)),
        "vitae-13m" => Some((13.2, 3.3)),
        "vitae-s" => Some((23.6, 5.6)),
        "vitaev2-s" => Some((19.3, 5.7)),
        "vitaev2-48m" => Some((48.7, 13.3)),
        "vitaev2-b" => Some((89.7, 24.3)),
        _ => None,
    }
}

/// Dilation schedule shared by all presets: sets shrink with depth.
fn dilations(stage: usize) -> Vec<usize> {
    match stage {
        0 => vec![1, 2, 3, 4],
        1 => vec![1, 2, 3],
        _ => vec![1, 2],
    }
}

/// Largest channel-group count <= 64 that divides `d`; keeps normal-cell PCM
/// convolutions cheap at the wide late stages.
fn group_cap(d: usize) -> usize {
    (1..=64.min(d)).rev().find(|g| d.is_multiple_of(*g)).unwrap_or(1)
}

fn isotropic(embeds: [usize; 3], nc_final: usize, ffn_ratio: f64, input: usize) -> ModelConfig {
    let stages = embeds
        .iter()
        .enumerate()
        .map(|(i, &embed)| StageConfig {
            embed,
            reduction: if i == 0 { 4 } else { 2 },
            kernel: if i == 0 { 7 } else { 3 },
            dilations: dilations(i),
            rc_attention: AttentionKind::Full,
            rc_heads: 1,
            rc_performer_slot: true,
            nc_count: if i == 2 { nc_final } else { 0 },
            nc_attention: AttentionKind::Full,
            nc_heads: 4,
            pcm_hidden: (embed / 4).max(1),
            nc_groups: group_cap(embed),
        })
        .collect();
    ModelConfig {
        variant: Variant::Isotropic,
        head: HeadKind::ClassToken,
        input_size: input,
        in_channels: 3,
        num_classes: 1000,
        ffn_ratio,
        attn_scale: Default::default(),
        mim_patch: 16,
        stages,
    }
}

fn multistage(embeds: [usize; 4], arrangement: [usize; 4], ffn_ratio: f64) -> ModelConfig {
    // window attention at the first two stages only; PCM hidden width is the
    // full embedding early and half of it late
    let rc_heads = [1, 1, 2, 4];
    let nc_heads = [1, 2, 4, 8];
    let stages = embeds
        .iter()
        .enumerate()
        .map(|(i, &embed)| {
            let windowed = i < 2;
            StageConfig {
                embed,
                reduction: if i == 0 { 4 } else { 2 },
                kernel: if i == 0 { 7 } else { 3 },
                dilations: dilations(i),
                rc_attention: if windowed {
                    AttentionKind::Window(7)
                } else {
                    AttentionKind::Full
                },
                rc_heads: rc_heads[i],
                rc_performer_slot: false,
                nc_count: arrangement[i],
                nc_attention: if windowed {
                    AttentionKind::Window(7)
                } else {
                    AttentionKind::Full
                },
                nc_heads: nc_heads[i],
                pcm_hidden: if windowed { embed } else { embed / 2 },
                nc_groups: if windowed { 1 } else { group_cap(embed) },
            }
        })
        .collect();
    ModelConfig {
        variant: Variant::Multistage,
        head: HeadKind::GlobalAvgPool,
        input_size: 224,
        in_channels: 3,
        num_classes: 1000,
        ffn_ratio,
        attn_scale: Default::default(),
        mim_patch: 16,
        stages,
    }
}

/// Look up a preset by name.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let config = match name {
        "vitae-t" => isotropic([64, 64, 256], 7, 2.0, 224),
        "vitae-6m" => isotropic([64, 64, 256], 10, 2.0, 224),
        "vitae-13m" => isotropic([64, 64, 320], 11, 3.0, 224),
        "vitae-s" => isotropic([96, 192, 384], 14, 3.0, 224),
        "vitaev2-s" => multistage([64, 128, 256, 512], [2, 2, 8, 2], 3.0),
        "vitaev2-48m" => multistage([96, 192, 384, 768], [2, 2, 11, 2], 3.0),
        "vitaev2-b" => multistage([128, 256, 512, 1024], [2, 2, 12, 2], 3.0),
        "tiny-desk" => {
            let mut cfg = isotropic([32, 32, 64], 2, 2.0, 32);
            cfg.num_classes = 10;
            cfg.mim_patch = 4;
            cfg
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {PRESET_NAMES:?})"
            )))
        }
    };
    config.validate()?;
    Ok(config)
}
