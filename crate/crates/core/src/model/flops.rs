//! Analytic multiply-accumulate accounting.
//!
//! Counts convolution, linear and attention MACs for a single image
//! (`B = 1`), the convention behind the published "FLOPs (G)" figures.
//! Normalizations, activations and elementwise adds are not counted.
//!
//! Two totals are reported: `exact_macs` is what this implementation
//! executes; `table_macs` additionally excludes the quadratic attention terms
//! (`QK^T` and `attn V`) in stages flagged as Performer slots, since the
//! published budgets assume linear attention there. Comparisons against
//! published numbers use `table_macs` and carry the caveat flag.

use crate::attention::AttentionKind;
use crate::error::Result;
use crate::model::{HeadKind, ModelConfig};

/// Per-stage MACs with the attention quadratic term broken out.
#[derive(Debug, Clone)]
pub struct StageMacs {
    pub label: String,
    /// All MACs of the stage as executed.
    pub macs: u64,
    /// The `QK^T` + `attn V` portion of `macs`.
    pub attn_quadratic: u64,
    /// True when this stage's quadratic term is excluded from `table_macs`.
    pub performer_slot: bool,
}

#[derive(Debug, Clone)]
pub struct FlopReport {
    pub exact_macs: u64,
    pub table_macs: u64,
    /// Set when any stage occupies a Performer slot, i.e. the table number is
    /// not what this implementation executes.
    pub performer_caveat: bool,
    pub per_stage: Vec<StageMacs>,
}

fn conv_macs(cin: usize, cout: usize, k: usize, out_hw: usize, groups: usize) -> u64 {
    (cout * out_hw * (cin / groups) * k * k) as u64
}

fn linear_macs(din: usize, dout: usize, tokens: usize) -> u64 {
    (tokens * din * dout) as u64
}

/// Projections and the quadratic term of one attention call over `tokens`
/// tokens of width `din -> d`. For window attention each query sees only its
/// window's keys.
fn attn_macs(din: usize, d: usize, tokens: usize, kind: AttentionKind) -> (u64, u64) {
    let proj = 3 * linear_macs(din, d, tokens) + linear_macs(d, d, tokens);
    let keys = match kind {
        AttentionKind::Full => tokens,
        AttentionKind::Window(w) => w * w,
    };
    let quadratic = 2 * (tokens * keys * d) as u64;
    (proj, quadratic)
}

/// Analytic MAC count for a configuration (B = 1).
pub fn count_flops_for_config(config: &ModelConfig) -> Result<FlopReport> {
    config.validate()?;
    let grids = config.stage_grids()?;
    let ffn_hidden = |d: usize| (config.ffn_ratio * d as f64).round() as usize;

    let mut per_stage = Vec::new();
    let mut exact: u64 = 0;
    let mut table: u64 = 0;
    let mut cin = config.in_channels;
    let mut extent = config.input_size;

    for (i, (stage, &grid)) in config.stages.iter().zip(&grids).enumerate() {
        let d = stage.embed;
        let n_out = grid * grid;

        // --- reduction cell ---
        let branch_width = d.div_ceil(stage.dilations.len());
        let concat = stage.dilations.len() * branch_width;
        let prm = stage.dilations.len() as u64
            * conv_macs(cin, branch_width, stage.kernel, n_out, 1);
        let (attn_proj, attn_quad) = attn_macs(concat, d, n_out, stage.rc_attention);
        // PCM stride plan: r=4 -> [2,2,1], r=2 -> [2,1,1]
        let mid = extent / 2;
        let pcm_hw: [usize; 3] = if stage.reduction == 4 {
            [mid * mid, grid * grid, grid * grid]
        } else {
            [grid * grid; 3]
        };
        let p = stage.pcm_hidden;
        let pcm = conv_macs(cin, p, 3, pcm_hw[0], 1)
            + conv_macs(p, p, 3, pcm_hw[1], 1)
            + conv_macs(p, d, 3, pcm_hw[2], 1);
        let ffn = 2 * linear_macs(d, ffn_hidden(d), n_out);
        let rc_macs = prm + attn_proj + attn_quad + pcm + ffn;
        exact += rc_macs;
        table += rc_macs - if stage.rc_performer_slot { attn_quad } else { 0 };
        per_stage.push(StageMacs {
            label: format!("stage{i}.rc"),
            macs: rc_macs,
            attn_quadratic: attn_quad,
            performer_slot: stage.rc_performer_slot,
        });

        // --- normal cells ---
        if stage.nc_count > 0 {
            let is_final = i + 1 == config.stages.len();
            let extra = usize::from(config.head == HeadKind::ClassToken && is_final);
            let tokens = n_out + extra;
            let (proj, quad) = attn_macs(d, d, tokens, stage.nc_attention);
            let pcm = 3 * conv_macs(d, d, 3, n_out, stage.nc_groups);
            let ffn = 2 * linear_macs(d, ffn_hidden(d), tokens);
            let one = proj + quad + pcm + ffn;
            let all = stage.nc_count as u64 * one;
            exact += all;
            table += all;
            per_stage.push(StageMacs {
                label: format!("stage{i}.nc x{}", stage.nc_count),
                macs: all,
                attn_quadratic: stage.nc_count as u64 * quad,
                performer_slot: false,
            });
        }

        cin = d;
        extent = grid;
    }

    let head = linear_macs(config.final_embed(), config.num_classes, 1);
    exact += head;
    table += head;
    per_stage.push(StageMacs {
        label: "head".into(),
        macs: head,
        attn_quadratic: 0,
        performer_slot: false,
    });

    Ok(FlopReport {
        exact_macs: exact,
        table_macs: table,
        performer_caveat: config.stages.iter().any(|s| s.rc_performer_slot),
        per_stage,
    })
}
