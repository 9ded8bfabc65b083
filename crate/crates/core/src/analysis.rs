//! Quantitative inspection: the attention-distance metric and the model
//! accounting report against the published budgets.

use serde::Serialize;

use crate::attention::AttentionStats;
use crate::error::{Error, Result};
use crate::model::{self, paper_budget, preset};
use crate::tensor::Scalar;

/// Mean attention distance in pixels: the attention-weighted Euclidean
/// distance between query and key token-grid positions, scaled by the pixel
/// stride, averaged over batch, heads and query tokens. Class-token rows and
/// columns are excluded from the spatial metric.
pub fn attention_distance<S: Scalar>(stats: &AttentionStats<S>) -> Result<f64> {
    let [groups, heads, tq, tk] = stats.weights.shape() else {
        return Err(Error::InvalidArgument(format!(
            "attention stats must be [G,h,T,T], got {:?}",
            stats.weights.shape()
        )));
    };
    let (groups, heads, tq, tk) = (*groups, *heads, *tq, *tk);
    if tq != tk {
        return Err(Error::InvalidArgument(
            "attention weight matrix must be square".into(),
        ));
    }
    let (grid_h, grid_w) = stats.grid;
    let cls = usize::from(stats.includes_class_token);
    let n_spatial = tq - cls;

    // token extent of the position table the weights index into
    let (_pos_h, pos_w) = match stats.window {
        Some((wh, ww)) => {
            if n_spatial != wh * ww || grid_h % wh != 0 || grid_w % ww != 0 {
                return Err(Error::InvalidArgument(format!(
                    "window {wh}x{ww} inconsistent with {n_spatial} tokens on a \
                     {grid_h}x{grid_w} grid"
                )));
            }
            (wh, ww)
        }
        None => {
            if n_spatial != grid_h * grid_w {
                return Err(Error::InvalidArgument(format!(
                    "{n_spatial} spatial tokens do not fill a {grid_h}x{grid_w} grid"
                )));
            }
            (grid_h, grid_w)
        }
    };

    // pairwise grid distances; relative positions make this valid inside
    // windows too (windows tile the grid without overlap)
    let coord = |t: usize| ((t / pos_w) as f64, (t % pos_w) as f64);
    let mut total = 0.0f64;
    let data = stats.weights.data();
    for g in 0..groups {
        for h in 0..heads {
            for q in 0..n_spatial {
                let (qy, qx) = coord(q);
                let row = (g * heads + h) * tq * tk + (q + cls) * tk;
                let mut acc = 0.0;
                for k in 0..n_spatial {
                    let (ky, kx) = coord(k);
                    let w = data[row + k + cls].to_f64();
                    acc += w * ((qy - ky).powi(2) + (qx - kx).powi(2)).sqrt();
                }
                // renormalize when a class-token column carries mass
                if cls == 1 {
                    let mut spatial_mass = 0.0;
                    for k in 0..n_spatial {
                        spatial_mass += data[row + k + cls].to_f64();
                    }
                    if spatial_mass > 0.0 {
                        acc /= spatial_mass;
                    }
                }
                total += acc;
            }
        }
    }
    Ok(stats.stride_px * total / (groups * heads * n_spatial) as f64)
}

/// One row of the accounting report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub preset: String,
    pub params: usize,
    pub paper_params_m: Option<f64>,
    pub param_delta: Option<f64>,
    pub macs: u64,
    pub paper_macs_g: Option<f64>,
    pub mac_delta: Option<f64>,
    /// Table MACs exclude quadratic attention in Performer slots.
    pub performer_caveat: bool,
}

/// Build every requested preset and compare parameter and MAC budgets against
/// the published table values. Deltas are signed fractions `(ours - published) /
/// published`.
pub fn model_report(presets: &[&str]) -> Result<Vec<ReportRow>> {
    presets
        .iter()
        .map(|name| {
            let cfg = preset(name)?;
            let built = model::build::<f32>(&cfg, 0)?;
            let params = built.count_params().total;
            let flops = built.count_flops(cfg.input_size)?;
            let budget = paper_budget(name);
            let param_delta = budget.map(|(p, _)| (params as f64 - p * 1e6) / (p * 1e6));
            let mac_delta =
                budget.map(|(_, g)| (flops.table_macs as f64 - g * 1e9) / (g * 1e9));
            Ok(ReportRow {
                preset: name.to_string(),
                params,
                paper_params_m: budget.map(|(p, _)| p),
                param_delta,
                macs: flops.table_macs,
                paper_macs_g: budget.map(|(_, g)| g),
                mac_delta,
                performer_caveat: flops.performer_caveat,
            })
        })
        .collect()
}

/// Aligned text table for terminals.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>12} {:>9} {:>8}  {:>9} {:>8} {:>8}  {}\n",
        "preset", "params", "published", "delta", "MACs(G)", "published", "delta", "note"
    ));
    for r in rows {
        let fmt_m = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}M"));
        let fmt_g = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}G"));
        let fmt_d = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:+.1}%", 100.0 * x));
        out.push_str(&format!(
            "{:<12} {:>12} {:>9} {:>8}  {:>9.2} {:>8} {:>8}  {}\n",
            r.preset,
            r.params,
            fmt_m(r.paper_params_m),
            fmt_d(r.param_delta),
            r.macs as f64 / 1e9,
            fmt_g(r.paper_macs_g),
            fmt_d(r.mac_delta),
            if r.performer_caveat {
                "exact attention in Performer slots excluded from table MACs"
            } else {
                ""
            }
        ));
    }
    out
}

/// Machine-readable report: one JSON object per line.
pub fn report_jsonl(rows: &[ReportRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serialize report row"))
        .fold(String::new(), |mut acc, line| {
            acc.push_str(&line);
            acc.push('\n');
            acc
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn stats_from(weights: Tensor<f64>, grid: usize, stride: f64) -> AttentionStats<f64> {
        AttentionStats {
            weights,
            heads: 1,
            grid: (grid, grid),
            window: None,
            stride_px: stride,
            includes_class_token: false,
            label: "test".into(),
        }
    }

    #[test]
    fn identity_attention_has_zero_distance() {
        let n = 9;
        let mut w = vec![0.0f64; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let stats = stats_from(Tensor::new(vec![1, 1, n, n], w), 3, 1.0);
        assert_eq!(attention_distance(&stats).unwrap(), 0.0);
    }

    #[test]
    fn uniform_2x2_matches_hand_enumeration() {
        // mean over the 16 ordered pairs of the 2x2 grid: (2 + sqrt(2)) / 4
        let n = 4;
        let w = vec![0.25f64; n * n];
        let stats = stats_from(Tensor::new(vec![1, 1, n, n], w), 2, 1.0);
        let got = attention_distance(&stats).unwrap();
        let expect = (2.0 + 2.0f64.sqrt()) / 4.0;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn distance_scales_linearly_with_stride() {
        let n = 4;
        let w = vec![0.25f64; n * n];
        let one = attention_distance(&stats_from(
            Tensor::new(vec![1, 1, n, n], w.clone()),
            2,
            1.0,
        ))
        .unwrap();
        let two =
            attention_distance(&stats_from(Tensor::new(vec![1, 1, n, n], w), 2, 2.0)).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_grid_is_error() {
        let stats = stats_from(Tensor::new(vec![1, 1, 4, 4], vec![0.25; 16]), 3, 1.0);
        assert!(attention_distance(&stats).is_err());
    }

    /// Shift invariance: adding a constant to all pre-softmax logits leaves
    /// the weights, and therefore the distance, unchanged.
    #[test]
    fn distance_is_invariant_to_logit_shifts() {
        use crate::rng::SplitMix64;
        use crate::tensor::{ops, Tape};
        let mut rng = SplitMix64::new(3);
        let logits = Tensor::<f64>::randn(&[1, 1, 9, 9], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let base = ops::softmax(&mut tape, &logits, 3).unwrap();
        let shifted_in = ops::add(&mut tape, &logits, &Tensor::full(&[1], 11.5)).unwrap();
        let shifted = ops::softmax(&mut tape, &shifted_in, 3).unwrap();
        let d0 = attention_distance(&stats_from(base, 3, 4.0)).unwrap();
        let d1 = attention_distance(&stats_from(shifted, 3, 4.0)).unwrap();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn report_deltas_are_signed_fractions() {
        let rows = model_report(&["vitae-t"]).unwrap();
        let row = &rows[0];
        let expect = (row.params as f64 - 4.8e6) / 4.8e6;
        assert!((row.param_delta.unwrap() - expect).abs() < 1e-12);
        assert_eq!(row.paper_params_m, Some(4.8));
        assert_eq!(row.paper_macs_g, Some(1.5));
        assert!(row.performer_caveat);
        let text = render_report(&rows);
        assert!(text.contains("vitae-t"));
    }

    /// 0 <= distance <= stride * diag(grid) for arbitrary row-stochastic
    /// weights.
    #[test]
    fn distance_is_bounded_by_the_grid_diagonal() {
        use crate::rng::SplitMix64;
        use crate::tensor::{ops, Tape};
        for seed in 0..20u64 {
            let mut rng = SplitMix64::new(seed);
            let grid = 2 + (seed as usize % 3);
            let n = grid * grid;
            let logits = Tensor::<f64>::randn(&[1, 2, n, n], 2.0, &mut rng);
            let mut tape = Tape::inference();
            let weights = ops::softmax(&mut tape, &logits, 3).unwrap();
            let stride = 1.0 + seed as f64;
            let stats = AttentionStats {
                weights,
                heads: 2,
                grid: (grid, grid),
                window: None,
                stride_px: stride,
                includes_class_token: false,
                label: "prop".into(),
            };
            let d = attention_distance(&stats).unwrap();
            let diag = stride * (2.0 * ((grid - 1) as f64).powi(2)).sqrt();
            assert!((0.0..=diag).contains(&d), "seed {seed}: {d} not in [0, {diag}]");
        }
    }
}
