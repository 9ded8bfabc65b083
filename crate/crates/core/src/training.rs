//! Supervised training: AdamW with decoupled weight decay, cosine learning
//! rate with linear warmup, and a deterministic epoch loop.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::{augment, AugmentOps, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Module, ParamId, SlotMut};
use crate::rng::SplitMix64;
use crate::tensor::{ops, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update on raw slices. `t` is the 1-based step count for bias
/// correction. The decoupled decay `p -= lr * wd * p` uses the pre-step
/// parameter value, separately from the adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    debug_assert!(param.len() == grad.len() && grad.len() == m.len() && m.len() == v.len());
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::ONE;
    let eps = S::from_f64(cfg.eps);
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr_s = S::from_f64(lr);
    let decay = S::from_f64(lr * cfg.weight_decay);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let p0 = param[i];
        param[i] = p0 - lr_s * (m_hat / (v_hat.sqrt() + eps)) - decay * p0;
    }
}

struct Moments<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
}

/// AdamW over a module's parameters, keyed by parameter identity.
pub struct AdamW<S: Scalar> {
    pub cfg: AdamWConfig,
    state: HashMap<ParamId, Moments<S>>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: HashMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one step to every trainable parameter that received a gradient.
    /// `lr_scale(name)` optionally rescales the learning rate per parameter
    /// (layer-wise decay); identity when `None`.
    pub fn step_module<M: Module<S>>(
        &mut self,
        module: &mut M,
        tape: &Tape<S>,
        lr: f64,
        lr_scale: Option<&dyn Fn(&str) -> f64>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let mut err = None;
        module.visit_mut("", &mut |name, slot| {
            let SlotMut::Param(p) = slot else { return };
            if !p.trainable {
                return;
            }
            let Some(grad) = tape.grad_of_param(p) else {
                return;
            };
            if grad.shape() != p.value.shape() {
                err.get_or_insert_with(|| Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
                return;
            }
            let n = p.value.len();
            let slot_state = self.state.entry(p.id).or_insert_with(|| Moments {
                m: vec![S::ZERO; n],
                v: vec![S::ZERO; n],
            });
            let mut values = p.value.data().to_vec();
            let lr_p = lr * lr_scale.map_or(1.0, |f| f(&name));
            adamw_update(
                &mut values,
                grad.data(),
                &mut slot_state.m,
                &mut slot_state.v,
                t,
                lr_p,
                &self.cfg,
            );
            p.value = Tensor::new(p.value.shape().to_vec(), values);
        });
        err.map_or(Ok(()), Err)
    }
}

/// Linear warmup to `lr_base`, then cosine decay to `lr_min`:
/// `lr_min + (lr_base - lr_min)(1 + cos(pi * progress)) / 2`.
///
/// During warmup the rate is `lr_base * (step + 1) / warmup_steps`, which is
/// positive at step 0 and meets the cosine branch exactly at
/// `step == warmup_steps`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    lr_base: f64,
    lr_min: f64,
    warmup_steps: usize,
) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(Error::InvalidArgument(format!(
            "total_steps {total_steps} must exceed warmup_steps {warmup_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} past total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(lr_base * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_min + 0.5 * (lr_base - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Geometric layer-wise learning-rate factor for finetuning: parameters in
/// deeper blocks decay less. `name` follows the module traversal paths
/// (`ncs.3.`, `stage2.nc1.`, `head`, ...).
pub fn layer_decay_factor(name: &str, num_layers: usize, decay: f64) -> f64 {
    let layer = if name.starts_with("head") || name.starts_with("final_norm") || name.starts_with("norm") {
        num_layers + 1
    } else if let Some(rest) = name.strip_prefix("ncs.") {
        rest.split('.').next().and_then(|s| s.parse::<usize>().ok()).map_or(0, |i| i + 1)
    } else if let Some(pos) = name.find(".nc") {
        name[pos + 3..]
            .split('.')
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .map_or(0, |i| i + 1)
    } else {
        0 // patch embedding / stem
    };
    decay.powi((num_layers + 1 - layer) as i32)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub acc: f64,
}

/// Line-delimited training log.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.acc)
    }

    /// One JSON object per line: step records, then epoch records.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("serialize step"));
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serialize epoch"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at the given batch size; scaled linearly against the
    /// 5e-4 @ 512 anchor when `scale_lr` is set.
    pub lr_base: f64,
    pub lr_min: f64,
    pub scale_lr: bool,
    /// Warmup fraction of total steps.
    pub warmup_frac: f64,
    pub optim: AdamWConfig,
    pub seed: u64,
    pub augment: Option<AugmentOps>,
    /// Geometric layer-wise learning-rate decay for finetuning, off by
    /// default; see [`layer_decay_factor`].
    pub layer_decay: Option<f64>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            lr_base: 5e-4,
            lr_min: 1e-6,
            scale_lr: true,
            warmup_frac: 0.05,
            optim: AdamWConfig::default(),
            seed: 0,
            augment: None,
            layer_decay: None,
            verbose: false,
        }
    }
}

/// Fraction of correct argmax predictions over a dataset, evaluated in
/// batches without recording.
pub fn evaluate<S: Scalar>(model: &Model<S>, data: &Dataset<S>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluate on empty dataset".into()));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch = data.batch(chunk);
        let mut tape = Tape::inference();
        let (logits, _) = model.forward_classify(&mut tape, &batch.images, false, false)?;
        let preds = ops::argmax_rows(&logits);
        correct += preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train with cross-entropy. Deterministic given the seed: shuffling,
/// augmentation and every kernel use fixed reduction orders.
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    train: &Dataset<S>,
    eval: Option<&Dataset<S>>,
    cfg: &FitConfig,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("fit on empty dataset".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = ((total_steps as f64 * cfg.warmup_frac) as usize).min(total_steps.saturating_sub(1));
    let lr_base = if cfg.scale_lr {
        cfg.lr_base * cfg.batch_size as f64 / 512.0
    } else {
        cfg.lr_base
    };

    let mut optim = AdamW::new(cfg.optim);
    let depth: usize = model.stages.iter().map(|s| s.ncs.len()).sum();
    let lr_scale = cfg
        .layer_decay
        .map(|d| move |name: &str| layer_decay_factor(name, depth, d));
    let mut shuffle_rng = SplitMix64::new(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = train.batch(chunk);
            if let Some(ops) = &cfg.augment {
                batch = augment(&batch, ops, cfg.seed ^ (step as u64).wrapping_mul(0x9E37))?;
            }
            let lr = cosine_lr(step, total_steps, lr_base, cfg.lr_min, warmup)?;

            let mut tape = Tape::recording();
            let (logits, _) = model.forward_classify(&mut tape, &batch.images, true, false)?;
            let loss = ops::cross_entropy(&mut tape, &logits, &batch.labels)?;
            let loss_val = loss.item().to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_val} at step {step}"
                )));
            }
            tape.backward(&loss)?;
            match &lr_scale {
                Some(f) => optim.step_module(model, &tape, lr, Some(f))?,
                None => optim.step_module(model, &tape, lr, None)?,
            }

            log.steps.push(StepRecord {
                step,
                lr,
                loss: loss_val,
            });
            step += 1;
        }
        if let Some(eval_set) = eval {
            let acc = evaluate(model, eval_set, cfg.batch_size)?;
            log.epochs.push(EpochRecord { epoch, acc });
            if cfg.verbose {
                eprintln!(
                    "epoch {epoch}: loss {:.4} eval acc {:.2}%",
                    log.final_loss().unwrap_or(f64::NAN),
                    100.0 * acc
                );
            }
        } else if cfg.verbose {
            eprintln!(
                "epoch {epoch}: loss {:.4}",
                log.final_loss().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(log)
}
