//! Parameters, layers, and the named-state traversal used by the optimizer,
//! the parameter counter and the checkpoint format.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{conv, norm, ops, ConvSpec, Scalar, Tape, Tensor};

/// Process-unique parameter identity; ties optimizer state and tape leaves
/// to a parameter across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A learnable tensor.
#[derive(Debug)]
pub struct Param<S: Scalar> {
    pub id: ParamId,
    pub value: Tensor<S>,
    pub trainable: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value,
            trainable: true,
        }
    }
}

/// A visited piece of model state.
pub enum Slot<'a, S: Scalar> {
    Param(&'a Param<S>),
    /// Non-trainable state updated during forward (BN running statistics).
    Buffer(&'a RwLock<Tensor<S>>),
}

pub enum SlotMut<'a, S: Scalar> {
    Param(&'a mut Param<S>),
    Buffer(&'a mut RwLock<Tensor<S>>),
}

/// Deterministic named traversal of all model state. The visit order defines
/// the checkpoint entry order.
pub trait Module<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All state tensors (trainable + buffers) in traversal order.
pub fn state_tensors<S: Scalar, M: Module<S>>(module: &M) -> Vec<(String, Tensor<S>)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, slot| {
        let value = match slot {
            Slot::Param(p) => p.value.detach(),
            Slot::Buffer(b) => b.read().expect("buffer lock poisoned").detach(),
        };
        out.push((name, value));
    });
    out
}

/// Overwrite model state from a name -> tensor map. Every model slot must be
/// present with a matching shape, and every map entry must be consumed.
pub fn load_state<S: Scalar, M: Module<S>>(
    module: &mut M,
    mut entries: std::collections::HashMap<String, Tensor<S>>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut shape_err = None;
    module.visit_mut("", &mut |name, slot| {
        let Some(tensor) = entries.remove(&name) else {
            missing.push(name);
            return;
        };
        let target_shape = match &slot {
            SlotMut::Param(p) => p.value.shape().to_vec(),
            SlotMut::Buffer(b) => b.read().expect("buffer lock poisoned").shape().to_vec(),
        };
        if tensor.shape() != target_shape {
            shape_err.get_or_insert_with(|| Error::ShapeMismatch {
                op: "load_state",
                lhs: target_shape.clone(),
                rhs: tensor.shape().to_vec(),
            });
            return;
        }
        match slot {
            SlotMut::Param(p) => p.value = tensor,
            SlotMut::Buffer(b) => *b.write().expect("buffer lock poisoned") = tensor,
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::UnmatchedNames(missing));
    }
    if !entries.is_empty() {
        let mut extra: Vec<String> = entries.into_keys().collect();
        extra.sort();
        return Err(Error::UnmatchedNames(extra));
    }
    Ok(())
}

/// Element counts: everything, trainables only, and buffers.
pub fn count_state<S: Scalar, M: Module<S>>(module: &M) -> (usize, usize, usize) {
    let (mut total, mut trainable, mut buffers) = (0, 0, 0);
    module.visit("", &mut |_, slot| match slot {
        Slot::Param(p) => {
            total += p.value.len();
            if p.trainable {
                trainable += p.value.len();
            }
        }
        Slot::Buffer(b) => {
            let n = b.read().expect("buffer lock poisoned").len();
            total += n;
            buffers += n;
        }
    });
    (total, trainable, buffers)
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

/// Affine map over the last axis: `y = x W + b`, weight stored `[Din, Dout]`.
#[derive(Debug)]
pub struct Linear<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(din: usize, dout: usize, bias: bool, rng: &mut SplitMix64) -> Self {
        Self {
            weight: Param::new(Tensor::randn(&[din, dout], 0.02, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[dout]))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let w = tape.watch(&self.weight);
        let y = ops::matmul(tape, x, &w)?;
        match &self.bias {
            Some(b) => {
                let bv = tape.watch(b);
                ops::add(tape, &y, &bv)
            }
            None => Ok(y),
        }
    }
}

impl<S: Scalar> Module<S> for Linear<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), Slot::Param(b));
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), SlotMut::Param(b));
        }
    }
}

#[derive(Debug)]
pub struct LayerNorm<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub eps: f64,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[dim])),
            beta: Param::new(Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let g = tape.watch(&self.gamma);
        let b = tape.watch(&self.beta);
        norm::layernorm(tape, x, &g, &b, self.eps)
    }
}

impl<S: Scalar> Module<S> for LayerNorm<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        f(join(prefix, "gamma"), Slot::Param(&self.gamma));
        f(join(prefix, "beta"), Slot::Param(&self.beta));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        f(join(prefix, "gamma"), SlotMut::Param(&mut self.gamma));
        f(join(prefix, "beta"), SlotMut::Param(&mut self.beta));
    }
}

#[derive(Debug)]
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: RwLock<Tensor<S>>,
    pub running_var: RwLock<Tensor<S>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: RwLock::new(Tensor::zeros(&[channels])),
            running_var: RwLock::new(Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let g = tape.watch(&self.gamma);
        let b = tape.watch(&self.beta);
        let (mean, var) = {
            let m = self.running_mean.read().expect("bn lock poisoned");
            let v = self.running_var.read().expect("bn lock poisoned");
            (m.detach(), v.detach())
        };
        let out = norm::batchnorm2d(tape, x, &g, &b, &mean, &var, self.momentum, self.eps, training)?;
        if let Some((new_mean, new_var)) = out.updated_running {
            *self.running_mean.write().expect("bn lock poisoned") = new_mean;
            *self.running_var.write().expect("bn lock poisoned") = new_var;
        }
        Ok(out.output)
    }
}

impl<S: Scalar> Module<S> for BatchNorm2d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        f(join(prefix, "gamma"), Slot::Param(&self.gamma));
        f(join(prefix, "beta"), Slot::Param(&self.beta));
        f(join(prefix, "running_mean"), Slot::Buffer(&self.running_mean));
        f(join(prefix, "running_var"), Slot::Buffer(&self.running_var));
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        f(join(prefix, "gamma"), SlotMut::Param(&mut self.gamma));
        f(join(prefix, "beta"), SlotMut::Param(&mut self.beta));
        f(join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running_mean));
        f(join(prefix, "running_var"), SlotMut::Buffer(&mut self.running_var));
    }
}

#[derive(Debug)]
pub struct Conv2d<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    pub spec: ConvSpec,
}

impl<S: Scalar> Conv2d<S> {
    /// Kaiming-normal weight init (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn new(cin: usize, cout: usize, spec: ConvSpec, rng: &mut SplitMix64) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = (cin / spec.groups) * kh * kw;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(Tensor::randn(&[cout, cin / spec.groups, kh, kw], std, rng)),
            bias: Some(Param::new(Tensor::zeros(&[cout]))),
            spec,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let w = tape.watch(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.watch(b));
        conv::conv2d(tape, x, &w, b.as_ref(), self.spec)
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, S>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), Slot::Param(b));
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, S>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), SlotMut::Param(b));
        }
    }
}
