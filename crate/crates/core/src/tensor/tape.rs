//! The gradient tape: a Wengert list recording every differentiable op.
//!
//! Ops append nodes in execution order, which is automatically a topological
//! order of the computation DAG. `backward` walks it in reverse, invoking each
//! node's backward closure and accumulating gradients by node id. A tape is
//! owned by exactly one forward/backward pass; inference uses a non-recording
//! tape so the same op signatures serve both paths.

use crate::error::{Error, Result};
use crate::nn::ParamId;
use crate::tensor::{ops, Scalar, Tensor};
use std::collections::HashMap;

pub type NodeId = usize;

type BackwardClosure<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Option<Tensor<S>>> + Send>;

struct Node<S: Scalar> {
    name: &'static str,
    /// Shape of the node's value; gradients must match it.
    shape: Vec<usize>,
    /// Tape ids of the op's traced inputs, aligned with the backward output.
    inputs: Vec<Option<NodeId>>,
    backward: Option<BackwardClosure<S>>,
}

pub struct Tape<S: Scalar> {
    recording: bool,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    watched: HashMap<ParamId, NodeId>,
    backward_done: bool,
}

impl<S: Scalar> Tape<S> {
    /// Tape that records ops for a later `backward`.
    pub fn recording() -> Self {
        Self {
            recording: true,
            nodes: Vec::new(),
            grads: Vec::new(),
            watched: HashMap::new(),
            backward_done: false,
        }
    }

    /// Tape that ignores all pushes; used for inference and finite differences.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::recording()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a leaf for a tensor that wants gradients. Returns a traced
    /// view sharing the same buffer.
    pub fn watch_tensor(&mut self, t: &Tensor<S>) -> Tensor<S> {
        if !self.recording {
            return t.detach();
        }
        let id = self.push_node(Node {
            name: "leaf",
            shape: t.shape().to_vec(),
            inputs: vec![],
            backward: None,
        });
        t.detach().with_node(Some(id))
    }

    /// Leaf registration for a named parameter, deduplicated by param id so
    /// every use of the parameter in one pass shares a node (and therefore
    /// accumulates into one gradient).
    pub fn watch(&mut self, param: &crate::nn::Param<S>) -> Tensor<S> {
        if !self.recording || !param.trainable {
            return param.value.detach();
        }
        if let Some(&id) = self.watched.get(&param.id) {
            return param.value.detach().with_node(Some(id));
        }
        let traced = self.watch_tensor(&param.value);
        self.watched.insert(param.id, traced.node.unwrap());
        traced
    }

    fn push_node(&mut self, node: Node<S>) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Record an op node. Returns `None` (untraced output) when not recording
    /// or when no input is traced.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        out_shape: &[usize],
        inputs: Vec<Option<NodeId>>,
        backward: BackwardClosure<S>,
    ) -> Option<NodeId> {
        if !self.recording || inputs.iter().all(Option::is_none) {
            return None;
        }
        Some(self.push_node(Node {
            name,
            shape: out_shape.to_vec(),
            inputs,
            backward: Some(backward),
        }))
    }

    /// Reverse-topological gradient accumulation from a scalar loss.
    ///
    /// Calling it twice on one tape is an error: the training loop must build
    /// a fresh tape per step.
    pub fn backward(&mut self, loss: &Tensor<S>) -> Result<()> {
        if loss.rank() != 0 {
            return Err(Error::Tape(format!(
                "backward requires a rank-0 loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss.node.ok_or_else(|| {
            Error::Tape("backward on a tensor that is not on this tape (detached loss)".into())
        })?;
        if root >= self.nodes.len() {
            return Err(Error::Tape("loss node id out of range for this tape".into()));
        }
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; gradients are not re-accumulated".into(),
            ));
        }
        self.backward_done = true;

        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root] = Some(Tensor::scalar(S::ONE));

        for i in (0..=root).rev() {
            let grad = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            debug_assert_eq!(
                grad.shape(),
                &self.nodes[i].shape[..],
                "gradient shape mismatch at node {i} ({})",
                self.nodes[i].name
            );
            let Some(backward) = &self.nodes[i].backward else {
                continue; // leaf
            };
            let input_grads = backward(&grad);
            debug_assert_eq!(input_grads.len(), self.nodes[i].inputs.len());
            let inputs = self.nodes[i].inputs.clone();
            for (slot, grad_in) in inputs.into_iter().zip(input_grads) {
                let (Some(j), Some(g)) = (slot, grad_in) else {
                    continue;
                };
                self.grads[j] = Some(match self.grads[j].take() {
                    None => g,
                    Some(acc) => ops::add_raw(&acc, &g),
                });
            }
        }
        Ok(())
    }

    /// Gradient of a traced tensor after `backward`. `None` when the tensor
    /// did not contribute to the loss.
    pub fn grad_of(&self, t: &Tensor<S>) -> Option<Tensor<S>> {
        t.node.and_then(|id| self.grads.get(id)?.clone())
    }

    pub fn grad_of_param(&self, param: &crate::nn::Param<S>) -> Option<Tensor<S>> {
        self.watched
            .get(&param.id)
            .and_then(|&id| self.grads.get(id)?.clone())
    }
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences (h = 1e-5, f64).
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_with_step(f, x, tol, 1e-5)
}

/// [`grad_check`] with an explicit difference step. Larger functions want a
/// larger step: the difference quotient carries `|f| * eps / (2h)` of
/// cancellation noise, which can swamp near-zero gradient elements at the
/// default step.
pub fn grad_check_with_step<F>(f: F, x: &Tensor<f64>, tol: f64, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let h: f64 = step;
    if x.len() > 10_000 {
        return Err(Error::InvalidArgument(format!(
            "grad_check input too large to difference: {} elements",
            x.len()
        )));
    }

    let mut tape = Tape::recording();
    let traced = tape.watch_tensor(x);
    let y = f(&mut tape, &traced)?;
    if y.rank() != 0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            y.shape()
        )));
    }
    tape.backward(&y)?;
    let analytic = tape
        .grad_of(&traced)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::new(x.shape().to_vec(), data);
        let mut t = Tape::inference();
        Ok(f(&mut t, &probe)?.item())
    };

    let mut max_rel_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err < tol,
    })
}
