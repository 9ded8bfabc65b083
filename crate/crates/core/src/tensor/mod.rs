//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value: `shape`, shared `data`, and an optional
//! tape node id that ties it into the computation graph of the [`Tape`] that
//! produced it. Operations live in [`ops`], [`conv`] and [`norm`] as free
//! functions taking `&mut Tape` so a single code path serves both inference
//! (non-recording tape) and training.

pub mod conv;
pub mod norm;
pub mod ops;
pub mod tape;

pub use tape::{grad_check, grad_check_with_step, GradCheckReport, NodeId, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Element types the tensor core is instantiated at. f32 is the training
/// precision; f64 is used by the finite-difference gradient checks.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;

    /// Error function, used by exact GELU. Evaluated in f64 for both element
    /// types so f32 results are correctly rounded from the f64 value.
    fn erf(self) -> Self {
        Self::from_f64(libm::erf(self.to_f64()))
    }

    /// `c = alpha * a @ b + beta * c` on row-major buffers.
    ///
    /// # Safety
    /// Caller guarantees the buffers are at least `m*k`, `k*n`, `m*n` long
    /// with the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Payload element type codes used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: DType = DType::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major n-dimensional array. Rank 0 (`shape == []`) is a scalar.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    /// Node on the tape that produced this value, if any.
    pub(crate) node: Option<NodeId>,
    /// Leaf marker: `Tape::watch_tensor` only traces tensors that ask for it.
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self::new(vec![], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![S::ZERO; shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![S::ONE; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    /// Gaussian init with the given std, drawn from the crate RNG.
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::SplitMix64) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.next_normal() * std))
            .collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::SplitMix64) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(lo + (hi - lo) * rng.next_f64()))
            .collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Single element of a rank-0 tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Same value, detached from any tape.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    /// View with a new shape over the same buffer. Not a tape operation;
    /// see `ops::reshape` for the traced variant.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.to_f64().is_finite())
    }

    /// Cast between element types through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        )
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub(crate) fn with_node(mut self, node: Option<NodeId>) -> Self {
        self.node = node;
        self
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Full description of a 2-D convolution: kernel, stride, dilation, padding
/// and channel groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn square(kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            dilation: (dilation, dilation),
            padding: (padding, padding),
            groups: 1,
        }
    }

    /// "Same" padding for odd kernels: `d*(k-1)/2`, so stride alone controls
    /// the spatial reduction.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self::square(kernel, stride, dilation, dilation * (kernel - 1) / 2)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Output extent along one axis, or an error if it underflows.
    pub fn out_extent(extent: usize, k: usize, s: usize, d: usize, p: usize) -> Result<usize> {
        let effective = d * (k - 1) + 1;
        let padded = extent + 2 * p;
        if padded < effective {
            return Err(Error::InvalidArgument(format!(
                "conv2d: input extent {extent} with padding {p} is smaller than the \
                 effective kernel {effective}"
            )));
        }
        Ok((padded - effective) / s + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            Self::out_extent(h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0)?,
            Self::out_extent(w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1)?,
        ))
    }
}
