//! Rank-4 tensors in batch-channel-height-width order with reverse-mode
//! automatic differentiation.
//!
//! All differentiable state flows through a [`Tape`]: leaves are registered,
//! operations append records, and [`Tape::backward`] replays the records in
//! reverse to populate gradients. Long-lived parameters live in a
//! [`ParamStore`] outside the tape and are bound onto it once per pass, so the
//! tape itself can be reset between steps.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Tape, TensorId};

use std::fmt;

/// Element type of the engine: `f32` for training, `f64` for gradient checks
/// and oracle comparisons.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shape of a rank-4 tensor: (batch, channel, height, width), all extents >= 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "shape extents must be >= 1");
        Shape4 { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index in row-major (n, c, h, w) order.
    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn scalar() -> Self {
        Shape4::new(1, 1, 1, 1)
    }

    pub fn is_scalar(&self) -> bool {
        self.count() == 1
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A rank-4 value on the tape. The gradient buffer is present exactly when the
/// tensor participates in differentiation.
#[derive(Clone, Debug)]
pub struct Tensor4<R: Real> {
    pub shape: Shape4,
    pub(crate) values: Vec<R>,
    pub(crate) grad: Option<Vec<R>>,
}

impl<R: Real> Tensor4<R> {
    pub fn new(shape: Shape4, values: Vec<R>, requires_grad: bool) -> Self {
        assert_eq!(shape.count(), values.len(), "value count must match shape");
        let grad = requires_grad.then(|| vec![R::zero(); values.len()]);
        Tensor4 { shape, values, grad }
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }
}

/// Identifier of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// A named, persistent parameter. Parameters are bound onto a tape once per
/// forward pass; gradients flow back through the binding.
#[derive(Clone, Debug)]
pub struct Param<R: Real> {
    pub name: String,
    pub shape: Shape4,
    pub value: Vec<R>,
}

/// Storage for all trainable parameters of a model. Lives across tape resets.
///
/// Each store carries a unique token so that binding parameters from several
/// stores onto one tape cannot alias; a cloned store keeps its token and
/// stands in for the original.
#[derive(Clone, Debug)]
pub struct ParamStore<R: Real> {
    params: Vec<Param<R>>,
    token: u64,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT: AtomicU64 = AtomicU64::new(0);
        ParamStore { params: Vec::new(), token: NEXT.fetch_add(1, Ordering::Relaxed) }
    }

    pub(crate) fn token(&self) -> u64 {
        self.token
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Shape4, value: Vec<R>) -> ParamId {
        assert_eq!(shape.count(), value.len(), "value count must match shape");
        self.params.push(Param { name: name.into(), shape, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> Shape4 {
        self.params[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[R] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [R] {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
