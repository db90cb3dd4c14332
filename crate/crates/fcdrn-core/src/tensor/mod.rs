//! Dense N×C×H×W tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Rc`) to a dense row-major
//! buffer plus an optional gradient buffer. Forward operators live in
//! [`ops`]; when a [`Tape`] is supplied and an input requires gradients,
//! each operator pushes a backward step onto the tape. [`Tape::backward`]
//! replays the steps in reverse, accumulating `d loss / d tensor` into
//! every tensor that requires a gradient.
//!
//! Naive loop-based counterparts of the performance kernels are kept in
//! [`reference`] and serve as test oracles.

pub mod ops;
pub mod reference;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + rand::distributions::uniform::SampleUniform
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: &'static str;

    fn cast(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("f64 conversion")
    }

    fn to_f64x(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }

    /// C[m,n] = alpha * A[m,k] B[k,n] + beta * C. Strides in elements.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dims/strides.
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

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dimensions of a dense 4-D tensor, batch first.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major index.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}x{}x{}]", self.n, self.c, self.h, self.w)
    }
}

struct Inner<S> {
    shape: Shape,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: Cell<bool>,
}

/// Handle to a dense value buffer with optional gradient tracking.
///
/// Cloning shares the underlying storage; parameters stay alive across
/// training steps while intermediate activations are dropped together
/// with the tape that references them.
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} requires_grad={}", self.shape(), self.requires_grad())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
            }),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_parts(shape, vec![S::zero(); shape.numel()])
    }

    pub fn full(shape: Shape, v: S) -> Self {
        Self::from_parts(shape, vec![v; shape.numel()])
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: Shape, data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Gradient buffer, allocated to zeros on first access.
    pub fn grad_mut(&self) -> RefMut<'_, Vec<S>> {
        let numel = self.numel();
        RefMut::map(self.inner.grad.borrow_mut(), |g| {
            g.get_or_insert_with(|| vec![S::zero(); numel])
        })
    }

    pub fn add_to_grad(&self, delta: &[S]) {
        let mut g = self.grad_mut();
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// Same storage, detached from gradient tracking.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_parts(self.shape(), self.to_vec())
    }

    /// Bitwise identity of the underlying storage (not value equality).
    pub fn same_storage(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }
}

type BackwardStep = Box<dyn FnOnce()>;

/// Ordered record of backward steps for one forward pass.
///
/// Steps are recorded in execution order, which is a topological order of
/// the value graph; replaying them in reverse guarantees every output
/// gradient is fully accumulated before its producer runs.
#[derive(Default)]
pub struct Tape<S: Scalar> {
    steps: RefCell<Vec<BackwardStep>>,
    _marker: std::marker::PhantomData<S>,
}

/// Optional tape reference threaded through the forward operators.
pub type Tp<'a, S> = Option<&'a Tape<S>>;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { steps: RefCell::new(Vec::new()), _marker: std::marker::PhantomData }
    }

    pub fn len(&self) -> usize {
        self.steps.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.borrow().is_empty()
    }

    pub(crate) fn push(&self, step: impl FnOnce() + 'static) {
        self.steps.borrow_mut().push(Box::new(step));
    }

    /// Populate gradients of every `requires_grad` tensor reachable from
    /// `loss`, then clear the tape.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<()> {
        if !loss.requires_grad() {
            return Err(Error::invalid(
                "backward on a detached tensor: loss does not require gradients",
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::shape(format!("backward expects a scalar loss, got {}", loss.shape())));
        }
        {
            let mut g = loss.grad_mut();
            for v in g.iter_mut() {
                *v = S::one();
            }
        }
        let steps = std::mem::take(&mut *self.steps.borrow_mut());
        for step in steps.into_iter().rev() {
            step();
        }
        Ok(())
    }

    pub fn clear(&self) {
        self.steps.borrow_mut().clear();
    }
}

/// True when recording is active and any listed tensor requires a gradient.
pub(crate) fn tracking<S: Scalar>(tape: Tp<'_, S>, inputs: &[&Tensor<S>]) -> bool {
    tape.is_some() && inputs.iter().any(|t| t.requires_grad())
}
