use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::autodiff::ops::Op;
use crate::error::{Error, Result};
use crate::scalar::Real;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether newly created ops record graph nodes on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_grad_enabled(false);
    f()
}

pub(crate) struct Node<T: Real> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<[T]>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op<T>>,
}

/// Dense row-major array that may participate in a computation graph.
///
/// Node ids grow monotonically per thread, so a node's parents always carry
/// smaller ids than the node itself; the backward pass relies on this for its
/// topological order.
#[derive(Clone)]
pub struct Tensor<T: Real> {
    pub(crate) node: Rc<Node<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.numel();
        let head: Vec<_> = self.data().iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &format_args!("{head:?}{}", if n > 8 { " .." } else { "" }))
            .finish()
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize, op: &'static str) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(op, format!("invalid shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} holds {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn raw(shape: Vec<usize>, data: Rc<[T]>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                op,
            }),
        }
    }

    /// Constant tensor (never a differentiation target).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len(), "from_vec")?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("from_vec ({v})")));
        }
        Ok(Self::raw(shape.to_vec(), data.into(), false, None))
    }

    /// Leaf tensor; `requires_grad` makes it a valid differentiation target.
    pub fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(if requires_grad { t.with_grad() } else { t })
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![1], Rc::from(vec![v]), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    /// New leaf sharing this tensor's values, detached from any graph and
    /// marked as requiring grad.
    pub fn with_grad(&self) -> Self {
        Self::raw(self.node.shape.clone(), Rc::clone(&self.node.data), true, None)
    }

    /// New constant leaf sharing this tensor's values.
    pub fn detach(&self) -> Self {
        Self::raw(self.node.shape.clone(), Rc::clone(&self.node.data), false, None)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        Ok(self.node.data[0])
    }

    pub(crate) fn op(&self) -> Option<&Op<T>> {
        self.node.op.as_ref()
    }

    /// Records the result of an op. A graph node is kept only when grad mode
    /// is on and some parent requires grad.
    pub(crate) fn record(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(op.name().to_string()));
        }
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Ok(Self::raw(shape, data.into(), track, track.then_some(op)))
    }

    /// Records a view-like result that reuses `data` without copying.
    pub(crate) fn record_shared(shape: Vec<usize>, data: Rc<[T]>, op: Op<T>) -> Self {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Self::raw(shape, data, track, track.then_some(op))
    }

    pub(crate) fn shared_data(&self) -> Rc<[T]> {
        Rc::clone(&self.node.data)
    }
}
