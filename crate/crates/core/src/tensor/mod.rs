//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every operation returns a fresh immutable [`Tensor`]. When any input
//! requires a gradient (and [`no_grad`] is not active) the output keeps its
//! parents together with a backward closure, so the graph is simply the web
//! of `Rc` links. [`Tensor::backward`] topologically sorts the reachable
//! nodes and accumulates gradients into the leaves.
//!
//! Broadcasting is limited to scalar-with-tensor; all other mismatches are
//! reported as [`Error::Shape`].

mod conv;
mod norm;
mod ops;
pub mod checkpoint;
pub mod gradcheck;
pub mod param;
pub mod real;
mod sample;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use conv::{conv2d, conv3d, ConvSpec};
pub use norm::{batch_norm, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use param::ParamStore;
pub use real::Real;
pub use sample::bilinear_sample;

use crate::error::{Error, Result};

/// Gradient routine of one node: receives the output gradient, the output
/// values and the parents, returns one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Real> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// A dense n-dimensional tensor. Cloning is cheap (reference counted).
pub struct Tensor<T: Real = f32> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { node: Rc::clone(&self.node) }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} holds {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients during [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::build(t.node.shape.clone(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Builds the output of a differentiable operation.
    ///
    /// When gradients are disabled or no parent requires one, the backward
    /// closure is dropped and a constant is returned.
    pub fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::build(shape, data, true, Some(GradFn { name, parents, backward }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    /// Converts element type; the result is a constant.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.node.data.iter().map(|&v| U::lit(v.as_f64())).collect();
        Tensor::build(self.node.shape.clone(), data, false, None)
    }

    pub fn same_node(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Reverse-mode differentiation from a one-element tensor.
    ///
    /// Gradients accumulate into every reachable leaf that requires them;
    /// intermediate gradients are discarded.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.node.id, vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node.id) else { continue };
            match &t.node.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, &t.node.data, &gf.parents);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad size from {}", gf.name);
                        match grads.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.node.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes requiring grad (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Self::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let err = x.backward().unwrap_err();
        assert!(matches!(err, Error::NonScalarBackward(_)));
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_x() {
        let x = Tensor::<f64>::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        x.zero_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = Tensor::<f64>::param(&[2], vec![3.0, -1.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0, -1.0]);
    }

    #[test]
    fn repeated_backward_after_clearing_is_identical() {
        let x = Tensor::<f32>::param(&[4], vec![0.3, -0.2, 1.5, 2.0]).unwrap();
        let y = x.sigmoid().mul(&x).unwrap().sum();
        y.backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();
        y.backward().unwrap();
        assert_eq!(g1, x.grad().unwrap());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.mul_scalar(2.0).sum());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn reshape_checks_count() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        assert!(x.reshape(&[3, 2]).is_ok());
        assert!(x.reshape(&[4, 2]).is_err());
    }
}
