//! Dense `f64` tensors with tape-free reverse-mode automatic differentiation.
//!
//! Every tensor produced by a differentiable op keeps an `Rc` to its inputs
//! together with the op kind and whatever forward context the backward rule
//! needs. The graph is therefore a DAG rooted at the loss; [`Tensor::backward`]
//! orders it topologically and visits every node exactly once.
//!
//! Tensor values are immutable after creation, with one exception: leaf
//! tensors (parameters) can be overwritten through [`Tensor::update_data`],
//! which is what optimizers use.

mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub(crate) use kernels::{broadcast_offsets, broadcast_shape};
use ops::Op;

/// A dense row-major tensor of 64-bit floats.
///
/// Cloning is cheap and shares storage; use [`Tensor::deep_clone`] for an
/// independent copy.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    node: Option<Node>,
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if data.len() <= 16 {
            s.field("data", &*data);
        } else {
            s.field("data", &format_args!("[{} values]", data.len()));
        }
        s.field("requires_grad", &self.0.requires_grad.get()).finish()
    }
}

impl Tensor {
    /// Builds a constant tensor. Fails if `shape` does not match `data.len()`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Builds a trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![value; n], shape.to_vec(), false)
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Self::leaf(data, shape.to_vec(), false)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::leaf(data, shape.to_vec(), false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            node: None,
        }))
    }

    /// Result of an op. The node is only recorded when some input tracks
    /// gradients, so inference passes build no graph.
    fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: Vec<Tensor>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let tracked = inputs.iter().any(Tensor::requires_grad);
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(tracked),
            node: tracked.then_some(Node { op, inputs }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking. Only meaningful on leaves; used to freeze
    /// one network while the other is being updated.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy sharing nothing with the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Independent copy preserving `requires_grad` (but not the graph).
    pub fn deep_clone(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), self.requires_grad())
    }

    /// Overwrites the values of a leaf tensor in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract(
                "update_data is only allowed on leaf tensors".into(),
            ));
        }
        f(&mut self.0.data.borrow_mut());
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    fn ptr(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from a scalar loss, accumulating into `grad` of every
    /// reachable tensor that tracks gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(vec![1.0])
    }

    /// Back-propagates an explicit upstream gradient of the same shape as
    /// `self`.
    pub fn backward_with(&self, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::shape("backward_with", self.shape(), &[seed.len()]));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward() on a tensor that does not track gradients".into(),
            ));
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        pending.insert(self.ptr(), seed);
        let mut finished: Vec<(Tensor, Vec<f64>)> = Vec::with_capacity(order.len());

        for t in order.into_iter().rev() {
            let Some(g) = pending.remove(&t.ptr()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let grads = node.op.backward(&node.inputs, &t, &g)?;
                for (input, grad) in node.inputs.iter().zip(grads) {
                    let Some(grad) = grad else { continue };
                    match pending.get_mut(&input.ptr()) {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.ptr(), grad);
                        }
                    }
                }
            }
            finished.push((t, g));
        }

        for (t, g) in finished {
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that track gradients, inputs before users.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.ptr()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
