//! Dense channels-first tensors with tape-free reverse-mode differentiation.
//!
//! Every operation that has at least one gradient-tracking input records a
//! backward closure together with its parents. [`Tensor::backward`] walks the
//! resulting graph in reverse topological order. Gradients of intermediate
//! nodes live only for the duration of one backward pass; gradients of leaves
//! accumulate across calls until [`Tensor::zero_grad`].

mod conv;
mod norm;
mod ops;
mod resample;

pub use conv::{conv3d, conv_transpose3d, ConvSpec};
pub use norm::{batch_norm_normalize, layer_norm_last};
pub use resample::{avg_pool3d, resample_trilinear};
pub(crate) use ops::sigmoid;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares data.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

thread_local! {
    static BRANCH_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` while fingerprinting the branch taken at every non-smooth point
/// (ReLU sign, channel argmax). Two evaluations with equal fingerprints lie on
/// the same smooth piece of the function.
pub fn trace_branches<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = BRANCH_TRACE.with(|t| t.replace(Some(0xcbf2_9ce4_8422_2325)));
    let r = f();
    let fingerprint = BRANCH_TRACE.with(|t| t.replace(outer)).expect("trace active");
    (r, fingerprint)
}

pub(crate) fn tracing_branches() -> bool {
    BRANCH_TRACE.with(|t| t.get().is_some())
}

pub(crate) fn record_branches(choices: impl Iterator<Item = u64>) {
    BRANCH_TRACE.with(|t| {
        if let Some(mut h) = t.get() {
            for c in choices {
                h = (h ^ c).wrapping_mul(0x0000_0100_0000_01b3);
            }
            t.set(Some(h));
        }
    });
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        if data.len() != numel_of(shape) {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Like [`Tensor::new`] but panics on a length mismatch.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::new(data, shape).expect("Tensor::from_vec")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec(vec![value; numel_of(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(vec![value], &[1])
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: None,
        }))
    }

    /// Returns a fresh gradient-tracking leaf holding a copy of this tensor's values.
    pub fn into_param(self) -> Self {
        let shape = self.0.shape.clone();
        let data = match Rc::try_unwrap(self.0) {
            Ok(node) => node.data.into_inner(),
            Err(rc) => rc.data.borrow().clone(),
        };
        Self::leaf(data, shape, true)
    }

    /// A non-tracking leaf with the same values.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Intended for optimizer updates and
    /// finite-difference probing of leaves; mutating a node that other graph
    /// nodes were computed from invalidates their recorded gradients.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Replaces the accumulated gradient (e.g. after external clipping).
    pub fn set_grad(&self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor {:?}",
                grad.len(),
                self.shape()
            )));
        }
        *self.0.grad.borrow_mut() = Some(grad);
        Ok(())
    }

    /// Name of the operation that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.0.data.borrow().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// True when any of `parents` requires gradients and recording is enabled.
    pub(crate) fn tracks(parents: &[&Tensor]) -> bool {
        grad_enabled() && parents.iter().any(|p| p.requires_grad())
    }

    /// Builds an operation result. `backward` maps the output gradient to one
    /// optional gradient per parent, in order. It is dropped unused when no
    /// parent tracks gradients.
    pub(crate) fn from_op<F>(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        name: &'static str,
        backward: F,
    ) -> Tensor
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(data.len(), numel_of(&shape), "{name}: data/shape mismatch");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{name}: produced a non-finite value"
        );
        let refs: Vec<&Tensor> = parents.iter().collect();
        if !Self::tracks(&refs) {
            return Self::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            grad_fn: Some(GradFn {
                name,
                parents,
                backward: Box::new(backward),
            }),
        }))
    }

    /// Accumulates d(self)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a single-element root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.is_leaf() {
            accumulate(&self.0.grad, &[1.0]);
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            let grad_fn = node.0.grad_fn.as_ref().expect("interior node");
            let parent_grads = (grad_fn.backward)(&g);
            debug_assert_eq!(parent_grads.len(), grad_fn.parents.len());
            for (parent, pg) in grad_fn.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel(), "{}: grad size", grad_fn.name);
                if parent.is_leaf() {
                    accumulate(&parent.0.grad, &pg);
                } else {
                    match pending.get_mut(&parent.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.key(), pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Interior nodes reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in gf.parents.iter().rev() {
                    if !p.is_leaf() && p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate(slot: &RefCell<Option<Vec<f64>>>, g: &[f64]) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
