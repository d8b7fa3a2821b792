//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record a backward rule together with
//! their inputs; calling [`Tensor::backward`] on a scalar walks that record
//! in reverse creation order and accumulates gradients into the leaves.
//!
//! Tensor ids come from a global monotonic counter, so every input of a node
//! has a smaller id than the node itself. Sorting reachable nodes by id
//! therefore gives a topological order without an explicit DFS post-order.

mod conv;
mod gemm;
mod gradcheck;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use conv::Conv2dSpec;
pub use gemm::gemm_acc;
pub use gradcheck::gradcheck;
pub use ops::{set_softmax_fault, softmax_fault_enabled};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
///
/// Tensors produced inside do not require gradients, even if their inputs do.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid configuration: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Immutable n-dimensional array of `f64` in row-major order.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.inner.shape);
        if self.numel() <= 16 {
            d.field("data", &self.inner.data);
        }
        if let Some(node) = &self.inner.node {
            d.field("op", &node.op);
        }
        d.field("requires_grad", &self.inner.requires_grad).finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Creates a leaf tensor. Every extent must be positive.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Config {
                op: "new",
                msg: format!("zero extent in shape {shape:?}"),
            });
        }
        if numel_of(shape) != data.len() {
            return Err(TensorError::Dimension {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self::build(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    /// Returns a new leaf sharing nothing with `self` that tracks gradients.
    pub fn requires_grad(self) -> Self {
        let data = self.inner.data.clone();
        Self::build(self.inner.shape.clone(), data, true, None)
    }

    /// Copy of the values as a fresh leaf without gradient tracking.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Result of an operation. Records `backward` only when some input
    /// tracks gradients and recording is enabled.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.tracks_grad());
        let node = track.then(|| Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Self::build(shape, data, track, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn tracks_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Name of the operation that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Accumulated gradient, if a backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Gradients accumulate into the `grad` buffer of every tracking leaf.
    /// Repeated calls without [`Tensor::zero_grad`] add up.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks_grad() {
            return Err(TensorError::Usage(
                "backward called on a tensor that is not part of a graph".into(),
            ));
        }
        let graph = Graph::build(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in graph.nodes.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                None => {
                    let mut slot = t.inner.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let input_grads = (node.backward)(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
                    for (inp, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.tracks_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "grad size from {}", node.op);
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Tensors reachable from a root through gradient-tracking edges, in
/// topological (creation) order.
pub struct Graph {
    pub nodes: Vec<Tensor>,
}

impl Graph {
    pub fn build(root: &Tensor) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.tracks_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.inner.node {
                stack.extend(node.inputs.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(Tensor::id);
        Graph { nodes }
    }

    /// Leaves that will receive gradients.
    pub fn leaves(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().filter(|t| t.is_leaf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0])
            .unwrap()
            .requires_grad();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let loss = x.mul_scalar(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let x = Tensor::ones(&[3]).requires_grad();
        let y = x.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(TensorError::Usage(_))));
    }

    #[test]
    fn graph_visits_each_node_once() {
        let x = Tensor::ones(&[2]).requires_grad();
        let a = x.mul_scalar(2.0);
        let b = a.add(&a).unwrap();
        let c = b.mul(&a).unwrap().sum();
        let g = Graph::build(&c);
        let ids: HashSet<u64> = g.nodes.iter().map(Tensor::id).collect();
        assert_eq!(ids.len(), g.nodes.len());
        assert_eq!(g.leaves().count(), 1);
        c.backward().unwrap();
        // c = sum(2a * a) = sum(8x^2) -> 16x
        assert_eq!(x.grad().unwrap(), vec![16.0, 16.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::ones(&[2]).requires_grad();
        let y = no_grad(|| x.mul_scalar(2.0));
        assert!(!y.tracks_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn constructor_rejects_mismatch() {
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }
}
