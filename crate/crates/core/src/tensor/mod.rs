//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer plus an optional
//! graph node describing how it was produced. The graph is recorded
//! implicitly while the current thread has gradient recording enabled (see
//! [`no_grad`]) and at least one input requires a gradient. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into the leaf tensors that
//! were created with [`Tensor::param`].
//!
//! Only gradient buffers are mutable. Optimizers update a parameter by
//! replacing the tensor with a new leaf.

mod gradcheck;
mod nn;
mod ops;
mod scalar;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use nn::{attention_rows, CausalAttention};
pub use scalar::{DType, Scalar};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
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

/// Whether operations on this thread currently record graph nodes.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Receives the output gradient and the output values, returns one
/// gradient per input (`None` for inputs that do not require one).
type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Reference-counted n-dimensional array in row-major order.
pub struct Tensor<T: Scalar = f32>(Arc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.0.requires_grad);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        s.finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant tensor (never receives gradients).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape("param", shape, &[data.len()]));
        }
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![T::zero(); numel_of(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::build(shape.to_vec(), vec![v; numel_of(shape)], false, None)
    }

    /// Normal(0, std²) entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Same values as a leaf with the given `requires_grad` flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), requires_grad, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Name of the primitive that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.0.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let c = self.last_dim();
        if c == 0 {
            0
        } else {
            self.numel() / c
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.0.data[i * c..(i + 1) * c]
    }

    /// Accumulated gradient, if any has been deposited.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Value-identical copy cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Converts element type; the result is a constant.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::build(self.0.shape.clone(), data, false, None)
    }

    /// Bitwise equality of shape and values.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits64() == b.to_bits64())
    }

    /// Builds the result of a primitive. Records a node when recording is
    /// enabled and some input requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::build(shape, data, false, None);
        }
        let node = Node {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        };
        Self::build(shape, data, true, Some(node))
    }

    /// Accumulates d(self)/d(leaf) into every reachable leaf that requires a
    /// gradient. `self` must be a scalar produced on a recorded graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape("backward", self.shape(), &[]));
        }
        if !self.requires_grad() {
            return Err(Error::NotOnTape);
        }
        let tape = Tape::record(self);
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in tape.nodes.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let input_grads = (node.backward)(&g, t.data());
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "grad size for {}", node.op);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Topologically ordered view of the graph reachable from a tensor.
///
/// Only tensors that require gradients are included; every node appears
/// after all of its inputs.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn record(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, inputs expanded?)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    /// Ids of the recorded inputs of `t` (empty for leaves).
    pub fn inputs_of(t: &Tensor<T>) -> Vec<usize> {
        t.0.node
            .as_ref()
            .map(|n| n.inputs.iter().map(|i| i.id()).collect())
            .unwrap_or_default()
    }

    /// True when every node's recorded inputs appear before it.
    pub fn is_topological(&self) -> bool {
        let mut seen = HashSet::new();
        for t in &self.nodes {
            if let Some(node) = &t.0.node {
                if node
                    .inputs
                    .iter()
                    .any(|i| i.requires_grad() && !seen.contains(&i.id()))
                {
                    return false;
                }
            }
            seen.insert(t.id());
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_constants() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::Shape { .. })));
        let c = Tensor::<f64>::scalar(1.0);
        assert!(matches!(c.backward(), Err(Error::NotOnTape)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let w = Tensor::<f64>::param(vec![3.0, 4.0], &[2]).unwrap();
        let loss = x.detach().mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0]);
        let dd = x.detach().detach();
        assert!(dd.bitwise_eq(&x.detach()));
        assert!(!dd.requires_grad());
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn shared_subexpressions_sum_path_contributions() {
        // y = a*b; loss = sum(y + y*a): dloss/da = b + 2ab, dloss/db = a + a^2
        let a = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0], &[1]).unwrap();
        let y = a.mul(&b).unwrap();
        let loss = y.add(&y.mul(&a).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0 + 2.0 * 2.0 * 5.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0 + 4.0]);
    }

    #[test]
    fn tape_is_topological_and_acyclic() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.scale(2.0);
        let c = b.mul(&a).unwrap().add(&b).unwrap().sum();
        let tape = Tape::record(&c);
        assert!(tape.is_topological());
        let ids: HashSet<_> = tape.nodes().iter().map(|t| t.id()).collect();
        assert_eq!(ids.len(), tape.len());
        assert_eq!(tape.nodes().last().unwrap().id(), c.id());
    }
}
