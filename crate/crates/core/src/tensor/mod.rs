//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations on tensors
//! that require gradients record a backward closure; [`Tensor::backward`] walks
//! the recorded graph once in reverse topological order and returns the
//! gradients of every named leaf it reaches. Forward values are never mutated;
//! the graph's closures are consumed by the backward pass.

mod conv;
mod element;
mod gradcheck;
mod linalg;
mod nn;
mod ops;

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use element::{DType, Element};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use linalg::gemm;
pub use nn::{scaled_dot_product_attention, timestep_embedding};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

type BackwardFn<T> = Box<dyn FnOnce(&[T]) -> Vec<Option<Vec<T>>> + Send>;

struct GradFn<T: Element> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: usize,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    is_leaf: bool,
    name: Option<String>,
    grad_fn: Mutex<Option<GradFn<T>>>,
}

/// Reference-counted n-dimensional array.
pub struct Tensor<T: Element = f32>(Arc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.0.requires_grad)
            .field("name", &self.0.name)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn from_node(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        name: Option<String>,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        assert_eq!(numel(&shape), data.len());
        let is_leaf = grad_fn.is_none();
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            shape,
            data,
            requires_grad,
            is_leaf,
            name,
            grad_fn: Mutex::new(grad_fn),
        }))
    }

    /// Constant tensor. Fails if `data.len()` does not match the shape.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape("new", shape, &[data.len()]));
        }
        Ok(Self::from_node("const", shape.to_vec(), data, false, None, None))
    }

    /// Named leaf whose gradient is reported by [`Tensor::backward`] when
    /// `requires_grad` is set.
    pub fn leaf(name: impl Into<String>, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape("leaf", shape, &[data.len()]));
        }
        Ok(Self::from_node(
            "leaf",
            shape.to_vec(),
            data,
            requires_grad,
            Some(name.into()),
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_node("const", shape.to_vec(), vec![T::zero(); numel(shape)], false, None, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_node("const", shape.to_vec(), vec![value; numel(shape)], false, None, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_node("const", vec![], vec![value], false, None, None)
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Self::from_node("const", shape.to_vec(), data, false, None, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Identity of the underlying node; clones share it.
    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data[0])
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    /// Copy with no graph history.
    pub fn detach(&self) -> Self {
        Self::from_node("const", self.0.shape.clone(), self.0.data.clone(), false, None, None)
    }

    /// Copy as a fresh named leaf.
    pub fn to_leaf(&self, name: impl Into<String>, requires_grad: bool) -> Self {
        Self::from_node(
            "leaf",
            self.0.shape.clone(),
            self.0.data.clone(),
            requires_grad,
            Some(name.into()),
            None,
        )
    }

    /// Converts to another element type. The result is a constant.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::from_node("const", self.0.shape.clone(), data, false, None, None)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Records an op output. The graph edge is only kept when recording is
    /// enabled and at least one input requires a gradient.
    pub(crate) fn record(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: impl FnOnce(&[T]) -> Vec<Option<Vec<T>>> + Send + 'static,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Ok(Self::from_node(op, shape, data, false, None, None));
        }
        let grad_fn = GradFn {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        };
        Ok(Self::from_node(op, shape, data, true, None, Some(grad_fn)))
    }

    fn graph_inputs(&self) -> Option<Vec<Tensor<T>>> {
        let guard = self.0.grad_fn.lock().expect("grad_fn lock poisoned");
        guard.as_ref().map(|g| g.inputs.clone())
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Returns the gradient of every named leaf with `requires_grad` that is
    /// reachable from `self`. Consumes the recorded graph: a second call on
    /// the same graph fails with [`Error::State`].
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(Gradients::default());
        }

        // Iterative post-order DFS over nodes that require grad.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            if !node.0.is_leaf {
                let inputs = node.graph_inputs().ok_or_else(|| {
                    Error::State(format!("graph already consumed at op '{}'", node.0.op))
                })?;
                stack.push((node.clone(), true));
                for input in inputs.into_iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input, false));
                    }
                }
            } else {
                stack.push((node, true));
            }
        }

        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        let mut out = Gradients::default();
        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.id()) else {
                continue;
            };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("backward of {}", node.0.op),
                });
            }
            if node.0.is_leaf {
                if let Some(name) = &node.0.name {
                    let t = Tensor::from_node("grad", node.0.shape.clone(), grad, false, None, None);
                    out.by_name.insert(name.clone(), t);
                }
                continue;
            }
            let grad_fn = node
                .0
                .grad_fn
                .lock()
                .expect("grad_fn lock poisoned")
                .take()
                .ok_or_else(|| Error::State(format!("graph already consumed at op '{}'", node.0.op)))?;
            let input_grads = (grad_fn.backward)(&grad);
            assert_eq!(input_grads.len(), grad_fn.inputs.len());
            for (input, g) in grad_fn.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                assert_eq!(g.len(), input.numel(), "grad size for op {}", node.0.op);
                match grads.get_mut(&input.id()) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                    None => {
                        grads.insert(input.id(), g);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradients keyed by leaf name.
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Default for Gradients<T> {
    fn default() -> Self {
        Gradients { by_name: BTreeMap::new() }
    }
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// A model weight with a stable path name.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize], trainable: bool) -> Result<Self> {
        let name = name.into();
        let tensor = Tensor::leaf(name.clone(), data, shape, trainable)?;
        Ok(Parameter { name, tensor, trainable })
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    /// Replaces the values, keeping name, shape and trainability.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        self.tensor = Tensor::leaf(self.name.clone(), data, self.tensor.shape(), self.trainable)?;
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if trainable != self.trainable {
            self.trainable = trainable;
            self.tensor = self.tensor.to_leaf(self.name.clone(), trainable);
        }
    }

    pub fn cast<U: Element>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            tensor: self.tensor.cast::<U>().to_leaf(self.name.clone(), self.trainable),
            trainable: self.trainable,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let w = Tensor::<f64>::leaf("w", vec![3.0], &[1], true).unwrap();
        let loss = w.mul(&w).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W x) with x = [1, 2]: every row of dW is x.
        let w = Tensor::<f64>::leaf("W", vec![0.5, -1.0, 2.0, 3.0, 0.1, 0.2], &[3, 2], true).unwrap();
        let x = Tensor::<f64>::new(vec![1.0, 2.0], &[2, 1]).unwrap();
        let loss = w.matmul(&x).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get("W").unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let w = Tensor::<f64>::leaf("w", vec![1.0, 2.0], &[2], true).unwrap();
        let y = w.scale(2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_state_error() {
        let w = Tensor::<f64>::leaf("w", vec![1.5], &[1], true).unwrap();
        let loss = w.mul(&w).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::State(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let w = Tensor::<f64>::leaf("w", vec![1.0, 2.0], &[2], true).unwrap();
        let c = Tensor::<f64>::leaf("frozen", vec![3.0, 4.0], &[2], false).unwrap();
        let loss = w.mul(&c).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[3.0, 4.0]);
        assert!(!grads.contains("frozen"));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(w*w + w) -> 2w + 1
        let w = Tensor::<f64>::leaf("w", vec![2.0, -1.0], &[2], true).unwrap();
        let loss = w.mul(&w).unwrap().add(&w).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn no_grad_disables_recording() {
        let w = Tensor::<f64>::leaf("w", vec![2.0], &[1], true).unwrap();
        let y = no_grad(|| w.mul(&w).unwrap());
        assert!(!y.requires_grad());
        assert!(w.mul(&w).unwrap().requires_grad());
    }

    #[test]
    fn overflow_is_reported() {
        let a = Tensor::<f32>::new(vec![f32::MAX], &[1]).unwrap();
        let err = a.scale(4.0).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn backward_leaves_forward_values_untouched() {
        let w = Tensor::<f64>::leaf("w", vec![1.0, -2.0, 0.5], &[3], true).unwrap();
        let h = w.silu().unwrap();
        let before = h.to_vec();
        let loss = h.mul(&h).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(h.to_vec(), before);
        assert_eq!(w.data(), &[1.0, -2.0, 0.5]);
    }
}
