//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tensor`] is an immutable N-d value plus an optional node in the
//! computation graph that produced it. Ops record a backward closure when any
//! input is connected to a `requires_grad` leaf; [`Tensor::backward`] walks
//! the graph once in reverse topological order and accumulates `∂loss/∂leaf`
//! into each leaf's grad buffer. Gradients accumulate across calls until the
//! trainer zeroes them.
//!
//! Graph execution is serial. Heavy kernels (conv, matmul, warp) use data
//! parallelism internally with a fixed work split per output cell, so results
//! are bit-identical regardless of thread count.

mod adam;
pub mod gradcheck;
pub mod kernels;
mod ops;

pub use adam::AdamParams;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

/// Errors raised by tensor ops and the parameter store.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    #[error("{op}: NaN in input")]
    NanInput { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("parameter '{name}' has no gradient")]
    MissingGrad { name: String },

    #[error("parameter '{name}' already exists in the store")]
    DuplicateParam { name: String },

    #[error("parameter '{name}' missing from {side} store")]
    MissingParam { name: String, side: &'static str },
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64]) + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: RwLock<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Dense N-d f64 value, optionally connected to the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor::from_parts(shape.to_vec(), data, false, None)
    }

    /// Leaf tensor that will receive gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::from_parts(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Snapshot of the value buffer.
    pub fn data(&self) -> Vec<f64> {
        self.inner.data.read().unwrap().clone()
    }

    /// Run `f` over the value buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.read().unwrap())
    }

    pub fn item(&self) -> f64 {
        let d = self.inner.data.read().unwrap();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Snapshot of the gradient buffer, if populated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.read().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    /// Overwrite the value buffer (parameter updates only).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.write().unwrap();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    /// True when this tensor participates in the graph.
    fn live(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.write().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Like [`accumulate_grad`] but takes ownership, so the common
    /// single-consumer case stores the buffer without a copy.
    fn accumulate_grad_owned(&self, g: Vec<f64>) {
        let mut slot = self.inner.grad.write().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Backpropagate from a scalar loss. Visits each graph node exactly once
    /// in reverse topological order; repeated calls accumulate.
    pub fn backward(&self) -> TensorResult<()> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.inner.shape.clone() });
        }
        if !self.live() {
            return Ok(());
        }

        // Iterative post-order DFS: parents first, then the node itself, so
        // iterating the list in reverse processes every consumer before its
        // producers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if p.live() && !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            if let Some(node) = &t.inner.node {
                let g = t
                    .inner
                    .grad
                    .read()
                    .unwrap()
                    .clone()
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                (node.backward)(&g);
            }
        }

        // Intermediate grads are scratch space; drop them so only leaves keep
        // gradients and repeated backward calls start clean.
        for t in order.iter() {
            if t.inner.node.is_some() {
                *t.inner.grad.write().unwrap() = None;
            }
        }
        Ok(())
    }
}

// ── Parameter store ─────────────────────────────────────────────────────────

#[derive(Clone, Default)]
pub(crate) struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named map of trainable tensors with Adam state. Iteration order is always
/// sorted by name.
#[derive(Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    adam_step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> TensorResult<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.to_string() });
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    pub fn adam_step_count(&self) -> u64 {
        self.adam_step
    }

    pub(crate) fn adam_state(&self) -> (u64, &BTreeMap<String, Moments>) {
        (self.adam_step, &self.moments)
    }

    pub(crate) fn restore_adam_state(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.adam_step = step;
        self.moments = moments;
    }

    /// Deep copy (fresh tensors, same values). Adam state is not copied.
    pub fn clone_values(&self, requires_grad: bool) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, t) in &self.params {
            let copy = if requires_grad {
                Tensor::param(t.shape(), t.data())
            } else {
                Tensor::new(t.shape(), t.data())
            };
            out.params.insert(name.clone(), copy);
        }
        out
    }

    /// Copy values from `src` into this store's existing tensors.
    pub fn copy_values_from(&mut self, src: &ParameterStore) -> TensorResult<()> {
        for (name, t) in &self.params {
            let s = src.params.get(name).ok_or_else(|| TensorError::MissingParam {
                name: name.clone(),
                side: "source",
            })?;
            if s.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "copy_values_from",
                    detail: format!("{name}: {:?} vs {:?}", t.shape(), s.shape()),
                });
            }
            t.set_data(&s.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_square() {
        // loss = x·x at x=3 → grad 6
        let x = Tensor::param(&[1], vec![3.0]);
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let x = Tensor::param(&[1], vec![3.0]);
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = x.add(&x).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn diamond_graph_visits_each_node_once() {
        // loss = (x + x) * (x + x) = 4x² → grad 8x
        let x = Tensor::param(&[1], vec![2.0]);
        let s = x.add(&x).unwrap();
        let loss = s.mul(&s).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![16.0]);
    }

    #[test]
    fn constant_graphs_record_nothing() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]);
        let b = Tensor::new(&[2], vec![3.0, 4.0]);
        let c = a.mul(&b).unwrap();
        assert!(!c.live());
    }

    #[test]
    fn store_rejects_duplicates_and_iterates_sorted() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::param(&[1], vec![0.0])).unwrap();
        s.insert("a", Tensor::param(&[1], vec![0.0])).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::param(&[1], vec![0.0])),
            Err(TensorError::DuplicateParam { .. })
        ));
        let names: Vec<&str> = s.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }
}
