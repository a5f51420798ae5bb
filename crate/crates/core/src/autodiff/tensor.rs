use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::TensorError;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording a graph on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|g| g.replace(true)));
    f()
}

/// Corrupts the backward rule of the named op on the current thread.
///
/// Used by the gradient-check suite to prove that a broken rule is caught.
/// Pass `None` to restore correct behaviour.
#[doc(hidden)]
pub fn inject_fault(op: Option<&'static str>) {
    FAULT.with(|f| f.set(op));
}

fn injected_fault() -> Option<&'static str> {
    FAULT.with(|f| f.get())
}

pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct GradFn {
    pub name: &'static str,
    pub parents: Vec<Tensor>,
    /// `(grad_out, out_data, parents) -> grads for each parent`.
    pub backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// An n-dimensional row-major `f64` array that records the operations applied
/// to it so gradients can be propagated back with [`Tensor::backward`].
///
/// Cloning is cheap: clones share the same node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: Mutex::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    /// Creates a leaf tensor. Every extent must be positive and `data` must
    /// hold exactly as many values as the shape implies.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "new",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                detail: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    /// Same values, marked as a gradient-tracking leaf.
    pub fn requires_grad(self, flag: bool) -> Self {
        if self.0.grad_fn.is_none() && self.0.requires_grad == flag {
            return self;
        }
        Self::build(self.0.shape.clone(), self.0.data.clone(), flag, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        name: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let tracked = !NO_GRAD.with(Cell::get) && parents.iter().any(|p| p.tracks_grad());
        let grad_fn = tracked.then(|| GradFn { name, parents, backward });
        Self::build(shape, data, tracked, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Identity of the underlying node; stable across clones.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    fn accumulate(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a one-element tensor. Leaf gradients are added
    /// to whatever is already stored, so callers zero leaves between steps.
    /// Gradients of intermediate nodes are consumed by the sweep.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracks_grad() {
            return Ok(());
        }

        // Node ids grow monotonically and every op is created after its
        // parents, so descending id order is a valid reverse topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.tracks_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|n| std::cmp::Reverse(n.id()));

        self.accumulate(vec![1.0]);
        let fault = injected_fault();
        for node in &nodes {
            let Some(gf) = &node.0.grad_fn else { continue };
            let Some(g_out) = node.0.grad.lock().expect("grad lock poisoned").take() else { continue };
            let mut grads = (gf.backward)(&g_out, &node.0.data, &gf.parents);
            if fault == Some(gf.name) {
                for g in grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
                }
            }
            for (p, g) in gf.parents.iter().zip(grads) {
                if let Some(g) = g {
                    if p.tracks_grad() {
                        debug_assert_eq!(g.len(), p.numel(), "bad grad length from {}", gf.name);
                        p.accumulate(g);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
        assert!(Tensor::new(vec![1.0; 6], &[2, 3]).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().requires_grad(true);
        assert!(matches!(t.backward(), Err(TensorError::Contract(_))));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::full(&[2], 1.0).requires_grad(true);
        let y = no_grad(|| x.scale(2.0));
        assert!(y.is_leaf() && !y.tracks_grad());
        assert!(x.scale(2.0).tracks_grad());
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
    }
}
