//! Dense N-D tensors (N,C,H,W for feature maps) with tape-based
//! reverse-mode automatic differentiation.
//!
//! Every op that produces a tensor from tensors records a [`GradFn`] when
//! any input participates in the gradient tape. [`Tensor::backward`] walks
//! the recorded graph in reverse topological order and accumulates
//! gradients into the `requires_grad` leaves.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod resize;

/// Element type: f64 by default, f32 behind the `f32` feature.
/// Reductions accumulate in f64 either way.
#[cfg(feature = "f32")]
pub type Elem = f32;
#[cfg(not(feature = "f32"))]
pub type Elem = f64;

fn next_id() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule for one recorded op. Returns one gradient buffer per
/// parent (None for parents that do not need one).
pub trait GradFn: Send + Sync {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>>;
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    // Arc-swapped so the optimizer can update parameters in place while
    // recorded graphs keep reading the snapshot they captured.
    data: RwLock<Arc<Vec<Elem>>>,
    requires_grad: bool,
    is_leaf: bool,
    grad: RwLock<Option<Vec<Elem>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// Shared handle to an immutable-after-construction tensor.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        data: Vec<Elem>,
        requires_grad: bool,
        is_leaf: bool,
        parents: Vec<Tensor>,
        grad_fn: Option<Box<dyn GradFn>>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data: RwLock::new(Arc::new(data)),
                requires_grad,
                is_leaf,
                grad: RwLock::new(None),
                parents,
                grad_fn,
            }),
        }
    }

    /// Constant leaf (not part of the tape).
    pub fn from_vec(shape: &[usize], data: Vec<Elem>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor::make(shape.to_vec(), data, false, true, Vec::new(), None)
    }

    /// Trainable leaf: participates in the tape and receives gradients.
    pub fn param(shape: &[usize], data: Vec<Elem>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::make(shape.to_vec(), data, true, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: Elem) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: Elem) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Op result. The tape entry is dropped when no input needs gradients,
    /// so pure inference builds no graph.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<Elem>,
        parents: Vec<Tensor>,
        grad_fn: Box<dyn GradFn>,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        if requires {
            Tensor::make(shape, data, true, false, parents, Some(grad_fn))
        } else {
            Tensor::make(shape, data, false, true, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Snapshot of the current data. Cheap: clones an Arc.
    pub fn data(&self) -> Arc<Vec<Elem>> {
        self.inner.data.read().expect("tensor lock").clone()
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> Elem {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.is_leaf
    }

    /// Replace the data buffer (optimizer updates, checkpoint loads).
    /// Graphs recorded before the call keep their snapshot.
    pub fn set_data(&self, data: Vec<Elem>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                axis: "numel",
                expected: self.numel().to_string(),
                got: data.len().to_string(),
            });
        }
        *self.inner.data.write().expect("tensor lock") = Arc::new(data);
        Ok(())
    }

    /// Same storage, detached from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape: self.inner.shape.clone(),
                data: RwLock::new(self.data()),
                requires_grad: false,
                is_leaf: true,
                grad: RwLock::new(None),
                parents: Vec::new(),
                grad_fn: None,
            }),
        }
    }

    pub fn grad(&self) -> Option<Vec<Elem>> {
        self.inner.grad.read().expect("tensor lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().expect("tensor lock") = Some(vec![0.0; self.numel()]);
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.write().expect("tensor lock") = None;
    }

    fn accumulate_grad(&self, g: &[Elem]) {
        let mut guard = self.inner.grad.write().expect("tensor lock");
        match guard.as_mut() {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += *s;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into
    /// every reachable `requires_grad` leaf; call [`Tensor::zero_grad`]
    /// between steps to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }

        // Iterative postorder DFS over parent edges; reversed postorder
        // visits each node before any of its parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                stack.push((node.clone(), child + 1));
                let parent = node.inner.parents[child].clone();
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut grads: HashMap<u64, Vec<Elem>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(grad_out) = grads.remove(&node.id()) else {
                continue;
            };
            if node.inner.is_leaf {
                if node.requires_grad() {
                    node.accumulate_grad(&grad_out);
                }
                continue;
            }
            if let Some(grad_fn) = &node.inner.grad_fn {
                let parent_grads = grad_fn.backward(&grad_out, &node.inner.parents);
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, pg) in node.inner.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (d, s) in acc.iter_mut().zip(&pg) {
                                *d += *s;
                            }
                        }
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sum of a slice with 64-bit accumulation regardless of `Elem`.
pub fn sum64(xs: &[Elem]) -> f64 {
    let mut acc = 0.0f64;
    for &x in xs {
        acc += x as f64;
    }
    acc
}
