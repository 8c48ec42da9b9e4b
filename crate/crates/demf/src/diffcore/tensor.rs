//! The tensor type and the backward pass.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Numeric precision for newly computed tensor values.
///
/// F64 is the default so gradient checks are decisive; F32 rounds every op
/// output through f32 for speed comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

static PRECISION_F32: AtomicBool = AtomicBool::new(false);

pub fn set_precision(p: Precision) {
    PRECISION_F32.store(p == Precision::F32, Ordering::Relaxed);
}

#[inline]
pub(crate) fn quantize(data: &mut [f64]) {
    if PRECISION_F32.load(Ordering::Relaxed) {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) needs_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
}

/// Dense row-major tensor node in a reverse-mode computation DAG.
///
/// Cloning is cheap (shared node). Graphs are confined to one thread;
/// distinct graphs may run concurrently.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal product of shape"
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
                needs_grad: false,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    pub fn requires_grad(self, flag: bool) -> Tensor {
        {
            let mut inner = self.inner.borrow_mut();
            inner.requires_grad = flag;
            inner.needs_grad = flag;
        }
        self
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        quantize(&mut data);
        let needs = parents.iter().any(|p| p.inner.borrow().needs_grad);
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad: false,
                needs_grad: needs,
                parents: if needs { parents } else { Vec::new() },
                backward: if needs { Some(backward) } else { None },
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() requires a single-element tensor");
        inner.data[0]
    }

    pub fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data = data;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// A leaf copy of this tensor's values, cut from the gradient graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(&inner.shape, inner.data.clone())
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.needs_grad {
            return;
        }
        let n = inner.data.len();
        debug_assert_eq!(contribution.len(), n);
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Runs the backward pass from a scalar loss, accumulating `d(loss)/d(t)`
    /// into every reachable tensor with `needs_grad`. Each node is visited
    /// exactly once, in reverse topological (creation) order.
    pub fn backward(&self) -> Result<(), DiffError> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(DiffError::NonScalarLoss(inner.shape.clone()));
            }
        }
        self.accumulate_grad(&[1.0]);

        // Collect reachable grad-needing nodes; creation ids give a valid
        // topological order since op outputs are created after their inputs.
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(t) = stack.pop() {
            let (id, needs) = {
                let inner = t.inner.borrow();
                (inner.id, inner.needs_grad)
            };
            if !needs || !seen.insert(id) {
                continue;
            }
            for p in t.inner.borrow().parents.iter() {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.inner.borrow().id));

        for node in nodes {
            let (grad, parents, has_backward) = {
                let inner = node.inner.borrow();
                match (&inner.grad, &inner.backward) {
                    (Some(g), Some(_)) => (g.clone(), inner.parents.clone(), true),
                    _ => (Vec::new(), Vec::new(), false),
                }
            };
            if has_backward {
                let inner = node.inner.borrow();
                if let Some(f) = &inner.backward {
                    f(&grad, &parents);
                }
            }
        }
        Ok(())
    }
}

/// A named leaf tensor with `requires_grad = true`.
#[derive(Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Parameter {
        Parameter {
            tensor: Tensor::new(shape, data).requires_grad(true),
            name: name.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ops;

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).requires_grad(true);
        assert!(matches!(t.backward(), Err(DiffError::NonScalarLoss(_))));
    }

    #[test]
    fn using_a_tensor_twice_doubles_its_gradient() {
        let x = Tensor::new(&[2], vec![3.0, -1.0]).requires_grad(true);
        let once = ops::sum(&ops::mul(&x, &Tensor::new(&[2], vec![2.0, 5.0])));
        once.backward().unwrap();
        let g1 = x.grad().unwrap();

        x.zero_grad();
        let y = ops::add(&x, &Tensor::zeros(&[2]));
        let twice = ops::sum(&ops::mul(
            &ops::add(&y, &x),
            &Tensor::new(&[2], vec![2.0, 5.0]),
        ));
        twice.backward().unwrap();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * *a);
        }
    }
}
