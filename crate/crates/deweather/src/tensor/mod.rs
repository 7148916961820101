//! Reverse-mode automatic differentiation over `f64` ndarray values.
//!
//! Every operation builds a node in a dynamic tape; `backward()` on a scalar
//! walks the tape in reverse topological order and accumulates gradients into
//! the leaves that were created with `requires_grad = true`. Branches whose
//! inputs are all constants collapse into constant nodes, so frozen networks
//! cost nothing at backward time.
//!
//! All arithmetic is serial f64: two runs over the same inputs produce
//! bit-identical values and gradients.

mod conv;
mod linalg;
mod ops;
mod shape;

pub mod gradcheck;
pub mod optim;

use ndarray::{ArrayD, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

pub(crate) struct BackCtx<'a> {
    /// Gradient of the loss with respect to this node's value.
    pub grad: &'a ArrayD<f64>,
    /// This node's forward value.
    pub value: &'a ArrayD<f64>,
    pub parents: &'a [Tensor],
}

type BackwardFn = Box<dyn Fn(&BackCtx)>;

struct Node {
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a tape node. Cloning is shallow.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    /// Constant leaf: no gradient is ever stored for it.
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Trainable leaf.
    pub fn param(value: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Constant branch: drop the tape edges entirely.
            return Tensor::constant(value);
        }
        Tensor {
            node: Rc::new(Node {
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        self.node.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.node.value.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let v = self.node.value.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Overwrite the stored value. Only meaningful for leaves (the optimizer
    /// updates parameters between steps, after the previous tape is dropped).
    pub fn set_value(&self, value: ArrayD<f64>) {
        let mut v = self.node.value.borrow_mut();
        assert_eq!(v.shape(), value.shape(), "set_value shape mismatch");
        *v = value;
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Cut the tape: same value, no gradient flow into the producer.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Reverse-accumulate gradients from this scalar into every reachable
    /// leaf with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar loss");
        if !self.node.requires_grad {
            return;
        }
        let order = self.topo_order();
        {
            let shape = self.node.value.borrow().raw_dim();
            *self.node.grad.borrow_mut() = Some(ArrayD::ones(shape));
        }
        for t in order.iter().rev() {
            let Some(back) = &t.node.backward else {
                continue;
            };
            let grad = t.node.grad.borrow();
            let Some(grad) = grad.as_ref() else {
                continue;
            };
            let value = t.node.value.borrow();
            let ctx = BackCtx {
                grad,
                value: &value,
                parents: &t.node.parents,
            };
            back(&ctx);
        }
        // Intermediate grads are not needed once the walk is done; free them
        // so only leaves keep gradients.
        for t in order.iter() {
            if t.node.backward.is_some() {
                *t.node.grad.borrow_mut() = None;
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        // Iterative post-order DFS; (node, child_cursor).
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr_id());
        while let Some((t, cursor)) = stack.pop() {
            if cursor < t.node.parents.len() {
                let child = t.node.parents[cursor].clone();
                stack.push((t, cursor + 1));
                if child.node.requires_grad && visited.insert(child.ptr_id()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

/// Accumulate `delta` into `t`'s gradient (no-op for constants).
pub(crate) fn accum(t: &Tensor, delta: ArrayD<f64>) {
    if !t.node.requires_grad {
        return;
    }
    debug_assert_eq!(
        t.node.value.borrow().shape(),
        delta.shape(),
        "gradient shape mismatch"
    );
    let mut g = t.node.grad.borrow_mut();
    match g.as_mut() {
        Some(acc) => *acc += &delta,
        None => *g = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn constant_branches_are_pruned() {
        let a = Tensor::constant(arr1(&[1.0, 2.0]).into_dyn());
        let b = Tensor::constant(arr1(&[3.0, 4.0]).into_dyn());
        let c = a.mul(&b);
        assert!(!c.requires_grad());
        assert!(c.node.parents.is_empty());
    }

    #[test]
    fn simple_chain_gradient() {
        // y = sum((x * x) + x); dy/dx = 2x + 1
        let x = Tensor::param(arr1(&[1.0, -2.0, 0.5]).into_dyn());
        let y = x.mul(&x).add(&x).sum_all();
        y.backward();
        let g = x.grad().unwrap();
        assert_eq!(g.as_slice().unwrap(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        // y = sum(x + x) -> dy/dx = 2
        let x = Tensor::param(arr1(&[5.0]).into_dyn());
        let y = x.add(&x).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap()[[0]], 2.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::param(arr1(&[2.0]).into_dyn());
        let y = x.mul(&x.detach()).sum_all();
        y.backward();
        // Only the live branch contributes: d/dx (x * const) = const = 2.
        assert_eq!(x.grad().unwrap()[[0]], 2.0);
    }
}
