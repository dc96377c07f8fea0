//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation pushes its forward value onto the [`Tape`] together with a
//! closure mapping the output cotangent to one cotangent per parent. Parents
//! that do not require gradients are skipped; on a [`Tape::no_grad`] tape no
//! closures are built at all.

mod conv;
mod norm;
mod ops;
mod resample;

use std::cell::RefCell;
use std::sync::Arc;

pub use conv::{conv2d, conv2d_forward, Conv2dSpec};
pub use norm::{
    batchnorm2d, batchnorm2d_eval_forward, l2_normalize_rows, l2_normalize_rows_forward,
    softmax_rows, softmax_rows_forward, BatchStats, BnMode,
};
pub use ops::{
    abs, add, bmm, bmm_forward, clamp, concat_channels, crop_hw, linear, matmul, pad_hw, permute,
    relu6, reshape, scale, sigmoid, sum_all, weighted_sum,
};
pub use resample::{upsample_bilinear, upsample_bilinear_forward};
pub(crate) use norm::{l2_normalize_row_backward, softmax_in_place};
pub(crate) use ops::sigmoid_scalar;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output cotangent to cotangents for each parent. The flag slice
/// says which parents actually need one.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(Arc::new(value), Vec::new(), None, self.grad_enabled)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Arc::new(value), Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(
        &self,
        value: Arc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Record an operation result. `make_backward` is only invoked when some
    /// parent requires a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        make_backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Var {
        value.debug_check_finite("forward");
        let needs = self.grad_enabled && parents.iter().any(|&p| self.requires_grad(p));
        if needs {
            let backward = make_backward();
            self.push(
                Arc::new(value),
                parents.iter().map(|p| p.0).collect(),
                Some(backward),
                true,
            )
        } else {
            self.push(Arc::new(value), Vec::new(), None, false)
        }
    }

    /// Backpropagate from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let shape = self.shape(root);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::Precondition(format!(
                "backward root must have one element, got shape {shape:?}"
            )));
        }
        self.backward_with(root, Tensor::full(&shape, T::one()))
    }

    /// Backpropagate an explicit cotangent for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[root.0].value.shape() {
            return Err(Error::shape("backward seed", seed.shape(), nodes[root.0].value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaf variables after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = add(&tape, x, x).unwrap();
        let s = sum_all(&tape, y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let y = add(&tape, x, c).unwrap();
        let g = tape.backward(sum_all(&tape, y)).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn no_grad_tape_records_nothing_differentiable() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        let y = relu6(&tape, x);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        assert!(tape.backward(x).is_err());
    }
}
