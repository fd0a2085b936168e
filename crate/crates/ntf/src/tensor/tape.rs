//! Reverse-mode gradient tape.
//!
//! The tape is an eager single-threaded Wengert list: each differentiable
//! operation computes its value immediately and records a backward rule.
//! [`Tape::backward`] walks the recorded operations once, in strict reverse
//! creation order, accumulating gradients per variable with element-wise
//! addition in flat-index order — the traversal order is a pure function of
//! the recorded graph, so gradients are bitwise reproducible.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule for one recorded operation.
///
/// Implementations return one gradient per input slot: `Some` holding
/// `∂loss/∂input` contributions for slots where `needs[i]` is true, `None`
/// elsewhere. Returned tensors are *contributions*; the engine performs the
/// accumulation, so rules never read existing gradient state.
pub(crate) trait TapeOp: std::fmt::Debug {
    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
struct Node {
    inputs: Vec<usize>,
    op: Box<dyn TapeOp>,
}

/// Recording of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Option<Node>>,
    requires: Vec<bool>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Register a leaf value. Its `requires_grad` flag decides whether
    /// [`Tape::backward`] reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires = t.requires_grad();
        self.push(t, requires, None)
    }

    /// Register a non-trainable constant regardless of the tensor's flag.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// Value of a variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Number of variables recorded so far.
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Whether gradients will flow into this variable.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Record an op result. `requires` is derived from the inputs; the
    /// backward rule is dropped when no input is trainable.
    pub(crate) fn push_op(
        &mut self,
        out: Tensor,
        inputs: Vec<usize>,
        op: Box<dyn TapeOp>,
    ) -> Var {
        let requires = inputs.iter().any(|&i| self.requires[i]);
        let node = if requires { Some(Node { inputs, op }) } else { None };
        self.push(out, requires, node)
    }

    fn push(&mut self, t: Tensor, requires: bool, node: Option<Node>) -> Var {
        self.vals.push(t);
        self.requires.push(requires);
        self.nodes.push(node);
        Var(self.vals.len() - 1)
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Every `requires_grad` leaf receives a gradient: reachable leaves get
    /// the accumulated derivative, unreachable ones get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = &self.vals[loss.0];
        if !loss_val.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_val.shape()),
            ));
        }

        let mut bufs: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        if self.requires[loss.0] {
            let mut seed = Tensor::zeros(loss_val.shape());
            seed.data_mut()[0] = 1.0;
            bufs[loss.0] = Some(seed);
        }

        // Strict reverse creation order; each node visited at most once.
        for id in (0..=loss.0).rev() {
            let Some(node) = &self.nodes[id] else { continue };
            let Some(out_grad) = bufs[id].take() else { continue };

            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.vals[i]).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.requires[i]).collect();
            let contribs = node.op.backward(&inputs, &self.vals[id], &out_grad, &needs);
            debug_assert_eq!(contribs.len(), node.inputs.len());

            for (slot, contrib) in contribs.into_iter().enumerate() {
                let Some(g) = contrib else { continue };
                let target = node.inputs[slot];
                debug_assert!(self.requires[target]);
                if g.shape() != self.vals[target].shape() {
                    return Err(Error::contract(
                        "backward",
                        format!(
                            "gradient shape {:?} does not match value shape {:?}",
                            g.shape(),
                            self.vals[target].shape()
                        ),
                    ));
                }
                match &mut bufs[target] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot_buf @ None => *slot_buf = Some(g),
                }
            }
        }

        // Materialize zeros for trainable leaves the loss never touched.
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        for id in 0..self.vals.len() {
            if self.nodes[id].is_none() && self.requires[id] {
                grads[id] = Some(match bufs[id].take() {
                    Some(g) => g,
                    None => Tensor::zeros(self.vals[id].shape()),
                });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for constants and op results.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap().with_requires_grad(true));
        let y = tape.dot(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn product_rule_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![2.0]).unwrap().with_requires_grad(true));
        let y = tape.leaf(Tensor::from_vec(&[1], vec![5.0]).unwrap().with_requires_grad(true));
        let p = tape.dot(x, y).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let y = tape.relu(x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }), "{err:?}");
    }

    #[test]
    fn unreachable_trainable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap().with_requires_grad(true));
        let unused = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap().with_requires_grad(true));
        let y = tape.dot(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap().with_requires_grad(true));
        let c = tape.constant(Tensor::from_vec(&[1], vec![4.0]).unwrap());
        let y = tape.dot(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates_both_branches() {
        // loss = x·x + x·x  →  d/dx = 4x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![1.5]).unwrap().with_requires_grad(true));
        let a = tape.dot(x, x).unwrap();
        let b = tape.dot(x, x).unwrap();
        let loss = tape.add(a, b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::from_vec(&[4], vec![0.3, -0.7, 1.1, 0.05])
                    .unwrap()
                    .with_requires_grad(true),
            );
            let r = tape.relu(x).unwrap();
            let e = tape.exp(r).unwrap();
            let s = tape.sum(e).unwrap();
            let g = tape.backward(s).unwrap();
            g.get(x).unwrap().data().to_vec()
        };
        let first = build();
        for _ in 0..3 {
            let again = build();
            assert!(first.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
