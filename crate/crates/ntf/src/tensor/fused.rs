//! Crate-internal hook for fused scalar operations.
//!
//! Loss kernels compute their scalar forward value directly and provide a
//! hand-derived adjoint. This adapter lets them participate in the tape's
//! reverse pass without exposing the op machinery outside the crate.

use super::tape::{Tape, TapeOp, Var};
use super::Tensor;

/// Backward rule of a fused scalar-valued operation.
///
/// `go` is the upstream derivative of the loss with respect to this op's
/// scalar output. Implementations return one gradient per input slot,
/// `None` where `needs[i]` is false.
pub(crate) trait FusedBackward: 'static {
    fn backward(&self, inputs: &[&Tensor], go: f64, needs: &[bool]) -> Vec<Option<Tensor>>;
}

struct FusedAdapter {
    inner: Box<dyn FusedBackward>,
}

impl std::fmt::Debug for FusedAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FusedAdapter")
    }
}

impl TapeOp for FusedAdapter {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        self.inner.backward(inputs, out_grad.data()[0], needs)
    }
}

/// Record a fused op's scalar result and its backward rule on the tape.
pub(crate) fn push_fused(
    tape: &mut Tape,
    out: Tensor,
    inputs: Vec<Var>,
    inner: Box<dyn FusedBackward>,
) -> Var {
    debug_assert!(out.is_scalar());
    let ids = inputs.iter().map(|v| v.0).collect();
    tape.push_op(out, ids, Box::new(FusedAdapter { inner }))
}
