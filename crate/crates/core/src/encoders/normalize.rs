use crate::autograd::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::Scalar;

/// `sign(v)·√|v|` elementwise.
pub fn signed_sqrt<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(v.clone());
    let y = g.signed_sqrt(x);
    g.value(y).clone()
}

/// `v / ‖v‖₂`, or `v` itself when the norm is at most 1e-12.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(v.clone());
    let y = g.l2_normalize(x);
    g.value(y).clone()
}

/// Flatten a pooled matrix into a 1×D row, then signed square-root and ℓ2.
pub fn normalize_descriptor<T: Scalar>(g: &mut Graph<T>, pooled: NodeId) -> crate::Result<NodeId> {
    let n = g.value(pooled).len();
    let flat = g.reshape(pooled, &[1, n])?;
    let s = g.signed_sqrt(flat);
    Ok(g.l2_normalize(s))
}
