use crate::autograd::Graph;
use crate::encoders::codebook::{codebook_nodes, nearest, soft_assign_node};
use crate::encoders::{Codebook, LocationFeatures};
use crate::error::{shape_err, Result};
use crate::tensor::{ReduceMode, Tensor};
use crate::Scalar;

fn check<T: Scalar>(f: &LocationFeatures<T>, cb: &Codebook<T>) -> Result<()> {
    if f.channels() != cb.d() {
        return Err(shape_err!("features have {} channels, codebook dim is {}", f.channels(), cb.d()));
    }
    Ok(())
}

fn residual_encode<T: Scalar>(f: &LocationFeatures<T>, cb: &Codebook<T>, second_order: bool) -> Result<Tensor<T>> {
    check(f, cb)?;
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let nodes = codebook_nodes(&mut g, cb, false)?;
    let a = soft_assign_node(&mut g, x, nodes)?;
    let v = g.residual_aggregate(x, a, nodes.mu, second_order)?;
    Ok(g.value(v).clone())
}

/// Soft-assignment VLAD: row k is `Σ_x η̄_k(x)(x − μ_k)`.
pub fn netvlad_encode<T: Scalar>(f: &LocationFeatures<T>, cb: &Codebook<T>) -> Result<Tensor<T>> {
    residual_encode(f, cb, false)
}

/// Soft-assignment Fisher-style encoding: row k is
/// `Σ_x η̄_k(x)·[x − μ_k, (x − μ_k)⊙(x − μ_k)]`.
pub fn netfv_encode<T: Scalar>(f: &LocationFeatures<T>, cb: &Codebook<T>) -> Result<Tensor<T>> {
    residual_encode(f, cb, true)
}

/// Soft bag of words: `Σ_x η̄(x)`.
pub fn netbovw_encode<T: Scalar>(f: &LocationFeatures<T>, cb: &Codebook<T>) -> Result<Tensor<T>> {
    check(f, cb)?;
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let nodes = codebook_nodes(&mut g, cb, false)?;
    let a = soft_assign_node(&mut g, x, nodes)?;
    let s = g.reduce(a, &[0], ReduceMode::Sum)?;
    Ok(g.value(s).clone())
}

/// Classical VLAD with nearest-center assignment (ties to the lowest index).
pub fn hard_vlad_encode<T: Scalar>(f: &LocationFeatures<T>, cb: &Codebook<T>) -> Result<Tensor<T>> {
    check(f, cb)?;
    let (k, d) = (cb.k(), cb.d());
    let mut out = vec![T::zero(); k * d];
    for l in 0..f.locations() {
        let x = f.tensor().row(l);
        let (c, _) = nearest(x, cb.mu());
        for j in 0..d {
            out[c * d + j] += x[j] - cb.mu().row(c)[j];
        }
    }
    Tensor::new(vec![k, d], out)
}
