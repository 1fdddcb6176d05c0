use nalgebra::DMatrix;

use crate::autograd::{Graph, NodeId};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{matmul_ex, Tensor};
use crate::Scalar;

/// Linear K-way classifier `softmax(Wᵀd + bias)`, W stored D×K.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead<T> {
    pub w: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> SoftmaxHead<T> {
    pub fn zeros(dim: usize, classes: usize) -> Result<Self> {
        Ok(SoftmaxHead { w: Tensor::zeros(&[dim, classes])?, bias: Tensor::zeros(&[classes])? })
    }

    pub fn dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn classes(&self) -> usize {
        self.w.dims()[1]
    }

    /// Class scores for a D-element descriptor.
    pub fn logits(&self, desc: &Tensor<T>) -> Result<Tensor<T>> {
        if desc.len() != self.dim() {
            return Err(shape_err!("descriptor has {} entries, head expects {}", desc.len(), self.dim()));
        }
        let row = desc.reshape(&[1, desc.len()])?;
        let z = matmul_ex(&row, &self.w, false, false)?.into_reshaped(&[self.classes()])?;
        z.add(&self.bias)
    }

    pub fn nodes(&self, g: &mut Graph<T>, trainable: bool) -> HeadNodes {
        if trainable {
            HeadNodes { w: g.param(self.w.clone()), bias: g.param(self.bias.clone()) }
        } else {
            HeadNodes { w: g.constant(self.w.clone()), bias: g.constant(self.bias.clone()) }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub w: NodeId,
    pub bias: NodeId,
}

/// Logits node (1×K) for a descriptor node of any shape holding D entries.
pub fn head_logits<T: Scalar>(g: &mut Graph<T>, head: HeadNodes, desc: NodeId) -> Result<NodeId> {
    let d = g.value(desc).len();
    let row = g.reshape(desc, &[1, d])?;
    let z = g.matmul(row, head.w, false, false)?;
    g.add_row_bias(z, head.bias)
}

/// Negative log-likelihood of `label` under the head's softmax.
pub fn softmax_loss<T: Scalar>(g: &mut Graph<T>, head: HeadNodes, desc: NodeId, label: usize) -> Result<NodeId> {
    let z = head_logits(g, head, desc)?;
    g.softmax_nll(z, label)
}

/// Fit `head` to descriptors `xs` by bound optimization on
/// `mean NLL + ½·l2·(‖W‖² + ‖bias‖²)`. Each step solves against the fixed
/// curvature bound `½·XᵀX/n + l2·I` (bias as a constant feature), so the
/// objective never increases. `each(t, nll, head)` sees the mean NLL and
/// the head after step t.
pub fn fit_bound(
    head: &mut SoftmaxHead<f64>,
    xs: &[Vec<f64>],
    labels: &[usize],
    l2: f64,
    iters: usize,
    mut each: impl FnMut(usize, f64, &SoftmaxHead<f64>) -> Result<()>,
) -> Result<()> {
    let (d, k, n) = (head.dim(), head.classes(), xs.len());
    if n == 0 || labels.len() != n {
        return Err(config_err!("head fit needs matching nonempty descriptors and labels"));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != d) {
        return Err(shape_err!("descriptor has {} entries, head expects {d}", x.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(config_err!("label {l} out of range for {k} classes"));
    }
    if !(l2 > 0.0 && l2.is_finite()) {
        return Err(config_err!("head l2 must be positive, got {l2}"));
    }
    let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { xs[i][j] } else { 1.0 });
    let mut bound = x.tr_mul(&x) * (0.5 / n as f64);
    for j in 0..=d {
        bound[(j, j)] += l2;
    }
    let chol =
        bound.cholesky().ok_or_else(|| Error::Numeric("head curvature bound is not positive definite".into()))?;
    let mut theta =
        DMatrix::from_fn(d + 1, k, |j, c| if j < d { head.w.data()[j * k + c] } else { head.bias.data()[c] });
    let write = |theta: &DMatrix<f64>, head: &mut SoftmaxHead<f64>| -> Result<()> {
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("head fit produced non-finite weights".into()));
        }
        head.w = Tensor::from_fn(&[d, k], |o| theta[(o / k, o % k)])?;
        head.bias = Tensor::from_fn(&[k], |c| theta[(d, c)])?;
        Ok(())
    };
    for t in 0..=iters {
        let mut p = &x * &theta;
        let mut nll = 0.0;
        for i in 0..n {
            let m = (0..k).map(|c| p[(i, c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (p[(i, c)] - m).exp()).sum();
            nll += m + z.ln() - p[(i, labels[i])];
            for c in 0..k {
                p[(i, c)] = (p[(i, c)] - m).exp() / z;
            }
            p[(i, labels[i])] -= 1.0;
        }
        if t > 0 {
            write(&theta, head)?;
            each(t, nll / n as f64, head)?;
        }
        if t == iters {
            break;
        }
        let grad = x.tr_mul(&p) / n as f64 + &theta * l2;
        theta -= chol.solve(&grad);
    }
    Ok(())
}
