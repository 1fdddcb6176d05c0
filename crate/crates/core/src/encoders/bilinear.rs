use crate::autograd::Graph;
use crate::encoders::LocationFeatures;
use crate::error::{shape_err, Result};
use crate::tensor::{matmul_ex, Tensor};
use crate::Scalar;

/// Pooled second-order descriptor, flattened row-major from its M×N matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearDescriptor<T> {
    pub m: usize,
    pub n: usize,
    pub vec: Tensor<T>,
    pub normalized: bool,
}

impl<T: Scalar> BilinearDescriptor<T> {
    pub fn from_matrix(x: Tensor<T>, normalized: bool) -> Result<Self> {
        let (m, n) = x.shape2()?;
        Ok(BilinearDescriptor { m, n, vec: x.into_reshaped(&[m * n])?, normalized })
    }

    pub fn matrix(&self) -> Tensor<T> {
        self.vec.reshape(&[self.m, self.n]).expect("m·n matches the vector length")
    }
}

/// Sum over locations of the per-location outer products, `AᵀB`.
pub fn bilinear_pool<T: Scalar>(a: &LocationFeatures<T>, b: &LocationFeatures<T>) -> Result<Tensor<T>> {
    if a.locations() != b.locations() {
        return Err(shape_err!(
            "bilinear_pool: streams have {} and {} locations; align them first",
            a.locations(),
            b.locations()
        ));
    }
    let mut g = Graph::new();
    let an = g.constant(a.tensor().clone());
    let bn = g.constant(b.tensor().clone());
    let x = g.matmul(an, bn, true, false)?;
    Ok(g.value(x).clone())
}

/// Closed-form gradients of a loss through `x = AᵀB`:
/// `dℓ/dA = B (dℓ/dx)ᵀ` and `dℓ/dB = A (dℓ/dx)`.
pub fn bilinear_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dl_dx: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (la, m) = a.shape2()?;
    let (lb, n) = b.shape2()?;
    if la != lb || dl_dx.dims() != [m, n] {
        return Err(shape_err!("bilinear_backward: A {:?}, B {:?}, dℓ/dx {:?}", a.dims(), b.dims(), dl_dx.dims()));
    }
    let da = matmul_ex(b, dl_dx, false, true)?;
    let db = matmul_ex(a, dl_dx, false, false)?;
    Ok((da, db))
}
