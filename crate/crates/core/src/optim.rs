use crate::error::Result;
use crate::tensor::Tensor;
use crate::Scalar;

/// One momentum SGD update: `v ← m·v − lr·g`, then `p ← p + v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    lr: T,
    momentum: T,
    velocity: &mut Tensor<T>,
) -> Result<()> {
    param.same_dims(grad, "sgd_step")?;
    param.same_dims(velocity, "sgd_step")?;
    for ((p, v), &g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}
