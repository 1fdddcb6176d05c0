use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

fn crop<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (th, tw, c) = crate::autograd::hwc(t)?;
    if (th, tw) == (h, w) {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        out.extend_from_slice(&t.data()[i * tw * c..(i * tw + w) * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

/// Bring two H×W×C maps to a common spatial size by dropping the last row
/// and/or column of the larger one. Extents may differ by at most one.
pub fn align_spatial<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (ha, wa, _) = crate::autograd::hwc(a)?;
    let (hb, wb, _) = crate::autograd::hwc(b)?;
    if ha.abs_diff(hb) > 1 || wa.abs_diff(wb) > 1 {
        return Err(Error::Alignment(format!(
            "cannot align {ha}×{wa} with {hb}×{wb}: extents differ by more than one"
        )));
    }
    let (h, w) = (ha.min(hb), wa.min(wb));
    Ok((crop(a, h, w)?, crop(b, h, w)?))
}
