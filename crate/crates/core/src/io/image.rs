use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

fn hwc<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match image.dims() {
        &[h, w, c] => Ok((h, w, c)),
        d => Err(shape_err!("expected an H×W×C image, got dims {d:?}")),
    }
}

fn sample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resampling with pixel centres at half-integer coordinates;
/// samples falling outside the source are clamped to the border.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, new_h: usize, new_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(image)?;
    if new_h == 0 || new_w == 0 || h == 0 || w == 0 {
        return Err(shape_err!("resize {h}×{w} → {new_h}×{new_w}: extents must be positive"));
    }
    if (h, w) == (new_h, new_w) {
        return Ok(image.clone());
    }
    let cols: Vec<_> = (0..new_w).map(|x| sample_axis(x, w, new_w)).collect();
    let src = image.data();
    let mut out = Vec::with_capacity(new_h * new_w * c);
    for y in 0..new_h {
        let (y0, y1, fy) = sample_axis(y, h, new_h);
        let fy = T::c(fy);
        for &(x0, x1, fx) in &cols {
            let fx = T::c(fx);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::new(vec![new_h, new_w, c], out)
}

/// Mirror an H×W×C image left to right.
pub fn hflip<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(image)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let o = (y * w + x) * c;
            out.extend_from_slice(&src[o..o + c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn resize_examples() {
        let col = Tensor::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(resize_bilinear(&col, 4, 1).unwrap().data(), &[0.0, 0.25, 0.75, 1.0]);
        let row = Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(resize_bilinear(&row, 1, 4).unwrap().data(), &[0.0, 0.25, 0.75, 1.0]);
        let mut rng = Rng::new(3);
        let img = Tensor::new(vec![5, 4, 3], rng.uniform_vec::<f64>(60, 0.0, 1.0)).unwrap();
        assert_eq!(resize_bilinear(&img, 5, 4).unwrap(), img);
        assert!(resize_bilinear(&img, 0, 4).is_err());
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[7, 5, 3], 0.3f64).unwrap();
        for (h, w) in [(1, 1), (3, 11), (14, 10), (64, 2)] {
            let r = resize_bilinear(&img, h, w).unwrap();
            assert_eq!(r.dims(), &[h, w, 3]);
            assert!(r.data().iter().all(|v| (v - 0.3).abs() <= 1e-12));
        }
    }

    #[test]
    fn flip_examples() {
        let img = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(hflip(&img).unwrap().data(), &[2.0, 1.0]);
        let mut rng = Rng::new(8);
        let img = Tensor::new(vec![3, 5, 2], rng.uniform_vec::<f64>(30, 0.0, 1.0)).unwrap();
        assert_eq!(hflip(&hflip(&img).unwrap()).unwrap(), img);
        let sym = Tensor::new(vec![1, 3, 1], vec![0.2, 0.9, 0.2]).unwrap();
        assert_eq!(hflip(&sym).unwrap(), sym);
    }
}
