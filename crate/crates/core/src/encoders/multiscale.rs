use std::str::FromStr;

use crate::encoders::{l2_normalize, signed_sqrt, BilinearDescriptor};
use crate::error::{config_err, shape_err, Result};
use crate::io::resize_bilinear;
use crate::tensor::Tensor;
use crate::Scalar;

/// Largest resized image (in pixels) a scale may produce.
pub const MAX_SCALED_PIXELS: usize = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MultiScaleMode {
    /// Sum-pool the locations of every scale together, normalize once.
    #[default]
    Union,
    /// Normalize each scale's descriptor, average them, then rescale to unit norm.
    Average,
}

impl FromStr for MultiScaleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union" => Ok(MultiScaleMode::Union),
            "average" => Ok(MultiScaleMode::Average),
            other => Err(format!("unknown multi-scale mode `{other}` (expected union or average)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOptions {
    pub scales: Vec<f64>,
    pub mode: MultiScaleMode,
    /// Smallest admissible image side, usually the backbone's receptive field.
    pub min_side: usize,
}

impl Default for MultiScaleOptions {
    fn default() -> Self {
        MultiScaleOptions { scales: vec![1.0], mode: MultiScaleMode::Union, min_side: 1 }
    }
}

impl MultiScaleOptions {
    /// Resized extents for every admissible scale, in the order given.
    pub fn admissible(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.scales
            .iter()
            .filter(|s| s.is_finite() && **s > 0.0)
            .map(|s| (((h as f64) * s).round() as usize, ((w as f64) * s).round() as usize))
            .filter(|&(sh, sw)| sh.min(sw) >= self.min_side.max(1) && sh * sw <= MAX_SCALED_PIXELS)
            .collect()
    }
}

/// Pool an image over several scales. `pool` maps a resized image to its
/// pre-normalization pooled matrix (a sum over that image's locations).
pub fn multiscale_pool<T, F>(image: &Tensor<T>, opts: &MultiScaleOptions, mut pool: F) -> Result<BilinearDescriptor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let (h, w) = match image.dims() {
        &[h, w, _] => (h, w),
        d => return Err(shape_err!("multiscale_pool expects an H×W×C image, got {d:?}")),
    };
    let sizes = opts.admissible(h, w);
    if sizes.is_empty() {
        return Err(config_err!(
            "no admissible scale among {:?} for a {h}×{w} image (min side {}, pixel cap {MAX_SCALED_PIXELS})",
            opts.scales,
            opts.min_side
        ));
    }
    let normalize = |x: &Tensor<T>| l2_normalize(&signed_sqrt(x));
    let mut acc: Option<Tensor<T>> = None;
    for &(sh, sw) in &sizes {
        let pooled = pool(&resize_bilinear(image, sh, sw)?)?;
        let term = match opts.mode {
            MultiScaleMode::Union => pooled,
            MultiScaleMode::Average => normalize(&pooled),
        };
        match acc.as_mut() {
            None => acc = Some(term),
            Some(a) => a.add_assign(&term)?,
        }
    }
    let sum = acc.expect("at least one admissible scale");
    let out = match opts.mode {
        MultiScaleMode::Union => normalize(&sum),
        MultiScaleMode::Average => l2_normalize(&sum.scale(T::c(1.0 / sizes.len() as f64))),
    };
    BilinearDescriptor::from_matrix(out, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{bilinear_pool, LocationFeatures};
    use crate::Rng;

    fn pixels_pool(img: &Tensor<f64>) -> Result<Tensor<f64>> {
        let c = img.dims()[2];
        let f = LocationFeatures::new(img.reshape(&[img.len() / c, c])?)?;
        bilinear_pool(&f, &f)
    }

    fn image() -> Tensor<f64> {
        let mut rng = Rng::new(21);
        Tensor::new(vec![6, 8, 3], rng.uniform_vec(144, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn single_scale_matches_plain_pipeline() {
        let img = image();
        let d = multiscale_pool(&img, &MultiScaleOptions::default(), pixels_pool).unwrap();
        let plain = l2_normalize(&signed_sqrt(&pixels_pool(&img).unwrap()));
        assert_eq!(d.matrix(), plain);
    }

    #[test]
    fn duplicated_scale_doubles_sum() {
        let img = image();
        let mut pooled = Vec::new();
        let opts = MultiScaleOptions { scales: vec![1.0, 1.0], ..Default::default() };
        let d = multiscale_pool(&img, &opts, |x| {
            let p = pixels_pool(x)?;
            pooled.push(p.clone());
            Ok(p)
        })
        .unwrap();
        let single = pixels_pool(&img).unwrap();
        let sum = pooled[0].add(&pooled[1]).unwrap();
        assert!(sum.max_abs_diff(&single.scale(2.0)).unwrap() <= 1e-12);
        let once = multiscale_pool(&img, &MultiScaleOptions::default(), pixels_pool).unwrap();
        assert!(d.vec.max_abs_diff(&once.vec).unwrap() <= 1e-9);
        let avg = MultiScaleOptions { scales: vec![1.0, 1.0], mode: MultiScaleMode::Average, min_side: 1 };
        let a = multiscale_pool(&img, &avg, pixels_pool).unwrap();
        assert!(a.vec.max_abs_diff(&once.vec).unwrap() <= 1e-9);
    }

    #[test]
    fn union_sums_all_scales() {
        let img = image();
        let opts = MultiScaleOptions { scales: vec![0.5, 1.0, 2.0], ..Default::default() };
        let d = multiscale_pool(&img, &opts, pixels_pool).unwrap();
        let mut sum = pixels_pool(&resize_bilinear(&img, 3, 4).unwrap()).unwrap();
        sum.add_assign(&pixels_pool(&img).unwrap()).unwrap();
        sum.add_assign(&pixels_pool(&resize_bilinear(&img, 12, 16).unwrap()).unwrap()).unwrap();
        let want = l2_normalize(&signed_sqrt(&sum));
        assert!(d.matrix().max_abs_diff(&want).unwrap() <= 1e-12);
        assert!((d.vec.norm2() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn inadmissible_scales() {
        let img = image();
        let opts = MultiScaleOptions { scales: vec![0.25, 1.0], min_side: 4, ..Default::default() };
        assert_eq!(opts.admissible(6, 8), vec![(6, 8)]);
        let none = MultiScaleOptions { scales: vec![0.25, 1024.0], min_side: 4, ..Default::default() };
        assert!(matches!(multiscale_pool(&img, &none, pixels_pool), Err(crate::Error::Config(_))));
    }
}
