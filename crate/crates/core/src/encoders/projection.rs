use nalgebra::{DMatrix, SymmetricEigen};

use crate::encoders::LocationFeatures;
use crate::error::{config_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_ex, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionInit {
    Pca,
    Random,
}

/// Linear map from `in_dim` to `out_dim` features, stored in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix<T> {
    p: Tensor<T>,
    init: ProjectionInit,
}

impl<T: Scalar> ProjectionMatrix<T> {
    pub fn new(p: Tensor<T>, init: ProjectionInit) -> Result<Self> {
        let (i, o) = p.shape2()?;
        if o > i {
            return Err(config_err!("projection output dim {o} exceeds input dim {i}"));
        }
        Ok(ProjectionMatrix { p, init })
    }

    /// Leading `out_dim` principal directions of the rows of `sample`
    /// (mean-centred covariance). Each column's largest-magnitude entry is
    /// made positive.
    pub fn pca(sample: &Tensor<T>, out_dim: usize) -> Result<Self> {
        let (n, d) = sample.shape2()?;
        if out_dim == 0 || out_dim > d {
            return Err(config_err!("PCA rank {out_dim} must lie in 1..={d}"));
        }
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(sample.row(i)) {
                *m += v.as_f64();
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let row: Vec<f64> = sample.row(i).iter().zip(&mean).map(|(&v, m)| v.as_f64() - m).collect();
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += row[a] * row[b];
                }
            }
        }
        cov /= n.max(1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut p = vec![T::zero(); d * out_dim];
        for (col, &src) in order.iter().take(out_dim).enumerate() {
            let v = eig.eigenvectors.column(src);
            let pivot = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                p[i * out_dim + col] = T::c(sign * v[i]);
            }
        }
        Self::new(Tensor::new(vec![d, out_dim], p)?, ProjectionInit::Pca)
    }

    /// Random matrix with orthonormal columns (Gram–Schmidt on Gaussians).
    pub fn random(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 || out_dim > in_dim {
            return Err(config_err!("projection rank {out_dim} must lie in 1..={in_dim}"));
        }
        let mut rng = Rng::new(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
        while cols.len() < out_dim {
            let mut v: Vec<f64> = (0..in_dim).map(|_| rng.normal()).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let p = Tensor::from_fn(&[in_dim, out_dim], |i| T::c(cols[i % out_dim][i / out_dim]))?;
        Self::new(p, ProjectionInit::Random)
    }

    pub fn in_dim(&self) -> usize {
        self.p.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.p.dims()[1]
    }

    pub fn init(&self) -> ProjectionInit {
        self.init
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.p
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Tensor<T> {
        &mut self.p
    }

    pub fn into_matrix(self) -> Tensor<T> {
        self.p
    }
}

/// Project one stream before the outer product: `F·P` (L×r).
pub fn project_one_feature<T: Scalar>(f: &LocationFeatures<T>, p: &ProjectionMatrix<T>) -> Result<LocationFeatures<T>> {
    if f.channels() != p.in_dim() {
        return Err(shape_err!("features have {} channels, projection expects {}", f.channels(), p.in_dim()));
    }
    LocationFeatures::new(matmul_ex(f.tensor(), p.matrix(), false, false)?)
}

/// Project a flattened descriptor: `vecᵀ·P`.
pub fn project_full<T: Scalar>(v: &Tensor<T>, p: &ProjectionMatrix<T>) -> Result<Tensor<T>> {
    if v.len() != p.in_dim() {
        return Err(shape_err!("descriptor length {} vs projection input {}", v.len(), p.in_dim()));
    }
    let row = v.reshape(&[1, v.len()])?;
    matmul_ex(&row, p.matrix(), false, false)?.into_reshaped(&[p.out_dim()])
}

/// `P ⊗ I_n`: the (d·n)×(r·n) full-descriptor projection that reproduces a
/// one-sided d×r projection of the first stream, under row-major
/// flattening of the d×n and r×n descriptors.
pub fn kronecker_projection<T: Scalar>(p: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (d, r) = p.shape2()?;
    let cols = r * n;
    let mut out = vec![T::zero(); d * n * cols];
    for m in 0..d {
        for i in 0..r {
            let v = p.data()[m * r + i];
            for j in 0..n {
                out[(m * n + j) * cols + i * n + j] = v;
            }
        }
    }
    Tensor::new(vec![d * n, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::bilinear_pool;

    fn orthonormality_error(p: &Tensor<f64>) -> f64 {
        let ptp = matmul_ex(p, p, true, false).unwrap();
        ptp.max_abs_diff(&Tensor::eye(ptp.dims()[0]).unwrap()).unwrap()
    }

    #[test]
    fn pca_columns_orthonormal() {
        let mut rng = Rng::new(12);
        let s = Tensor::new(vec![40, 6], rng.normal_vec::<f64>(240, 1.0)).unwrap();
        let p = ProjectionMatrix::pca(&s, 3).unwrap();
        assert_eq!(p.init(), ProjectionInit::Pca);
        assert!(orthonormality_error(p.matrix()) <= 1e-9);
        let r = ProjectionMatrix::<f64>::random(6, 4, 1).unwrap();
        assert!(orthonormality_error(r.matrix()) <= 1e-9);
        assert!(ProjectionMatrix::pca(&s, 7).is_err());
    }

    #[test]
    fn pca_finds_dominant_axis() {
        let mut rng = Rng::new(1);
        let data: Vec<f64> = (0..100).flat_map(|_| [10.0 * rng.normal(), 0.1 * rng.normal()]).collect();
        let p = ProjectionMatrix::pca(&Tensor::new(vec![100, 2], data).unwrap(), 1).unwrap();
        assert!((p.matrix().data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn identity_projection_keeps_descriptor() {
        let mut rng = Rng::new(5);
        let f = LocationFeatures::new(Tensor::new(vec![5, 3], rng.normal_vec::<f64>(15, 1.0)).unwrap()).unwrap();
        let id = ProjectionMatrix::new(Tensor::eye(3).unwrap(), ProjectionInit::Random).unwrap();
        let projected = project_one_feature(&f, &id).unwrap();
        assert_eq!(bilinear_pool(&projected, &f).unwrap(), bilinear_pool(&f, &f).unwrap());
    }

    #[test]
    fn one_sided_equals_kronecker_full_projection() {
        let mut rng = Rng::new(33);
        for _ in 0..10 {
            let f = LocationFeatures::new(Tensor::new(vec![3, 4], rng.normal_vec::<f64>(12, 1.0)).unwrap()).unwrap();
            let g = LocationFeatures::new(Tensor::new(vec![3, 4], rng.normal_vec::<f64>(12, 1.0)).unwrap()).unwrap();
            let p = ProjectionMatrix::random(4, 2, rng.next_u64()).unwrap();
            let lhs = bilinear_pool(&project_one_feature(&f, &p).unwrap(), &g).unwrap();
            let full = bilinear_pool(&f, &g).unwrap().into_reshaped(&[16]).unwrap();
            let k =
                ProjectionMatrix::new(kronecker_projection(p.matrix(), 4).unwrap(), ProjectionInit::Random).unwrap();
            let rhs = project_full(&full, &k).unwrap();
            assert!(lhs.reshape(&[8]).unwrap().max_abs_diff(&rhs).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn orthonormal_square_projection_is_invertible() {
        let mut rng = Rng::new(6);
        let f = LocationFeatures::new(Tensor::new(vec![6, 3], rng.normal_vec::<f64>(18, 1.0)).unwrap()).unwrap();
        let p = ProjectionMatrix::random(3, 3, 4).unwrap();
        let x = bilinear_pool(&project_one_feature(&f, &p).unwrap(), &f).unwrap();
        // Pᵀ(FᵀF) → P·x recovers FᵀF
        let back = matmul_ex(p.matrix(), &x, false, false).unwrap();
        assert!(back.max_abs_diff(&bilinear_pool(&f, &f).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn project_full_examples() {
        let v = Tensor::vector(vec![1.0f64, 2.0, 3.0, 6.0]).unwrap();
        let id = ProjectionMatrix::new(Tensor::eye(4).unwrap(), ProjectionInit::Random).unwrap();
        assert_eq!(project_full(&v, &id).unwrap(), v);
        let ones = ProjectionMatrix::new(Tensor::full(&[4, 1], 0.5).unwrap(), ProjectionInit::Random).unwrap();
        // mean 3, √(MN) = 2
        assert!((project_full(&v, &ones).unwrap().data()[0] - 6.0).abs() < 1e-15);
        assert_eq!(project_full(&Tensor::zeros(&[4]).unwrap(), &ones).unwrap().data(), &[0.0]);
        assert!(project_full(&Tensor::zeros(&[3]).unwrap(), &ones).is_err());
    }
}
