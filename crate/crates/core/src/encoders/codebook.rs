use crate::autograd::{Graph, NodeId};
use crate::error::{config_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{ReduceMode, Tensor};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookMode {
    /// `w_k = 2γμ_k`, `b_k = −γ‖μ_k‖²`; only the centers are free.
    Tied,
    /// `w`, `b` and `μ` are independent parameters.
    Untied,
}

/// Cluster centers plus the linear soft-assignment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    mu: Tensor<T>,
    gamma: T,
    w: Tensor<T>,
    b: Tensor<T>,
    mode: CodebookMode,
}

impl<T: Scalar> Codebook<T> {
    /// Tied codebook from k×d centers and a positive sharpness γ.
    pub fn from_centers(mu: Tensor<T>, gamma: T) -> Result<Self> {
        mu.shape2()?;
        if gamma.is_nan() || gamma <= T::zero() {
            return Err(config_err!("codebook gamma must be positive, got {gamma}"));
        }
        let (w, b) = tied_params(&mu, gamma);
        Ok(Codebook { mu, gamma, w, b, mode: CodebookMode::Tied })
    }

    /// Untied codebook with explicit assignment parameters.
    pub fn untied(mu: Tensor<T>, gamma: T, w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let (k, d) = mu.shape2()?;
        if w.dims() != [k, d] || b.dims() != [k] {
            return Err(shape_err!("untied codebook: centers {k}×{d}, w {:?}, b {:?}", w.dims(), b.dims()));
        }
        Ok(Codebook { mu, gamma, w, b, mode: CodebookMode::Untied })
    }

    pub fn k(&self) -> usize {
        self.mu.dims()[0]
    }

    pub fn d(&self) -> usize {
        self.mu.dims()[1]
    }

    pub fn mu(&self) -> &Tensor<T> {
        &self.mu
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn w(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn mode(&self) -> CodebookMode {
        self.mode
    }

    /// Switch to untied mode keeping the current `w`, `b`.
    pub fn untie(mut self) -> Self {
        self.mode = CodebookMode::Untied;
        self
    }

    /// Replace the centers; tied codebooks re-derive `w` and `b`.
    pub fn set_mu(&mut self, mu: Tensor<T>) -> Result<()> {
        self.mu.same_dims(&mu, "set_mu")?;
        self.mu = mu;
        if self.mode == CodebookMode::Tied {
            let (w, b) = tied_params(&self.mu, self.gamma);
            self.w = w;
            self.b = b;
        }
        Ok(())
    }

    /// Replace the assignment parameters of an untied codebook.
    pub fn set_assignment(&mut self, w: Tensor<T>, b: Tensor<T>) -> Result<()> {
        if self.mode == CodebookMode::Tied {
            return Err(config_err!("tied codebook assignment parameters follow the centers"));
        }
        self.w.same_dims(&w, "set_assignment")?;
        self.b.same_dims(&b, "set_assignment")?;
        self.w = w;
        self.b = b;
        Ok(())
    }
}

impl<T: Scalar> Codebook<T> {
    /// Free parameters in graph order: `mu`, then `w`, `b` when untied.
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self.mode {
            CodebookMode::Tied => vec![&mut self.mu],
            CodebookMode::Untied => vec![&mut self.mu, &mut self.w, &mut self.b],
        }
    }

    /// Re-derive tied assignment parameters after `mu` changed in place.
    pub(crate) fn refresh(&mut self) {
        if self.mode == CodebookMode::Tied {
            let (w, b) = tied_params(&self.mu, self.gamma);
            self.w = w;
            self.b = b;
        }
    }
}

fn tied_params<T: Scalar>(mu: &Tensor<T>, gamma: T) -> (Tensor<T>, Tensor<T>) {
    let (k, _) = mu.shape2().expect("centers are a matrix");
    let w = mu.scale(T::c(2.0) * gamma);
    let b = (0..k).map(|i| -gamma * mu.row(i).iter().fold(T::zero(), |acc, &v| acc + v * v)).collect();
    (w, Tensor::new(vec![k], b).expect("k ≥ 1"))
}

/// Graph handles for a codebook's parameters.
#[derive(Debug, Clone, Copy)]
pub struct CodebookNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub mu: NodeId,
}

/// Place a codebook in the graph. In tied mode `w` and `b` are computed
/// from the `mu` node so gradients reach the centers through both paths.
pub fn codebook_nodes<T: Scalar>(g: &mut Graph<T>, cb: &Codebook<T>, trainable: bool) -> Result<CodebookNodes> {
    let leaf = |g: &mut Graph<T>, t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    let mu = leaf(g, &cb.mu);
    match cb.mode {
        CodebookMode::Untied => {
            let w = leaf(g, &cb.w);
            let b = leaf(g, &cb.b);
            Ok(CodebookNodes { w, b, mu })
        }
        CodebookMode::Tied => {
            let w = g.scale(mu, T::c(2.0) * cb.gamma);
            let sq = g.mul(mu, mu)?;
            let norms = g.reduce(sq, &[1], ReduceMode::Sum)?;
            let b = g.scale(norms, -cb.gamma);
            Ok(CodebookNodes { w, b, mu })
        }
    }
}

/// Soft assignments of the L×d rows of `x`: `softmax_k(w_kᵀx + b_k)`, L×k.
pub fn soft_assign_node<T: Scalar>(g: &mut Graph<T>, x: NodeId, cb: CodebookNodes) -> Result<NodeId> {
    let logits = g.matmul(x, cb.w, false, true)?;
    let shifted = g.add_row_bias(logits, cb.b)?;
    g.softmax(shifted, 1)
}

/// Soft assignment of one d-vector (returns k entries) or of the rows of an
/// L×d matrix (returns L×k).
pub fn soft_assign<T: Scalar>(x: &Tensor<T>, cb: &Codebook<T>) -> Result<Tensor<T>> {
    let single = x.rank() == 1;
    let rows = if single { x.reshape(&[1, x.len()])? } else { x.clone() };
    let (_, d) = rows.shape2()?;
    if d != cb.d() {
        return Err(shape_err!("soft_assign: input dim {d} vs codebook dim {}", cb.d()));
    }
    let mut g = Graph::new();
    let xn = g.constant(rows);
    let nodes = codebook_nodes(&mut g, cb, false)?;
    let a = soft_assign_node(&mut g, xn, nodes)?;
    let out = g.value(a).clone();
    if single {
        out.into_reshaped(&[cb.k()])
    } else {
        Ok(out)
    }
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<T> {
    pub centers: Tensor<T>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub cost: T,
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Nearest center of `x`; ties resolve to the lowest index.
pub(crate) fn nearest<T: Scalar>(x: &[T], centers: &Tensor<T>) -> (usize, T) {
    let k = centers.dims()[0];
    let mut best = (0, sq_dist(x, centers.row(0)));
    for c in 1..k {
        let d = sq_dist(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations on the rows of `features`.
pub fn kmeans<T: Scalar>(features: &Tensor<T>, k: usize, seed: u64, iters: usize) -> Result<KMeans<T>> {
    let (n, d) = features.shape2()?;
    if k == 0 {
        return Err(config_err!("k-means needs k ≥ 1"));
    }
    if n < k {
        return Err(config_err!("k-means sample of {n} vectors is smaller than k = {k}"));
    }
    let mut rng = Rng::new(seed);
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), features.row(chosen[0])).as_f64()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &v) in d2.iter().enumerate() {
                acc += v;
                if v > 0.0 && acc > r {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave r at the very top of the range
            pick.unwrap_or_else(|| d2.iter().rposition(|&v| v > 0.0).expect("total > 0"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n ≥ k")
        };
        chosen.push(pick);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(features.row(i), features.row(pick)).as_f64());
        }
    }
    let mut centers = Tensor::new(vec![k, d], chosen.iter().flat_map(|&i| features.row(i).to_vec()).collect())?;

    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let mut changed = false;
        for (x, a) in features.data().chunks_exact(d).zip(assignment.iter_mut()) {
            let (c, _) = nearest(x, &centers);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for (x, &c) in features.data().chunks_exact(d).zip(&assignment) {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its
                // center, taken from a cluster that keeps at least one member
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .map(|i| (i, sq_dist(features.row(i), centers.row(assignment[i]))))
                    .fold((usize::MAX, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                let old = assignment[far];
                for j in 0..d {
                    let v = features.row(far)[j];
                    sums[old * d + j] -= v;
                    sums[c * d + j] = v;
                }
                counts[old] -= 1;
                counts[c] = 1;
                assignment[far] = c;
            }
        }
        let data = centers.data_mut();
        for c in 0..k {
            let inv = T::one() / T::c(counts[c] as f64);
            for j in 0..d {
                data[c * d + j] = sums[c * d + j] * inv;
            }
        }
    }
    for (x, a) in features.data().chunks_exact(d).zip(assignment.iter_mut()) {
        *a = nearest(x, &centers).0;
    }
    let cost = (0..n).fold(T::zero(), |acc, i| acc + sq_dist(features.row(i), centers.row(assignment[i])));
    Ok(KMeans { centers, assignment, cost, iterations })
}

/// `1 / (2 · mean nearest-center squared distance)`, or 1 when every point
/// sits on a center.
pub fn gamma_heuristic<T: Scalar>(features: &Tensor<T>, centers: &Tensor<T>) -> Result<T> {
    let (n, _) = features.shape2()?;
    let total = (0..n).fold(T::zero(), |acc, i| acc + nearest(features.row(i), centers).1);
    let mean = total / T::c(n as f64);
    Ok(if mean > T::zero() { T::one() / (T::c(2.0) * mean) } else { T::one() })
}

/// Tied codebook initialized by k-means with the γ heuristic.
pub fn kmeans_init<T: Scalar>(features: &Tensor<T>, k: usize, seed: u64, iters: usize) -> Result<Codebook<T>> {
    let km = kmeans(features, k, seed, iters)?;
    let gamma = gamma_heuristic(features, &km.centers)?;
    Codebook::from_centers(km.centers, gamma)
}
