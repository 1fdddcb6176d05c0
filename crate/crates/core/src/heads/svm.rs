use crate::error::{config_err, Error, Result};
use crate::Rng;

/// Binary linear classifier `score(x) = w·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
    /// Affine calibration `(a, c)` already folded into `w` and `b`.
    pub calibration: (f64, f64),
}

impl LinearSvm {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmOptions {
    pub c: f64,
    /// Stop when the duality gap falls below `tol · max(1, primal)`.
    pub tol: f64,
    pub max_epochs: usize,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions { c: 1.0, tol: 1e-3, max_epochs: 20_000 }
    }
}

/// Minimize `½(‖w‖² + b²) + C Σ max(0, 1 − yᵢ(w·xᵢ + b))` by dual
/// coordinate descent, visiting samples in a fixed-seed shuffled order.
pub fn svm_train_binary(xs: &[Vec<f64>], ys: &[bool], opts: &SvmOptions) -> Result<LinearSvm> {
    let n = xs.len();
    if n == 0 || ys.len() != n {
        return Err(config_err!("svm needs matching nonempty samples and labels"));
    }
    if !ys.iter().any(|&y| y) || ys.iter().all(|&y| y) {
        return Err(config_err!("svm needs at least one positive and one negative sample"));
    }
    if opts.c.is_nan() || opts.c <= 0.0 {
        return Err(config_err!("svm C must be positive, got {}", opts.c));
    }
    let d = xs[0].len();
    let upper = opts.c;
    let qii: Vec<f64> = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::stream(0, 0x5E);
    for epoch in 0..opts.max_epochs {
        rng.shuffle(&mut order);
        let mut violation = 0.0f64;
        for &i in &order {
            let y = if ys[i] { 1.0 } else { -1.0 };
            let x = &xs[i];
            let grad = y * (w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                grad.min(0.0)
            } else if alpha[i] == upper {
                grad.max(0.0)
            } else {
                grad
            };
            violation = violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - grad / qii[i]).clamp(0.0, upper);
                let delta = (alpha[i] - old) * y;
                for (wj, v) in w.iter_mut().zip(x) {
                    *wj += delta * v;
                }
                b += delta;
            }
        }
        if violation == 0.0 || epoch % 10 == 9 {
            let half_norm = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
            let hinge: f64 = xs
                .iter()
                .zip(ys)
                .map(|(x, &p)| {
                    let y = if p { 1.0 } else { -1.0 };
                    (1.0 - y * (w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)).max(0.0)
                })
                .sum();
            let primal = half_norm + opts.c * hinge;
            let dual = alpha.iter().sum::<f64>() - half_norm;
            if primal - dual <= opts.tol * primal.max(1.0) {
                return Ok(LinearSvm { w, b, calibration: (1.0, 0.0) });
            }
        }
    }
    Err(Error::Numeric(format!("svm did not reach tolerance {} in {} epochs", opts.tol, opts.max_epochs)))
}

/// One-vs-all classifiers; classes without positives (or without
/// negatives) yield an error entry.
pub fn svm_train_ova(xs: &[Vec<f64>], labels: &[usize], classes: usize, opts: &SvmOptions) -> Vec<Result<LinearSvm>> {
    (0..classes)
        .map(|k| {
            let ys: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            svm_train_binary(xs, &ys, opts).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("class {k}: {m}")),
                other => other,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Affine calibration `(a, c)` mapping the positive-score median to +1 and
/// the negative-score median to −1.
pub fn calibration_map(pos: &[f64], neg: &[f64]) -> Result<(f64, f64)> {
    let (mp, mn) = match (median(pos), median(neg)) {
        (Some(p), Some(n)) => (p, n),
        _ => return Err(config_err!("calibration needs positive and negative scores")),
    };
    if mp == mn {
        return Err(Error::Numeric(format!("degenerate calibration: both medians are {mp}")));
    }
    let a = 2.0 / (mp - mn);
    Ok((a, 1.0 - a * mp))
}

/// Fold the calibration of `pos`/`neg` scores into the classifier.
pub fn svm_calibrate(svm: &LinearSvm, pos: &[f64], neg: &[f64]) -> Result<LinearSvm> {
    let (a, c) = calibration_map(pos, neg)?;
    let (a0, c0) = svm.calibration;
    Ok(LinearSvm { w: svm.w.iter().map(|v| a * v).collect(), b: a * svm.b + c, calibration: (a * a0, a * c0 + c) })
}
