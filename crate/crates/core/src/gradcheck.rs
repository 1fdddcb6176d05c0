//! Central-difference verification of analytic gradients.

use crate::autograd::{Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Function value plus the branch fingerprint of the evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub value: f64,
    pub pattern: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error among checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±step probes straddled a non-smooth point.
    pub skipped: usize,
    pub passed: bool,
    pub note: Option<String>,
}

/// Relative error of one coordinate. The denominator is floored at a
/// thousandth of the largest numeric gradient entry so that entries that are
/// zero up to rounding do not dominate.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compare `analytic` with central differences of `f` around `x0`.
pub fn compare_central(
    f: impl Fn(&Tensor<f64>) -> Result<Probe>,
    analytic: &Tensor<f64>,
    x0: &Tensor<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    x0.same_dims(analytic, "finite_diff_check")?;
    if step <= 0.0 {
        return Err(shape_err!("finite-difference step must be positive"));
    }
    let centre = f(x0)?.pattern;
    let mut numeric = vec![0.0; x0.len()];
    let mut smooth = vec![true; x0.len()];
    let mut x = x0.clone();
    for i in 0..x0.len() {
        let orig = x0.data()[i];
        x.data_mut()[i] = orig + step;
        let plus = f(&x)?;
        x.data_mut()[i] = orig - step;
        let minus = f(&x)?;
        x.data_mut()[i] = orig;
        smooth[i] = plus.pattern == centre && minus.pattern == centre;
        numeric[i] = (plus.value - minus.value) / (2.0 * step);
    }
    let scale = numeric.iter().zip(&smooth).filter(|(_, &s)| s).fold(0.0f64, |acc, (&n, _)| acc.max(n.abs()));
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for i in 0..x0.len() {
        if !smooth[i] {
            continue;
        }
        checked += 1;
        max_rel_err = max_rel_err.max(relative_error(analytic.data()[i], numeric[i], scale));
    }
    let skipped = x0.len() - checked;
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        skipped,
        passed: max_rel_err <= tolerance,
        note: (skipped > 0).then(|| format!("non-smooth point skipped ({skipped} coordinates)")),
    })
}

/// Gradient check of a scalar function expressed as a graph builder. The
/// builder receives the graph and the parameter node standing for `x`.
pub fn finite_diff_check<F>(build: F, x0: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::with_pattern_tracking();
    let x = g.param(x0.clone());
    let root = build(&mut g, x)?;
    g.backward(root)?;
    let analytic = g.grad(x);
    let probe = |t: &Tensor<f64>| -> Result<Probe> {
        let mut g = Graph::with_pattern_tracking();
        let x = g.constant(t.clone());
        let root = build(&mut g, x)?;
        Ok(Probe { value: g.value(root).data()[0], pattern: g.pattern() })
    };
    compare_central(probe, &analytic, x0, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let x0 = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.sum_all(sq)?;
                Ok(g.scale(s, 0.5))
            },
            &x0,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_err <= 1e-7);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x0 = Tensor::vector(vec![1.0, -3.0]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let z = g.scale(x, 0.0);
                g.sum_all(z)
            },
            &x0,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn signed_sqrt_at_zero_is_skipped() {
        let x0 = Tensor::vector(vec![0.0]).unwrap();
        let report = finite_diff_check(
            |g, x| {
                let y = g.signed_sqrt(x);
                g.sum_all(y)
            },
            &x0,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert!(report.note.unwrap().contains("non-smooth point skipped"));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x0 = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let wrong = Tensor::vector(vec![-1.0, -2.0]).unwrap();
        let report =
            compare_central(|t| Ok(Probe { value: 0.5 * t.dot(t)?, pattern: 0 }), &wrong, &x0, 1e-5, 1e-5).unwrap();
        assert!(!report.passed);
    }
}
