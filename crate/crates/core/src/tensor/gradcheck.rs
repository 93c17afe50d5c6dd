//! Central finite-difference check of reverse-mode gradients.

use super::{Graph, Result, Tensor, Var};

/// Outcome of a [`gradcheck`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Coordinates compared against the tolerance.
    pub checked: usize,
    /// Coordinates skipped because the function has a kink within one step.
    pub excluded: usize,
    /// Coordinate with the largest relative error among checked ones.
    pub worst: Option<usize>,
    pub passed: bool,
}

/// Magnitude below which errors are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar `f` at `point` with
/// central differences of half-width `step`.
///
/// A coordinate whose central difference disagrees with the analytic value,
/// but whose analytic value agrees with one of the one-sided differences
/// while the two one-sided differences disagree with each other, is treated
/// as a non-differentiable point (e.g. a ReLU exactly at zero) and excluded.
pub fn gradcheck<F>(f: F, point: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let f0 = g.value(y).item();
    g.backward(y)?;
    let analytic = g
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let mut report = GradcheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
        worst: None,
        passed: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(plus)?;
        let fm = eval(minus)?;
        let central = (fp - fm) / (2.0 * step);
        let rel = rel_err(a, central);
        if rel > tolerance {
            let right = (fp - f0) / step;
            let left = (f0 - fm) / step;
            let side = rel_err(a, right).min(rel_err(a, left));
            let spread = (right - left).abs();
            if side <= 1e-2 && spread > (a - central).abs() {
                report.excluded += 1;
                continue;
            }
        }
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max((a - central).abs());
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(i);
        }
        if rel > tolerance || !rel.is_finite() {
            report.passed = false;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::new(vec![1], vec![3.0]).unwrap();
        let r = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &p,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.checked, 1);
        assert!(r.max_abs_err < 1e-8);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let p = Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap();
        let r = gradcheck(
            |g, x| {
                let y = g.relu(x);
                Ok(g.sum(y))
            },
            &p,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // x * stop_grad(x): the recorded gradient is x, the true one 2x.
        let p = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
        let r = gradcheck(
            |g, x| {
                let frozen = g.constant(g.value(x).clone());
                let sq = g.mul(x, frozen)?;
                Ok(g.sum(sq))
            },
            &p,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
    }
}
