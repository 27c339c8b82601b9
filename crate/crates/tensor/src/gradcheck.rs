//! Finite-difference verification of reverse-mode gradients (run in `f64`).

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative step; the absolute step is `STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-5;

const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(op_name: &str, max_rel_error: f64, tolerance: f64) -> Self {
        GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_error,
            tolerance,
            passed: max_rel_error <= tolerance,
        }
    }
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Checks `analytic[i]` against central differences of `eval` at `x` for every
/// `i` in `indices`. `eval` receives the perturbed point.
pub fn check_against_central_differences(
    op_name: &str,
    analytic: &[f64],
    x: &[f64],
    indices: &[usize],
    tol: f64,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let non_finite = || TensorError::NonFinite {
        op: op_name.to_string(),
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(non_finite());
    }
    let mut point = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let eps = STEP * x[i].abs().max(1.0);
        point[i] = x[i] + eps;
        let up = eval(&point)?;
        point[i] = x[i] - eps;
        let down = eval(&point)?;
        point[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(non_finite());
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(GradCheckReport::new(op_name, worst, tol))
}

fn scalar_output(g: &Graph<f64>, y: Var, op_name: &str) -> Result<f64> {
    if g.value(y).numel() != 1 {
        return Err(TensorError::config("grad_check", format!("{op_name} must return a scalar")));
    }
    let v = g.value(y).item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite {
            op: op_name.to_string(),
        });
    }
    Ok(v)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central finite differences over every element of `x`.
pub fn grad_check<Fun>(op_name: &str, f: Fun, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    scalar_output(&g, y, op_name)?;
    let grads = g.backward(y)?;
    let zeros;
    let analytic = match grads.get(xv) {
        Some(a) => a,
        None => {
            zeros = vec![0.0; x.numel()];
            &zeros
        }
    };
    let indices: Vec<usize> = (0..x.numel()).collect();
    check_against_central_differences(op_name, analytic, x.data(), &indices, tol, |p| {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(x.shape(), p.to_vec())?);
        let y = f(&mut g, xv)?;
        scalar_output(&g, y, op_name)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.1, -0.7]).unwrap();
        let r = grad_check("sum", |g, x| Ok(g.sum_all(x)), &x, 1e-10).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // analytic gradient deliberately off by a factor of two
        let x = [1.0, 2.0];
        let r = check_against_central_differences("bad", &[4.0, 8.0], &x, &[0, 1], 1e-4, |p| {
            Ok(p.iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_names_the_op() {
        let x = Tensor::from_f64(&[1], &[-1.0]).unwrap();
        let err = grad_check("ln", |g, x| Ok(g.ln(x)), &x, 1e-4).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "ln".into() });
    }
}
