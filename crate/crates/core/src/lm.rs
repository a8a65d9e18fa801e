//! Damped Gauss-Newton (Levenberg-Marquardt) for small dense problems.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iter: usize,
    /// Relative cost decrease below which an accepted step ends the search.
    pub ftol: f64,
    /// Relative step size below which the search ends.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            ftol: 1e-15,
            xtol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LmResult {
    pub x: DVector<f64>,
    /// Half the sum of squared residuals.
    pub cost: f64,
    pub converged: bool,
}

/// Minimizes `0.5 * ||r(x)||^2`. `model` returns residuals and their Jacobian.
pub(crate) fn levenberg_marquardt<F>(x0: DVector<f64>, mut model: F, opts: LmOptions) -> LmResult
where
    F: FnMut(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let mut x = x0;
    let (mut r, mut jac) = model(&x);
    let mut cost = 0.5 * r.norm_squared();
    if !cost.is_finite() {
        return LmResult { x, cost, converged: false };
    }
    let mut lambda = 1e-3;
    for _ in 0..opts.max_iter {
        if cost == 0.0 {
            return LmResult { x, cost, converged: true };
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for d in 0..a.nrows() {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.clone().cholesky().map(|c| c.solve(&(-&g))).or_else(|| a.lu().solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let x_new = &x + &step;
            let (r_new, jac_new) = model(&x_new);
            let cost_new = 0.5 * r_new.norm_squared();
            if cost_new.is_finite() && cost_new < cost {
                let rel_drop = (cost - cost_new) / cost;
                let small_step = step.norm() <= opts.xtol * (x.norm() + opts.xtol);
                x = x_new;
                r = r_new;
                jac = jac_new;
                cost = cost_new;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_drop < opts.ftol || small_step {
                    return LmResult { x, cost, converged: true };
                }
                break;
            }
            lambda *= 2.0;
        }
        if !accepted {
            // No damping level reduces the cost: stationary to working precision.
            return LmResult { x, cost, converged: true };
        }
    }
    LmResult { x, cost, converged: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_rosenbrock_as_least_squares() {
        let res = levenberg_marquardt(
            DVector::from_vec(vec![-1.2, 1.0]),
            |x| {
                let r = DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
                let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
                (r, j)
            },
            LmOptions::default(),
        );
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-8 && (res.x[1] - 1.0).abs() < 1e-8);
    }
}
