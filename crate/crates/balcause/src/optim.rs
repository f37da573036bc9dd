//! Dense quasi-Newton minimization (BFGS) and finite-difference helpers.
//!
//! The parameter vectors in this crate are small (a handful to a few dozen
//! entries), so a dense inverse-Hessian BFGS with an Armijo backtracking
//! line search is simple, robust and plenty fast. Objectives may return
//! `+inf`/NaN outside their domain; the line search treats that as "no
//! decrease" and backtracks, which is how domain constraints (positive
//! probabilities, positive shape parameters) are enforced without explicit
//! bounds.

use nalgebra::{DMatrix, DVector};

/// Knobs for [`minimize_bfgs`].
#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    /// Hard cap on BFGS iterations.
    pub max_iter: usize,
    /// Converged when the gradient sup-norm drops below this.
    pub grad_tol: f64,
    /// Converged when the relative objective decrease over one iteration
    /// falls below this (set to 0 to disable).
    pub obj_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iter: 500,
            grad_tol: 1e-8,
            obj_tol: 0.0,
        }
    }
}

/// Outcome of a minimization. `converged == false` means the iteration
/// budget ran out or the line search stalled; `x` still holds the best
/// point seen.
#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const CURVATURE_GUARD: f64 = 1e-10;

/// Minimize `f` starting at `x0` using its analytic (or injected numeric)
/// gradient `grad`.
pub fn minimize_bfgs<F, G>(f: F, grad: G, x0: &[f64], opts: &OptimOptions) -> OptimResult
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    minimize_bfgs_floored(f, grad, x0, opts, f64::NEG_INFINITY)
}

/// [`minimize_bfgs`] with an absolute objective floor: any iterate whose
/// value reaches `value_floor` counts as converged immediately. Used for
/// criteria that are exactly solvable, where the meaningful target is a
/// value of zero rather than a small gradient.
pub(crate) fn minimize_bfgs_floored<F, G>(
    f: F,
    grad: G,
    x0: &[f64],
    opts: &OptimOptions,
    value_floor: f64,
) -> OptimResult
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let p = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    let mut g = DVector::from_vec(grad(x.as_slice()));
    let mut h = DMatrix::<f64>::identity(p, p);
    let mut first_update = true;
    let mut iterations = 0;

    let sup = |v: &DVector<f64>| v.amax();

    if !fx.is_finite() {
        // cannot even evaluate at the start; bail out with what we have
        return OptimResult {
            x: x.as_slice().to_vec(),
            value: fx,
            grad_norm: sup(&g),
            iterations: 0,
            converged: false,
        };
    }
    if fx <= value_floor {
        return OptimResult {
            x: x.as_slice().to_vec(),
            value: fx,
            grad_norm: sup(&g),
            iterations: 0,
            converged: true,
        };
    }

    while iterations < opts.max_iter {
        if sup(&g) <= opts.grad_tol {
            return OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_norm: sup(&g),
                iterations,
                converged: true,
            };
        }
        iterations += 1;

        let mut dir = -(&h * &g);
        let mut dd = dir.dot(&g);
        if !(dd < 0.0) || !dd.is_finite() {
            // H lost positive definiteness; restart from steepest descent
            h = DMatrix::identity(p, p);
            first_update = true;
            dir = -g.clone();
            dd = dir.dot(&g);
            if dd == 0.0 {
                break; // zero gradient handled above; defensive
            }
        }

        // Armijo backtracking
        let mut step = 1.0f64;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = &x + &dir * step;
            let fc = f(cand.as_slice());
            if fc.is_finite() && fc <= fx + ARMIJO_C1 * step * dd {
                accepted = Some((cand, fc, step));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, taken)) = accepted else {
            // no progress possible along this direction
            return OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_norm: sup(&g),
                iterations,
                converged: false,
            };
        };

        let g_new = DVector::from_vec(grad(x_new.as_slice()));
        let s = &dir * taken;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > CURVATURE_GUARD * s.norm() * y.norm() && sy.is_finite() {
            if first_update {
                // Nocedal–Wright scaling of the initial inverse Hessian
                let yy = y.dot(&y);
                if yy > 0.0 {
                    h = DMatrix::identity(p, p) * (sy / yy);
                }
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I-ρsyᵀ)H(I-ρysᵀ) + ρssᵀ, expanded to rank-two form
            let coef = rho * rho * yhy + rho;
            for r in 0..p {
                for c in 0..p {
                    h[(r, c)] += coef * s[r] * s[c] - rho * (s[r] * hy[c] + hy[r] * s[c]);
                }
            }
        }

        let rel_drop = (fx - f_new).abs() / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        if fx <= value_floor {
            return OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_norm: sup(&g),
                iterations,
                converged: true,
            };
        }
        if opts.obj_tol > 0.0 && rel_drop < opts.obj_tol {
            return OptimResult {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_norm: sup(&g),
                iterations,
                converged: true,
            };
        }
    }

    let gn = sup(&g);
    OptimResult {
        converged: gn <= opts.grad_tol,
        x: x.as_slice().to_vec(),
        value: fx,
        grad_norm: gn,
        iterations,
    }
}

/// Central-difference gradient with a per-coordinate relative step:
/// `step_j = rel_step · max(1, |x_j|)`.
pub fn central_diff_gradient<F>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut out = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for j in 0..x.len() {
        let hj = rel_step * x[j].abs().max(1.0);
        work[j] = x[j] + hj;
        let up = f(&work);
        work[j] = x[j] - hj;
        let down = f(&work);
        work[j] = x[j];
        out[j] = (up - down) / (2.0 * hj);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_converges_fast() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2);
        let g = |x: &[f64]| vec![2.0 * (x[0] - 3.0), 8.0 * (x[1] + 1.0)];
        let r = minimize_bfgs(f, g, &[0.0, 0.0], &OptimOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 3.0).abs() < 1e-6);
        assert!((r.x[1] + 1.0).abs() < 1e-6);
        assert!(r.iterations < 30);
    }

    #[test]
    fn rosenbrock_converges() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let g = |x: &[f64]| {
            vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]
        };
        let r = minimize_bfgs(
            f,
            g,
            &[-1.2, 1.0],
            &OptimOptions {
                max_iter: 2000,
                grad_tol: 1e-8,
                obj_tol: 0.0,
            },
        );
        assert!(r.converged, "grad norm {}", r.grad_norm);
        assert!((r.x[0] - 1.0).abs() < 1e-5);
        assert!((r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn domain_walls_are_respected() {
        // minimize -log(x) + x on x > 0 (minimum at x = 1); f = inf for
        // x <= 0 must never be accepted by the line search
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                f64::INFINITY
            } else {
                -x[0].ln() + x[0]
            }
        };
        let g = |x: &[f64]| vec![-1.0 / x[0] + 1.0];
        let r = minimize_bfgs(f, g, &[4.0], &OptimOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iteration_budget_is_respected() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let g = |x: &[f64]| {
            vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]
        };
        let r = minimize_bfgs(
            f,
            g,
            &[-1.2, 1.0],
            &OptimOptions {
                max_iter: 3,
                grad_tol: 1e-12,
                obj_tol: 0.0,
            },
        );
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn central_differences_match_analytic_gradient() {
        let f = |x: &[f64]| x[0].powi(3) + x[0] * x[1] + (2.0 * x[1]).sin();
        let x = [0.7, -0.3];
        let num = central_diff_gradient(&f, &x, 1e-6);
        let exact = [
            3.0 * x[0] * x[0] + x[1],
            x[0] + 2.0 * (2.0 * x[1]).cos(),
        ];
        for j in 0..2 {
            assert!((num[j] - exact[j]).abs() < 1e-7, "coord {j}");
        }
    }
}
