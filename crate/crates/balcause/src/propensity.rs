//! Working generalized-propensity-score families and their maximum
//! likelihood fits.
//!
//! Three families are provided:
//!
//! * [`PropensityFamily::MultinomialLogit`] — `π(k,x,β) = e^{zᵀβ_k} / Σ_l e^{zᵀβ_l}`
//!   with the last level as implicit reference (`β_{K} ≡ 0`), `z` the
//!   (possibly transformed) covariate row;
//! * [`PropensityFamily::SameBasisLinear`] — `π(k,x,β) = β_{(k)}ᵀB(x)` where
//!   `B` is the *same* basis used by the balancing moments. With this family
//!   the balancing system is exactly identified and the fitted weights
//!   reproduce basis means exactly;
//! * [`PropensityFamily::BetaDensity`] — a conditional density for a bounded
//!   dose: `(a-lo)/(hi-lo) | x ~ Beta(φλ(x), φ(1-λ(x)))` with
//!   `λ(x) = expit(γᵀz)`, parameters `β = (γ, φ)`.
//!
//! Likelihood maximization runs on an internally rescaled design (each
//! column divided by its root-mean-square) and, for the beta family, on
//! `log φ`; reported parameters are always on the natural scale. Fitted
//! probabilities are clamped into `[δ, 1-δ]` — and densities floored at
//! `δ` — wherever they enter an inverse-probability denominator, with every
//! clamping event counted on a [`ClampCounter`].

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::basis::{BasisSpec, FeatureMap};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{minimize_bfgs, OptimOptions};
use crate::DELTA;

/// Counts probability clampings during a fit or evaluation pass.
///
/// Thread-safe so that evaluation loops may be parallelized; totals are
/// order-independent.
#[derive(Debug, Default)]
pub struct ClampCounter(AtomicU64);

impl ClampCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Clamp a probability into `[δ, 1-δ]`, counting the event if it fires.
#[inline]
pub fn clamp_prob(p: f64, clamps: &ClampCounter) -> f64 {
    if p.is_nan() || p < DELTA {
        clamps.bump();
        DELTA
    } else if p > 1.0 - DELTA {
        clamps.bump();
        1.0 - DELTA
    } else {
        p
    }
}

/// Floor a conditional density at `δ` (densities may legitimately exceed
/// one, so only the low side is guarded).
#[inline]
pub fn floor_density(v: f64, clamps: &ClampCounter) -> f64 {
    if v.is_nan() || v < DELTA {
        clamps.bump();
        DELTA
    } else {
        v
    }
}

/// A parametric working model for the generalized propensity score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PropensityFamily {
    /// Multinomial logit over levels `0..=k_max` with level `k_max` as the
    /// reference; `p = k_max · dim(features)`.
    MultinomialLogit { k_max: usize, features: FeatureMap },
    /// Linear-in-basis probabilities `π(k,x,β) = β_{(k)}ᵀB(x)`;
    /// `p = (k_max+1) · q`.
    SameBasisLinear { k_max: usize, basis: BasisSpec },
    /// Beta conditional density on `(lo, hi)`; `p = dim(features) + 1`,
    /// laid out as `(γ_1..γ_m, φ)`.
    BetaDensity {
        lo: f64,
        hi: f64,
        features: FeatureMap,
    },
}

impl PropensityFamily {
    /// Length of the parameter vector given `d` raw covariates.
    pub fn param_dim(&self, d: usize) -> usize {
        match self {
            PropensityFamily::MultinomialLogit { k_max, features } => k_max * features.dim(d),
            PropensityFamily::SameBasisLinear { k_max, basis } => (k_max + 1) * basis.q(),
            PropensityFamily::BetaDensity { features, .. } => features.dim(d) + 1,
        }
    }

    /// Number of the highest treatment level, when categorical.
    pub fn k_max(&self) -> Option<usize> {
        match self {
            PropensityFamily::MultinomialLogit { k_max, .. }
            | PropensityFamily::SameBasisLinear { k_max, .. } => Some(*k_max),
            PropensityFamily::BetaDensity { .. } => None,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, PropensityFamily::BetaDensity { .. })
    }
}

/// Multinomial logit probabilities for one unit, all levels at once.
/// `beta` holds `k_max` blocks of `z.len()` coefficients; the reference
/// level `k_max` has linear index zero. Numerically safe via max-shift.
pub fn mnl_probs_into(z: &[f64], beta: &[f64], k_max: usize, out: &mut [f64]) {
    let m = z.len();
    debug_assert_eq!(beta.len(), k_max * m);
    debug_assert_eq!(out.len(), k_max + 1);
    let mut eta_max = 0.0f64; // reference level's η = 0
    for k in 0..k_max {
        let eta = dot(z, &beta[k * m..(k + 1) * m]);
        out[k] = eta;
        if eta > eta_max {
            eta_max = eta;
        }
    }
    out[k_max] = 0.0;
    let mut denom = 0.0;
    for v in out.iter_mut() {
        *v = (*v - eta_max).exp();
        denom += *v;
    }
    for v in out.iter_mut() {
        *v /= denom;
    }
}

/// Single multinomial-logit probability `π(k, z, β)`, clamped into
/// `[δ, 1-δ]` with the clamp counted.
pub fn mnl_prob(z: &[f64], beta: &[f64], k: usize, k_max: usize, clamps: &ClampCounter) -> f64 {
    let mut probs = vec![0.0; k_max + 1];
    mnl_probs_into(z, beta, k_max, &mut probs);
    clamp_prob(probs[k], clamps)
}

/// Linear-in-basis probability `β_{(k)}ᵀ b`, clamped into `[δ, 1-δ]`.
/// `b` are the basis values at `x`; `beta` holds `k_max+1` blocks of
/// `b.len()` coefficients.
pub fn samebasis_prob(b: &[f64], beta: &[f64], k: usize, clamps: &ClampCounter) -> f64 {
    let q = b.len();
    debug_assert!(beta.len() % q == 0 && k < beta.len() / q);
    clamp_prob(dot(b, &beta[k * q..(k + 1) * q]), clamps)
}

/// Beta conditional density of a dose `a ∈ (lo, hi)` given features `z`:
/// `u = (a-lo)/(hi-lo) ~ Beta(φλ, φ(1-λ))`, `λ = expit(γᵀz)`, rescaled by
/// `1/(hi-lo)`. Unfloored — callers floor at the division site.
pub fn beta_density(a: f64, z: &[f64], gamma: &[f64], phi: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(a > lo && a < hi) {
        return Err(Error::Domain(format!(
            "dose {a} outside the open support ({lo}, {hi})"
        )));
    }
    if !(phi > 0.0) {
        return Err(Error::Domain(format!("beta precision φ must be positive, got {phi}")));
    }
    let width = hi - lo;
    let u = (a - lo) / width;
    let lambda = expit(dot(z, gamma));
    let (alpha, beta_b) = (phi * lambda, phi * (1.0 - lambda));
    let ln_pdf = ln_gamma(phi) - ln_gamma(alpha) - ln_gamma(beta_b)
        + (alpha - 1.0) * u.ln()
        + (beta_b - 1.0) * (1.0 - u).ln();
    Ok(ln_pdf.exp() / width)
}

#[inline]
pub(crate) fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A maximum-likelihood fit of a propensity family.
#[derive(Debug, Clone, Serialize)]
pub struct MleFit {
    /// Parameters on the natural scale, in the family's documented layout.
    pub beta: Vec<f64>,
    /// Total log-likelihood at the solution.
    pub loglik: f64,
    /// Sup-norm of the total-log-likelihood gradient at the solution.
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Fit `family` to `ds` by maximum likelihood.
///
/// Converged when the gradient of the total log-likelihood satisfies
/// `‖∇ℓ‖∞ ≤ 1e-6 · (1 + |ℓ|)`; otherwise an [`Error::NonConvergence`]
/// carrying the best parameters found is returned.
pub fn mle_fit(ds: &Dataset, family: &PropensityFamily) -> Result<MleFit> {
    match family {
        PropensityFamily::MultinomialLogit { k_max, features } => {
            mle_mnl(ds, *k_max, features)
        }
        PropensityFamily::SameBasisLinear { k_max, basis } => mle_samebasis(ds, *k_max, basis),
        PropensityFamily::BetaDensity { lo, hi, features } => mle_beta(ds, *lo, *hi, features),
    }
}

/// Mean multinomial-logit log-likelihood and its analytic gradient at
/// `beta`, on the natural (unscaled) feature scale:
///
/// ```text
/// ℓ(β)        = n⁻¹ Σ_i ln π(A_i | z_i, β)
/// ∂ℓ/∂β_(k)   = n⁻¹ Σ_i (1{A_i=k} − π(k | z_i, β)) z_i,   k < k_max
/// ```
///
/// Exposed so the gradient can be validated against finite differences
/// from outside the crate.
pub fn mnl_loglik_and_grad(
    ds: &Dataset,
    k_max: usize,
    features: &FeatureMap,
    beta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if k_max == 0 {
        return Err(Error::Config("multinomial logit needs at least two levels".into()));
    }
    let n = ds.n();
    let (z, m) = materialize_features(ds, features)?;
    let p = k_max * m;
    if beta.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "beta has {} entries, multinomial logit expects {p}",
            beta.len()
        )));
    }
    let mut probs = vec![0.0; k_max + 1];
    let mut loglik = 0.0;
    let mut grad = vec![0.0; p];
    for i in 0..n {
        let zi = &z[i * m..(i + 1) * m];
        mnl_probs_into(zi, beta, k_max, &mut probs);
        let level = ds.level(i);
        loglik += probs[level].max(f64::MIN_POSITIVE).ln();
        for k in 0..k_max {
            let resid = f64::from(level == k) - probs[k];
            for (g, &zj) in grad[k * m..(k + 1) * m].iter_mut().zip(zi) {
                *g += resid * zj;
            }
        }
    }
    let nf = n as f64;
    for g in &mut grad {
        *g /= nf;
    }
    Ok((loglik / nf, grad))
}

/// Root-mean-square of each column of a row-major `n×m` matrix; zero
/// columns get scale one so division is always safe.
fn rms_scales(design: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        for j in 0..m {
            let v = design[i * m + j];
            acc[j] += v * v;
        }
    }
    acc.iter()
        .map(|s| {
            let r = (s / n as f64).sqrt();
            if r > 0.0 {
                r
            } else {
                1.0
            }
        })
        .collect()
}

fn scaled_design(design: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let scales = rms_scales(design, n, m);
    let mut out = design.to_vec();
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] /= scales[j];
        }
    }
    (out, scales)
}

fn materialize_features(ds: &Dataset, features: &FeatureMap) -> Result<(Vec<f64>, usize)> {
    let feats = features.resolve(ds)?;
    let m = feats.dim();
    let mut out = Vec::with_capacity(ds.n() * m);
    for i in 0..ds.n() {
        out.extend_from_slice(feats.row(i));
    }
    Ok((out, m))
}

fn mle_converged(grad_total: f64, loglik: f64) -> bool {
    grad_total <= 1e-6 * (1.0 + loglik.abs())
}

fn mle_mnl(ds: &Dataset, k_max: usize, features: &FeatureMap) -> Result<MleFit> {
    if k_max == 0 {
        return Err(Error::Config("multinomial logit needs at least two levels".into()));
    }
    let n = ds.n();
    let (raw, m) = materialize_features(ds, features)?;
    let (z, scales) = scaled_design(&raw, n, m);
    let p = k_max * m;
    let levels: Vec<usize> = (0..n).map(|i| ds.level(i)).collect();

    // mean negative log-likelihood and its gradient
    let f = |beta: &[f64]| -> f64 {
        let mut probs = vec![0.0; k_max + 1];
        let mut acc = 0.0;
        for i in 0..n {
            mnl_probs_into(&z[i * m..(i + 1) * m], beta, k_max, &mut probs);
            acc -= probs[levels[i]].max(f64::MIN_POSITIVE).ln();
        }
        acc / n as f64
    };
    let g = |beta: &[f64]| -> Vec<f64> {
        let mut probs = vec![0.0; k_max + 1];
        let mut grad = vec![0.0; p];
        for i in 0..n {
            let zi = &z[i * m..(i + 1) * m];
            mnl_probs_into(zi, beta, k_max, &mut probs);
            for k in 0..k_max {
                let w = probs[k] - f64::from(levels[i] == k);
                let block = &mut grad[k * m..(k + 1) * m];
                for (gj, zj) in block.iter_mut().zip(zi) {
                    *gj += w * zj;
                }
            }
        }
        for v in grad.iter_mut() {
            *v /= n as f64;
        }
        grad
    };

    let r = minimize_bfgs(f, g, &vec![0.0; p], &OptimOptions {
        max_iter: 500,
        grad_tol: 1e-9,
        obj_tol: 0.0,
    });
    let loglik = -r.value * n as f64;
    let grad_total = r.grad_norm * n as f64;
    let mut beta = r.x;
    for k in 0..k_max {
        for j in 0..m {
            beta[k * m + j] /= scales[j];
        }
    }
    if mle_converged(grad_total, loglik) {
        Ok(MleFit {
            beta,
            loglik,
            grad_norm: grad_total,
            iterations: r.iterations,
        })
    } else {
        Err(Error::NonConvergence {
            iterations: r.iterations,
            objective: r.value,
            best: beta,
        })
    }
}

fn mle_samebasis(ds: &Dataset, k_max: usize, basis: &BasisSpec) -> Result<MleFit> {
    let n = ds.n();
    let q = basis.q();
    let mut raw = vec![0.0; n * q];
    for i in 0..n {
        basis.eval_into(ds.x(i), 0.0, &mut raw[i * q..(i + 1) * q]);
    }
    let (b, scales) = scaled_design(&raw, n, q);
    let levels: Vec<usize> = (0..n).map(|i| ds.level(i)).collect();

    let mut beta = vec![0.0; (k_max + 1) * q];
    let mut loglik = 0.0;
    let mut grad_norm = 0.0f64;
    let mut iterations = 0;
    let mut all_ok = true;

    // the likelihood separates by level: maximize
    // Σ_i { 1(A_i=k) ln(βᵀb_i) − βᵀb_i } for each k. The objective is
    // concave with an exact Hessian, so damped Newton is used — BFGS can
    // crawl when the optimum sits near the positivity boundary.
    for k in 0..=k_max {
        let ind: Vec<f64> = levels.iter().map(|&l| f64::from(l == k)).collect();
        let init = positive_linear_init(&b, n, q, &ind)?;
        let r = newton_linear_poisson(&b, n, q, &ind, &init);
        loglik += -r.value * n as f64;
        grad_norm = grad_norm.max(r.grad_norm * n as f64);
        iterations += r.iterations;
        all_ok &= r.converged;
        beta[k * q..(k + 1) * q].copy_from_slice(&r.x);
    }
    for k in 0..=k_max {
        for j in 0..q {
            beta[k * q + j] /= scales[j];
        }
    }
    if all_ok && mle_converged(grad_norm, loglik) {
        Ok(MleFit {
            beta,
            loglik,
            grad_norm,
            iterations,
        })
    } else {
        Err(Error::NonConvergence {
            iterations,
            objective: -loglik,
            best: beta,
        })
    }
}

/// Damped Newton for the per-level objective
/// `f(β) = n⁻¹ Σ_i { βᵀb_i − y_i ln(βᵀb_i) }` with `y_i ∈ {0,1}`.
/// Gradient `n⁻¹ Σ (1 − y_i/π_i) b_i`, Hessian `n⁻¹ Σ (y_i/π_i²) b_i b_iᵀ`
/// — convex, so Newton with an Armijo backtracking step converges in a
/// handful of iterations whenever a feasible point exists.
///
/// Positivity of `π_i = βᵀb_i` is required only where `y_i = 1`: the log
/// term acts as a barrier there, while the remaining observations enter
/// the objective linearly and their fitted values may leave `(0, 1)`
/// without affecting the stationarity conditions.
fn newton_linear_poisson(
    b: &[f64],
    n: usize,
    q: usize,
    y: &[f64],
    init: &[f64],
) -> crate::optim::OptimResult {
    use nalgebra::{DMatrix, DVector};
    let f = |bk: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            let pi = dot(&b[i * q..(i + 1) * q], bk);
            if y[i] == 1.0 {
                if pi <= 0.0 {
                    return f64::INFINITY;
                }
                acc += pi - pi.ln();
            } else {
                acc += pi;
            }
        }
        acc / n as f64
    };

    let mut x = init.to_vec();
    let mut fx = f(&x);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..100 {
        let mut grad = DVector::<f64>::zeros(q);
        let mut hess = DMatrix::<f64>::zeros(q, q);
        for i in 0..n {
            let bi = &b[i * q..(i + 1) * q];
            let pi = dot(bi, &x);
            let (w, h) = if y[i] == 1.0 { (1.0 - 1.0 / pi, 1.0 / (pi * pi)) } else { (1.0, 0.0) };
            for r in 0..q {
                grad[r] += w * bi[r];
                for c in 0..q {
                    hess[(r, c)] += h * bi[r] * bi[c];
                }
            }
        }
        grad /= n as f64;
        hess /= n as f64;
        grad_norm = grad.amax();
        if grad_norm <= 1e-10 {
            return crate::optim::OptimResult {
                x,
                value: fx,
                grad_norm,
                iterations,
                converged: true,
            };
        }
        iterations += 1;
        let ridge = 1e-12 * hess.trace().max(1.0) / q as f64;
        for j in 0..q {
            hess[(j, j)] += ridge;
        }
        let dir = match hess.cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -grad.clone(),
        };
        let dd = dir.dot(&grad);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(xi, di)| xi + step * di).collect();
            let fc = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * step * dd {
                x = cand;
                fx = fc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    crate::optim::OptimResult {
        converged: grad_norm <= 1e-8,
        x,
        value: fx,
        grad_norm,
        iterations,
    }
}

/// Least-squares projection of the level indicator onto the basis, pulled
/// toward the constant-rate fit until the fitted value is positive at every
/// point the indicator marks (the only points whose probabilities are
/// inverted downstream).
pub(crate) fn positive_linear_init(b: &[f64], n: usize, q: usize, ind: &[f64]) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};
    let bm = DMatrix::from_fn(n, q, |i, j| b[i * q + j]);
    let mut bt_b = &bm.transpose() * &bm;
    for j in 0..q {
        bt_b[(j, j)] += 1e-10 * bt_b.trace().max(1.0) / q as f64;
    }
    let chol = bt_b
        .cholesky()
        .ok_or_else(|| Error::Singular("basis Gram matrix in initializer".into()))?;
    let solve = |target: &DVector<f64>| -> Vec<f64> {
        let rhs = &bm.transpose() * target;
        chol.solve(&rhs).as_slice().to_vec()
    };
    let beta_fit = solve(&DVector::from_column_slice(ind));
    let rate = ind.iter().sum::<f64>() / n as f64;
    let beta_flat = solve(&DVector::from_element(n, rate));

    let positive = |beta: &[f64]| {
        (0..n).all(|i| ind[i] == 0.0 || dot(&b[i * q..(i + 1) * q], beta) > 1e-8)
    };
    let mut alpha = 1.0;
    for _ in 0..40 {
        let cand: Vec<f64> = beta_fit
            .iter()
            .zip(&beta_flat)
            .map(|(a, f)| alpha * a + (1.0 - alpha) * f)
            .collect();
        if positive(&cand) {
            return Ok(cand);
        }
        alpha *= 0.5;
    }
    if positive(&beta_flat) {
        return Ok(beta_flat);
    }
    Err(Error::Domain(
        "no strictly positive starting point for the linear probability fit".into(),
    ))
}

fn mle_beta(ds: &Dataset, lo: f64, hi: f64, features: &FeatureMap) -> Result<MleFit> {
    let n = ds.n();
    let width = hi - lo;
    if !(width > 0.0) {
        return Err(Error::Config(format!("bad dose support ({lo}, {hi})")));
    }
    let (raw, m) = materialize_features(ds, features)?;
    let (z, scales) = scaled_design(&raw, n, m);

    let mut lnu = vec![0.0; n];
    let mut ln1mu = vec![0.0; n];
    let mut u_mean = 0.0;
    let mut u_sq = 0.0;
    for i in 0..n {
        let u = (ds.dose(i) - lo) / width;
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!(
                "dose {} at row {i} outside the open support ({lo}, {hi})",
                ds.dose(i)
            )));
        }
        lnu[i] = u.ln();
        ln1mu[i] = (1.0 - u).ln();
        u_mean += u;
        u_sq += u * u;
    }
    u_mean /= n as f64;
    let u_var = (u_sq / n as f64 - u_mean * u_mean).max(1e-10);

    // params: (γ̃ (m), ln φ)
    let p = m + 1;
    let f = |par: &[f64]| -> f64 {
        let phi = par[m].exp();
        let lg_phi = ln_gamma(phi);
        let mut acc = 0.0;
        for i in 0..n {
            let lambda = expit(dot(&z[i * m..(i + 1) * m], &par[..m]));
            let (a, b) = (phi * lambda, phi * (1.0 - lambda));
            if a <= 0.0 || b <= 0.0 {
                return f64::INFINITY;
            }
            acc -= lg_phi - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * lnu[i] + (b - 1.0) * ln1mu[i];
        }
        let v = acc / n as f64;
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let g = |par: &[f64]| -> Vec<f64> {
        let phi = par[m].exp();
        let dg_phi = digamma(phi);
        let mut grad = vec![0.0; p];
        for i in 0..n {
            let zi = &z[i * m..(i + 1) * m];
            let lambda = expit(dot(zi, &par[..m]));
            let (a, b) = (phi * lambda, phi * (1.0 - lambda));
            let (dg_a, dg_b) = (digamma(a), digamma(b));
            // dℓ/dλ and dℓ/dφ for this unit
            let dl_dlambda = phi * (-dg_a + dg_b + lnu[i] - ln1mu[i]);
            let dl_dphi = dg_phi - lambda * dg_a - (1.0 - lambda) * dg_b
                + lambda * lnu[i]
                + (1.0 - lambda) * ln1mu[i];
            let w = -dl_dlambda * lambda * (1.0 - lambda);
            for (gj, zj) in grad[..m].iter_mut().zip(zi) {
                *gj += w * zj;
            }
            grad[m] -= dl_dphi * phi; // chain rule through ln φ
        }
        for v in grad.iter_mut() {
            *v /= n as f64;
        }
        grad
    };

    // start: λ ≈ mean(u) via a constant column if one exists, otherwise a
    // flat logit; φ from the marginal method of moments
    let mut init = vec![0.0; p];
    let logit_mean = (u_mean / (1.0 - u_mean)).ln();
    if let Some(j0) = constant_column(&z, n, m) {
        init[j0] = logit_mean / z[j0];
    }
    let phi0 = (u_mean * (1.0 - u_mean) / u_var - 1.0).max(0.5);
    init[m] = phi0.ln();

    let r = minimize_bfgs(f, g, &init, &OptimOptions {
        max_iter: 500,
        grad_tol: 1e-9,
        obj_tol: 0.0,
    });
    let base_loglik = -(r.value * n as f64) - n as f64 * width.ln();
    let grad_total = r.grad_norm * n as f64;
    let mut beta = vec![0.0; p];
    for j in 0..m {
        beta[j] = r.x[j] / scales[j];
    }
    beta[m] = r.x[m].exp();
    if mle_converged(grad_total, base_loglik) {
        Ok(MleFit {
            beta,
            loglik: base_loglik,
            grad_norm: grad_total,
            iterations: r.iterations,
        })
    } else {
        Err(Error::NonConvergence {
            iterations: r.iterations,
            objective: r.value,
            best: beta,
        })
    }
}

fn constant_column(z: &[f64], n: usize, m: usize) -> Option<usize> {
    'col: for j in 0..m {
        let first = z[j];
        if first == 0.0 {
            continue;
        }
        for i in 1..n {
            if (z[i * m + j] - first).abs() > 1e-12 * first.abs().max(1.0) {
                continue 'col;
            }
        }
        return Some(j);
    }
    None
}

// ---------------------------------------------------------------------------
// resolved evaluation views used by the estimators
// ---------------------------------------------------------------------------

/// Resolved categorical model: design rows materialized once so the GMM
/// inner loops touch plain slices.
pub(crate) struct CatModel {
    pub design: Vec<f64>,
    pub m: usize,
    pub k_max: usize,
    pub p: usize,
    pub kind: CatKind,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum CatKind {
    Mnl,
    SameBasis,
}

impl PropensityFamily {
    pub(crate) fn cat_model(&self, ds: &Dataset) -> Result<CatModel> {
        match self {
            PropensityFamily::MultinomialLogit { k_max, features } => {
                let (design, m) = materialize_features(ds, features)?;
                Ok(CatModel {
                    design,
                    m,
                    k_max: *k_max,
                    p: k_max * m,
                    kind: CatKind::Mnl,
                })
            }
            PropensityFamily::SameBasisLinear { k_max, basis } => {
                let q = basis.q();
                let mut design = vec![0.0; ds.n() * q];
                for i in 0..ds.n() {
                    basis.eval_into(ds.x(i), 0.0, &mut design[i * q..(i + 1) * q]);
                }
                Ok(CatModel {
                    design,
                    m: q,
                    k_max: *k_max,
                    p: (k_max + 1) * q,
                    kind: CatKind::SameBasis,
                })
            }
            PropensityFamily::BetaDensity { .. } => Err(Error::Config(
                "categorical estimator called with a continuous propensity family".into(),
            )),
        }
    }
}

impl CatModel {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.m..(i + 1) * self.m]
    }

    /// Raw (unclamped) probabilities of all levels for unit `i`.
    pub fn probs_into(&self, i: usize, beta: &[f64], out: &mut [f64]) {
        match self.kind {
            CatKind::Mnl => mnl_probs_into(self.row(i), beta, self.k_max, out),
            CatKind::SameBasis => {
                let b = self.row(i);
                for (k, v) in out.iter_mut().enumerate() {
                    *v = dot(b, &beta[k * self.m..(k + 1) * self.m]);
                }
            }
        }
    }

    /// Gradient `∂π(k, x_i, β)/∂β` written into `out` (length `p`).
    ///
    /// `probs` must hold the raw probabilities from [`CatModel::probs_into`].
    /// Where the probability is outside `(δ, 1-δ)` the clamp is active and
    /// the derivative is identically zero.
    pub fn dprob_into(&self, i: usize, k: usize, probs: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if !(probs[k] > DELTA && probs[k] < 1.0 - DELTA) {
            return;
        }
        match self.kind {
            CatKind::Mnl => {
                let zi = self.row(i);
                for l in 0..self.k_max {
                    let c = probs[k] * (f64::from(k == l) - probs[l]);
                    let block = &mut out[l * self.m..(l + 1) * self.m];
                    for (o, z) in block.iter_mut().zip(zi) {
                        *o = c * z;
                    }
                }
            }
            CatKind::SameBasis => {
                out[k * self.m..(k + 1) * self.m].copy_from_slice(self.row(i));
            }
        }
    }
}

/// Per-unit coefficients of the beta working density, precomputed at a
/// fixed `β` so the density at any dose costs two multiplies and one `exp`.
#[derive(Debug, Clone, Copy)]
pub struct BetaProfile {
    /// `lnΓ(φ) − lnΓ(φλ_i) − lnΓ(φ(1−λ_i)) − ln(hi−lo)`
    pub c: f64,
    /// `φλ_i − 1`
    pub pm1: f64,
    /// `φ(1−λ_i) − 1`
    pub qm1: f64,
}

/// Fast evaluator of `π(a, X_i, β)` for the beta family across all units.
pub struct ContEvaluator {
    profiles: Vec<BetaProfile>,
    pub lo: f64,
    pub hi: f64,
}

impl ContEvaluator {
    /// `(ln u, ln(1-u))` for a target dose; errors outside the open support.
    #[inline]
    pub fn dose_logs(&self, a: f64) -> Result<(f64, f64)> {
        let u = (a - self.lo) / (self.hi - self.lo);
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!(
                "dose {a} outside the open support ({}, {})",
                self.lo, self.hi
            )));
        }
        Ok((u.ln(), (1.0 - u).ln()))
    }

    /// Density for unit `i` at a dose whose logs were precomputed.
    #[inline]
    pub fn density_from_logs(&self, i: usize, lnu: f64, ln1mu: f64) -> f64 {
        let pr = &self.profiles[i];
        (pr.c + pr.pm1 * lnu + pr.qm1 * ln1mu).exp()
    }

    /// Density `π(a, X_i, β)`.
    pub fn density(&self, i: usize, a: f64) -> Result<f64> {
        let (lnu, ln1mu) = self.dose_logs(a)?;
        Ok(self.density_from_logs(i, lnu, ln1mu))
    }

    pub fn n(&self) -> usize {
        self.profiles.len()
    }
}

impl PropensityFamily {
    /// Precompute per-unit density profiles at `beta` (continuous family
    /// only). `beta` is `(γ, φ)` on the natural scale.
    pub fn cont_evaluator(&self, ds: &Dataset, beta: &[f64]) -> Result<ContEvaluator> {
        let PropensityFamily::BetaDensity { lo, hi, features } = self else {
            return Err(Error::Config(
                "continuous estimator called with a categorical propensity family".into(),
            ));
        };
        let (z, m) = materialize_features(ds, features)?;
        if beta.len() != m + 1 {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} entries, expected {} (γ) + 1 (φ)",
                beta.len(),
                m
            )));
        }
        let phi = beta[m];
        if !(phi > 0.0) {
            return Err(Error::Domain(format!("beta precision φ must be positive, got {phi}")));
        }
        let lg_phi = ln_gamma(phi);
        let ln_width = (hi - lo).ln();
        let profiles = (0..ds.n())
            .map(|i| {
                let lambda = expit(dot(&z[i * m..(i + 1) * m], &beta[..m]));
                let (a, b) = (phi * lambda, phi * (1.0 - lambda));
                BetaProfile {
                    c: lg_phi - ln_gamma(a) - ln_gamma(b) - ln_width,
                    pm1: a - 1.0,
                    qm1: b - 1.0,
                }
            })
            .collect();
        Ok(ContEvaluator {
            profiles,
            lo: *lo,
            hi: *hi,
        })
    }
}
