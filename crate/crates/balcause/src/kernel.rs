//! Second-order kernels on `(-1, 1)` and their moment constants.
//!
//! Everything downstream needs three numbers per kernel: the roughness
//! `R(K) = ∫K(t)²dt`, the second moment `μ₂(K) = ∫t²K(t)dt`, and — for
//! one-sided cross-validation — the same quantities for the *one-sided*
//! equivalent kernel. The first two are hard-coded exactly; the one-sided
//! quantities are obtained by fixed-panel Simpson quadrature, which is
//! deterministic and accurate to machine precision for these polynomials.

use serde::{Deserialize, Serialize};

/// Supported kernel shapes. All are symmetric second-order kernels with
/// support `(-1, 1)` and unit mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KernelSpec {
    /// `K(t) = 3/4 (1 - t²)` — the default everywhere.
    #[default]
    Epanechnikov,
    /// `K(t) = 35/32 (1 - t²)³`.
    Triweight,
    /// `K(t) = 1/2`.
    Uniform,
}

impl KernelSpec {
    /// Kernel value at `t` (zero outside the support).
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        if t.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            KernelSpec::Epanechnikov => 0.75 * (1.0 - t * t),
            KernelSpec::Triweight => {
                let u = 1.0 - t * t;
                (35.0 / 32.0) * u * u * u
            }
            KernelSpec::Uniform => 0.5,
        }
    }

    /// Bandwidth-scaled kernel `K_h(u) = K(u/h)/h`.
    #[inline]
    pub fn scaled(&self, u: f64, h: f64) -> f64 {
        debug_assert!(h > 0.0);
        self.eval(u / h) / h
    }

    /// Roughness `R(K) = ∫ K(t)² dt` (exact).
    pub fn r_k(&self) -> f64 {
        match self {
            KernelSpec::Epanechnikov => 3.0 / 5.0,
            KernelSpec::Triweight => 350.0 / 429.0,
            KernelSpec::Uniform => 0.5,
        }
    }

    /// Second moment `μ₂(K) = ∫ t² K(t) dt` (exact).
    pub fn mu2(&self) -> f64 {
        match self {
            KernelSpec::Epanechnikov => 0.2,
            KernelSpec::Triweight => 1.0 / 9.0,
            KernelSpec::Uniform => 1.0 / 3.0,
        }
    }

    /// Bandwidth rescaling constant for one-sided cross-validation.
    ///
    /// OSCV minimizes a prediction error that uses only left-hand
    /// neighbours, so its minimizer targets the optimal bandwidth of the
    /// *one-sided* smoother. The AMISE-optimal bandwidth of a kernel `L`
    /// scales as `{R(L)/μ₂(L)²}^{1/5}`, hence the selected bandwidth is
    /// mapped back to the two-sided smoother by
    ///
    /// ```text
    /// C = { R(K) μ₂(L)² / (R(L) μ₂(K)²) }^{1/5}
    /// ```
    ///
    /// where `L` is the one-sided equivalent kernel: `2K(t)1{t<0}` for a
    /// locally constant fit, and the linear equivalent kernel
    /// `K(t)(s₂ - s₁t)/(s₀s₂ - s₁²)` on `(-1, 0)` (with
    /// `s_r = ∫_{-1}^0 u^r K(u) du`) for a locally linear fit.
    pub fn oscv_rescale(&self, local_linear: bool) -> f64 {
        let (r_os, mu2_os) = self.one_sided_moments(local_linear);
        (self.r_k() * mu2_os * mu2_os / (r_os * self.mu2() * self.mu2())).powf(0.2)
    }

    /// `(R(L), μ₂(L))` of the one-sided equivalent kernel. Quadrature for
    /// the polynomial kernels (they vanish at the support edge, so Simpson
    /// is exact to machine precision); closed forms for the uniform kernel,
    /// whose jump at the edge defeats any sampled rule.
    fn one_sided_moments(&self, local_linear: bool) -> (f64, f64) {
        if let KernelSpec::Uniform = self {
            return if local_linear {
                // s₀=1/2, s₁=-1/4, s₂=1/6 ⇒ L(t) = 4 + 6t on (-1, 0):
                // R(L) = ∫(4+6t)² = 4, μ₂(L) = ∫t²(4+6t) = -1/6
                (4.0, -1.0 / 6.0)
            } else {
                // L = 2K·1{t<0} = 1 on (-1, 0)
                (1.0, 1.0 / 3.0)
            };
        }
        if !local_linear {
            // L(t) = 2 K(t) on (-1, 0): R(L) = 2·R(K), μ₂(L) = μ₂(K).
            let r = simpson(|t| 4.0 * self.eval(t) * self.eval(t), -1.0, 0.0, 4096);
            let m = simpson(|t| 2.0 * t * t * self.eval(t), -1.0, 0.0, 4096);
            return (r, m);
        }
        let s0 = simpson(|t| self.eval(t), -1.0, 0.0, 4096);
        let s1 = simpson(|t| t * self.eval(t), -1.0, 0.0, 4096);
        let s2 = simpson(|t| t * t * self.eval(t), -1.0, 0.0, 4096);
        let denom = s0 * s2 - s1 * s1;
        let l = move |t: f64| self.eval(t) * (s2 - s1 * t) / denom;
        let r = simpson(|t| l(t) * l(t), -1.0, 0.0, 4096);
        let m = simpson(|t| t * t * l(t), -1.0, 0.0, 4096);
        (r, m)
    }
}

/// Composite Simpson rule with a fixed (even) number of panels. Fixed
/// panels keep results bit-for-bit reproducible across platforms and
/// thread counts.
pub(crate) fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    assert!(panels >= 2 && panels % 2 == 0);
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;

    const KERNELS: [KernelSpec; 3] = [
        KernelSpec::Epanechnikov,
        KernelSpec::Triweight,
        KernelSpec::Uniform,
    ];

    /// Continuous kernels vanish at the support edge, so sampled rules
    /// integrate them exactly; the uniform kernel is checked analytically.
    const SMOOTH: [KernelSpec; 2] = [KernelSpec::Epanechnikov, KernelSpec::Triweight];

    #[test]
    fn unit_mass_and_symmetry() {
        for k in SMOOTH {
            let mass = simpson(|t| k.eval(t), -1.0, 1.0, 4096);
            assert!((mass - 1.0).abs() < 1e-10, "{k:?} mass {mass}");
        }
        for k in KERNELS {
            assert_eq!(k.eval(0.3), k.eval(-0.3));
            assert_eq!(k.eval(1.0), 0.0);
            assert_eq!(k.eval(-1.2), 0.0);
        }
        // uniform: flat 1/2 over an interval of length 2
        assert_eq!(KernelSpec::Uniform.eval(0.0), 0.5);
        assert_eq!(KernelSpec::Uniform.eval(0.999), 0.5);
    }

    #[test]
    fn hardcoded_moments_match_quadrature() {
        for k in SMOOTH {
            let r = simpson(|t| k.eval(t) * k.eval(t), -1.0, 1.0, 4096);
            let m = simpson(|t| t * t * k.eval(t), -1.0, 1.0, 4096);
            assert!((r - k.r_k()).abs() < 1e-10, "{k:?} roughness");
            assert!((m - k.mu2()).abs() < 1e-10, "{k:?} second moment");
        }
        // uniform closed forms: ∫(1/2)² = 1/2, ∫t²/2 = 1/3
        assert_eq!(KernelSpec::Uniform.r_k(), 0.5);
        assert!((KernelSpec::Uniform.mu2() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scaled_kernel_integrates_to_one() {
        let k = KernelSpec::Epanechnikov;
        let h = 2.5;
        let mass = simpson(|u| k.scaled(u, h), -h, h, 4096);
        assert!((mass - 1.0).abs() < 1e-10);
        // peak height scales like 1/h
        assert!((k.scaled(0.0, h) - 0.75 / h).abs() < 1e-15);
    }

    /// Frozen regression values for the OSCV rescaling constants.
    ///
    /// The locally constant case has the closed form `2^{-1/5}` for any
    /// symmetric kernel: the one-sided kernel `2K·1{t<0}` doubles the
    /// roughness and keeps the second moment, so
    /// `C = (1/2)^{1/5} ≈ 0.87055`. The locally linear constants were
    /// computed once from the quadrature in `one_sided_moments` and are
    /// pinned here against accidental drift.
    #[test]
    fn oscv_constants() {
        let two_pow = 0.5f64.powf(0.2);
        for k in KERNELS {
            assert!(
                (k.oscv_rescale(false) - two_pow).abs() < 1e-9,
                "{k:?} constant-fit rescale"
            );
        }
        assert!((two_pow - 0.870_550_563_296_124).abs() < 1e-12);

        // locally linear one-sided equivalent kernels
        let c_epan = KernelSpec::Epanechnikov.oscv_rescale(true);
        assert!(
            (c_epan - 0.537_133_630_744_572).abs() < 1e-9,
            "epanechnikov local-linear rescale, got {c_epan}"
        );
        let c_tri = KernelSpec::Triweight.oscv_rescale(true);
        assert!(
            (c_tri - 0.569_407_641_198_134).abs() < 1e-9,
            "triweight local-linear rescale, got {c_tri}"
        );
        // uniform has the closed form (1/32)^{1/5} = 1/2 exactly:
        // L(t) = 4+6t gives R(L) = 4, μ₂(L) = -1/6, and
        // R(K)μ₂(L)²/(R(L)μ₂(K)²) = (1/2)(1/36)/(4/9) = 1/32
        let c_uni = KernelSpec::Uniform.oscv_rescale(true);
        assert!((c_uni - 0.5).abs() < 1e-12, "uniform local-linear rescale, got {c_uni}");
    }

    /// Independent cross-check of the Epanechnikov local-linear constant
    /// via the exact one-sided moments `s₀=1/2, s₁=-3/16, s₂=1/10`:
    /// `μ₂(L) = (s₂² - s₁s₃)/(s₀s₂ - s₁²) = -11/95`.
    #[test]
    fn epanechnikov_one_sided_second_moment_closed_form() {
        let (_, mu2_os) = KernelSpec::Epanechnikov.one_sided_moments(true);
        assert!((mu2_os - (-11.0 / 95.0)).abs() < 1e-10, "got {mu2_os}");
    }
}
