//! Monte Carlo harness for two bundled benchmark designs.
//!
//! The harness generates data from a categorical design (three treatment
//! arms plus control, multinomial-logit propensity, linear outcome) and a
//! continuous design (beta-distributed dose on `(0,20)`, Bernoulli or
//! Gaussian outcome), fits the balancing and maximum-likelihood IPW
//! estimators under four model-correctness regimes, and aggregates the
//! usual study metrics: bias, standard deviation, MSE, mean estimated
//! standard deviation and CI coverage per contrast for the categorical
//! design; integrated absolute bias and integrated RMSE (both ×100) over
//! the trimmed dose support for the continuous designs.
//!
//! Determinism is a hard contract: replicate `r` draws from a counter
//! seed `seed ^ r`, replicates are collected in index order whatever the
//! worker count, and all reductions run as fixed-order folds, so a fixed
//! [`Scenario`] produces byte-identical [`MetricTable`]s on any machine
//! and any thread pool. The expensive true-curve oracle (a large Monte
//! Carlo average over fresh covariate draws) is cached on disk, keyed by
//! design, evaluation grid and draw count; set `BALCAUSE_CACHE_DIR` to
//! relocate the cache.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta as BetaDist, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{BasisSpec, FeatureMap};
use crate::categorical::{estimate_theta, fit_balance, sandwich_variance};
use crate::continuous::{
    default_h_grid, rule_of_thumb_l, select_h_loocv, select_h_oscv, theta_local_constant,
    theta_local_linear, theta_raw, BalanceConfig, CurveKind, fit_balance_continuous,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::par;
use crate::propensity::{beta_density, mle_fit, ClampCounter, PropensityFamily};
use crate::Z_975;

// ---------------------------------------------------------------------------
// design constants
// ---------------------------------------------------------------------------

/// Propensity coefficients of the categorical design, one row per
/// non-reference level (the last level is the softmax reference). The
/// third row is identically zero, which makes the last two levels
/// equiprobable for every covariate value; the design is reproduced as
/// published, redundancy and all.
pub const CAT41_BETA: [[f64; 5]; 3] = [
    [0.0, -0.2475, -0.275, 0.1875, 0.075],
    [0.0, -0.165, -0.15, 0.125, 0.05],
    [0.0, 0.0, 0.0, 0.0, 0.0],
];

/// Outcome coefficients `m(k,x) = α_kᵀx` of the categorical design:
/// control arm, then one shared row for the three treated arms.
pub const CAT41_ALPHA: [[f64; 5]; 2] = [
    [200.0, 0.0, 13.7, 13.7, 13.7],
    [200.0, 27.4, 13.7, 13.7, 13.7],
];

/// Highest treatment level of the categorical design (levels `0..=3`).
pub const CAT41_K_MAX: usize = 3;

const CAT41_X_MEAN: f64 = 3.0;
const CAT41_X_SD: f64 = 2.0;

/// Dose-assignment coefficients of the continuous design:
/// `logit λ(x) = γᵀx`, dose `A/20 ~ Beta(φλ, φ(1−λ))`.
pub const CONT42_GAMMA: [f64; 5] = [-0.8, 0.1, 0.1, -0.1, 0.2];

/// Beta precision `φ` of the continuous design.
pub const CONT42_PHI: f64 = 15.0;

/// Upper dose endpoint of the continuous design; the support is `(0, 20)`.
pub const CONT42_DOSE_MAX: f64 = 20.0;

const CONT42_MU_BASE: [f64; 5] = [1.0, 0.2, 0.2, 0.3, -0.1];
const CONT42_MU_SLOPE: [f64; 5] = [0.1, -0.1, 0.0, 0.1, 0.0];
const CONT42_MU_CUBIC: f64 = 0.13 * 0.13 * 0.13;

/// Balancing-kernel bandwidth constant for the continuous design:
/// `l = 3 n^{−1/3}` on the dose scale.
pub const CONT42_L_CONST: f64 = 3.0;

/// Number of equally spaced dose points the integrated metrics are
/// accumulated on (spanning the full dose support; boundary points fall
/// outside every replicate's trimmed range and get zero weight).
const METRIC_GRID_POINTS: usize = 101;

/// Covariate draws behind the cached true-curve oracle.
const ORACLE_DRAWS: usize = 1_000_000;

/// Fixed seed of the oracle Monte Carlo: the true curve is a population
/// quantity, independent of any scenario seed.
const ORACLE_SEED: u64 = 0x6f72_6163_6c65;

/// The oracle and the theoretical-formula Monte Carlos run over this many
/// fixed chunks so the reduction order (and hence every bit of the
/// result) does not depend on the worker count.
const MC_CHUNKS: usize = 128;

/// A run fails when more than this fraction of replicates error out.
const MAX_FAILURE_FRACTION: f64 = 0.05;

// ---------------------------------------------------------------------------
// scenario
// ---------------------------------------------------------------------------

/// Which benchmark design a scenario draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Design {
    /// Categorical: four arms, multinomial-logit assignment, linear outcome.
    Cat41,
    /// Continuous dose with a Bernoulli outcome.
    ContNonlinear42,
    /// Continuous dose with a Gaussian outcome.
    ContLinear42,
}

impl Design {
    pub fn is_continuous(self) -> bool {
        !matches!(self, Design::Cat41)
    }

    /// Outcome flavour for the continuous designs.
    pub fn outcome(self) -> Option<ContOutcome> {
        match self {
            Design::Cat41 => None,
            Design::ContNonlinear42 => Some(ContOutcome::Nonlinear),
            Design::ContLinear42 => Some(ContOutcome::Linear),
        }
    }
}

/// Outcome model of the continuous design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ContOutcome {
    /// `Y ~ Bernoulli(expit μ(A,X))`.
    Nonlinear,
    /// `Y ~ Normal((μ(A,X)+15)/20, variance 0.16)`.
    Linear,
}

/// Outcome-bandwidth plan for continuous scenarios; the candidate grids
/// for the cross-validated variants are rebuilt from each replicate's own
/// doses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum HPlan {
    Fixed(f64),
    LooCv,
    Oscv,
}

/// One simulation configuration. `pi_correct`/`m_correct` select the
/// model-correctness regime: when a flag is off the corresponding working
/// model sees the design's nonlinear covariate transform instead of the
/// raw covariates (and, for the continuous outcome basis, loses its cubic
/// dose term).
#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    pub design: Design,
    pub n: usize,
    pub replicates: usize,
    pub pi_correct: bool,
    pub m_correct: bool,
    pub seed: u64,
    /// Outcome-smoothing kernel (continuous designs).
    pub kernel: KernelSpec,
    /// Outcome-bandwidth plan (continuous designs).
    pub h_plan: HPlan,
    /// Curve estimator the metrics are computed for (continuous designs).
    pub estimator: CurveKind,
}

impl Scenario {
    /// A both-models-correct scenario with the defaults used throughout
    /// the bundled studies: Epanechnikov kernel, leave-one-out
    /// cross-validated bandwidth, local-constant curve estimator.
    pub fn new(design: Design, n: usize, replicates: usize, seed: u64) -> Self {
        Scenario {
            design,
            n,
            replicates,
            pi_correct: true,
            m_correct: true,
            seed,
            kernel: KernelSpec::Epanechnikov,
            h_plan: HPlan::LooCv,
            estimator: CurveKind::LocalConstant,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("scenario needs at least one replicate".into()));
        }
        if self.n < 10 {
            return Err(Error::Config(format!(
                "scenario sample size {} is too small to fit anything",
                self.n
            )));
        }
        if let HPlan::Fixed(h) = self.h_plan {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!(
                    "fixed outcome bandwidth must be positive and finite, got {h}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// metric table
// ---------------------------------------------------------------------------

/// Aggregated study metrics for one contrast and one estimator of the
/// categorical design. `sd`, `mean_sd_hat` and `coverage` are absent when
/// they are undefined: `sd` needs at least two replicates, and the
/// maximum-likelihood rows carry no estimated standard deviation at all
/// (the large-sample variance implemented here is specific to the
/// balancing estimator).
#[derive(Debug, Clone, Serialize)]
pub struct CatMetricRow {
    pub estimator: String,
    /// Contrast `θ_level − θ_0`.
    pub level: usize,
    pub truth: f64,
    pub bias: f64,
    pub sd: Option<f64>,
    pub mse: f64,
    pub mean_sd_hat: Option<f64>,
    pub coverage: Option<f64>,
}

/// Integrated metrics for one estimator of a continuous design, both
/// multiplied by 100 as in the bundled study tables.
#[derive(Debug, Clone, Serialize)]
pub struct ContMetricRow {
    pub estimator: String,
    pub abs_bias_x100: f64,
    pub rmse_x100: f64,
    /// Dose-grid points that carried positive weight in the integrals.
    pub grid_points_used: usize,
}

/// Output of [`run_replicates`]: the scenario it came from, replicate
/// accounting, and one metric block per design kind (the other stays
/// empty).
#[derive(Debug, Clone, Serialize)]
pub struct MetricTable {
    pub scenario: Scenario,
    pub replicates_used: usize,
    pub failures: usize,
    /// Replicates where an optimizer returned its best point without
    /// meeting its tolerance; these are still used.
    pub nonconverged: usize,
    pub cat: Vec<CatMetricRow>,
    pub cont: Vec<ContMetricRow>,
}

// ---------------------------------------------------------------------------
// categorical design
// ---------------------------------------------------------------------------

/// True potential-outcome means of the categorical design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CatTruth {
    pub theta: [f64; 4],
}

impl CatTruth {
    /// True contrast `θ_k − θ_0`.
    pub fn contrast(&self, k: usize) -> f64 {
        self.theta[k] - self.theta[0]
    }
}

/// Closed-form truth: `θ_k = α_kᵀ E(X)` with `E(X) = (1,3,3,3,3)`.
pub fn cat41_truth() -> CatTruth {
    let ex = [1.0, CAT41_X_MEAN, CAT41_X_MEAN, CAT41_X_MEAN, CAT41_X_MEAN];
    let mut theta = [0.0; 4];
    for (k, t) in theta.iter_mut().enumerate() {
        let alpha = &CAT41_ALPHA[usize::from(k > 0)];
        *t = dot(alpha, &ex);
    }
    CatTruth { theta }
}

/// Assignment probabilities of the categorical design at covariate row
/// `x`, all four levels (softmax with the last level as reference).
pub fn cat41_probs(x: &[f64]) -> [f64; 4] {
    let mut eta = [0.0f64; 4];
    for k in 0..3 {
        eta[k] = dot(&CAT41_BETA[k], x);
    }
    let max = eta.iter().fold(f64::MIN, |a, &b| a.max(b));
    let mut p = [0.0f64; 4];
    let mut denom = 0.0;
    for k in 0..4 {
        p[k] = (eta[k] - max).exp();
        denom += p[k];
    }
    for v in p.iter_mut() {
        *v /= denom;
    }
    p
}

/// Draw one categorical-design sample: `X₁ = 1`, `X₂..X₅` i.i.d.
/// `Normal(3, variance 4)`, treatment from the multinomial-logit
/// probabilities, `Y = α_Aᵀ X + Normal(0,1)`.
pub fn gen_cat41(n: usize, seed: u64) -> (Dataset, CatTruth) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut covariates = Vec::with_capacity(n * 5);
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut x = [0.0f64; 5];
    for _ in 0..n {
        x[0] = 1.0;
        for v in x.iter_mut().skip(1) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = CAT41_X_MEAN + CAT41_X_SD * z;
        }
        let p = cat41_probs(&x);
        let u: f64 = rng.random();
        let mut level = 3usize;
        let mut cum = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            cum += pk;
            if u < cum {
                level = k;
                break;
            }
        }
        let alpha = &CAT41_ALPHA[usize::from(level > 0)];
        let noise: f64 = StandardNormal.sample(&mut rng);
        covariates.extend_from_slice(&x);
        treatment.push(level as f64);
        outcome.push(dot(alpha, &x) + noise);
    }
    let ds = Dataset::new(treatment, outcome, covariates, 5).expect("columns are coherent");
    (ds, cat41_truth())
}

/// Which working model a misspecification transform is meant for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkingModel {
    PiModel,
    MModel,
}

/// Covariate transform fed to the categorical propensity model when it is
/// misspecified: `(e^{x₁}, x₁x₂, x₁²x₃, x₁+x₄, x₅ sin²x₅)`.
pub fn cat41_pi_misspec_spec() -> BasisSpec {
    BasisSpec::from_strings(
        &["exp(x1)", "x1*x2", "x1^2*x3", "x1+x4", "x5*sin(x5)^2"],
        5,
        false,
    )
    .expect("fixed expressions parse")
}

/// Outcome basis used when the categorical outcome model is
/// misspecified: `(x₁², x₁x₂, x₂x₃², (x₄−3)³+3, x₅)`.
pub fn cat41_m_misspec_spec() -> BasisSpec {
    BasisSpec::from_strings(
        &["x1^2", "x1*x2", "x2*x3^2", "(x4-3)^3+3", "x5"],
        5,
        false,
    )
    .expect("fixed expressions parse")
}

/// Materialize the misspecified covariate matrix (row-major, five columns
/// per unit) that the chosen working model of the categorical design sees.
pub fn misspecify_cat(ds: &Dataset, which: WorkingModel) -> Vec<f64> {
    let spec = match which {
        WorkingModel::PiModel => cat41_pi_misspec_spec(),
        WorkingModel::MModel => cat41_m_misspec_spec(),
    };
    let q = spec.q();
    let mut out = vec![0.0; ds.n() * q];
    for i in 0..ds.n() {
        spec.eval_into(ds.x(i), 0.0, &mut out[i * q..(i + 1) * q]);
    }
    out
}

/// Propensity family of the categorical design under the requested
/// specification regime.
pub fn cat41_family(pi_correct: bool) -> PropensityFamily {
    let features = if pi_correct {
        FeatureMap::Identity
    } else {
        FeatureMap::Mapped(cat41_pi_misspec_spec())
    };
    PropensityFamily::MultinomialLogit {
        k_max: CAT41_K_MAX,
        features,
    }
}

/// Balancing basis of the categorical design under the requested
/// specification regime (first moments of the covariates when correct).
pub fn cat41_basis(m_correct: bool) -> BasisSpec {
    if m_correct {
        BasisSpec::identity(5)
    } else {
        cat41_m_misspec_spec()
    }
}

/// Expression strings of the categorical balancing basis, reusable against
/// covariate matrices wider than the raw design (extra columns ignored).
fn cat41_basis_strings(m_correct: bool) -> [&'static str; 5] {
    if m_correct {
        ["x1", "x2", "x3", "x4", "x5"]
    } else {
        ["x1^2", "x1*x2", "x2*x3^2", "(x4-3)^3+3", "x5"]
    }
}

/// Working configuration of the balancing estimator for the categorical
/// design: the dataset augmented with fitted candidate propensities, the
/// propensity family to balance with, and the balancing basis.
///
/// The candidate model is the regime's multinomial logit, fitted by
/// maximum likelihood on the propensity covariates (transformed when the
/// propensity side is misspecified). Its predicted probabilities for
/// levels 1..=3 become extra covariate columns, and both the working
/// family and the balancing basis are the regime's outcome basis extended
/// by those columns: `B̃(x) = (b_1(x), …, b_5(x), p̂_1, p̂_2, p̂_3)`. Using
/// one shared basis keeps the system square (`p = q(K+1)` conditions), so
/// each group's weighted `B̃`-mean is driven to its sample mean exactly,
/// while the family still contains the candidate fit itself: coefficient
/// one on the matching probability column, and `p̂_0` is reachable because
/// the constant sits in the outcome basis.
pub fn cat41_balance_config(
    ds: &Dataset,
    pi_correct: bool,
    m_correct: bool,
) -> Result<CatBalanceConfig> {
    let candidate = cat41_family(pi_correct);
    let beta = match mle_fit(ds, &candidate) {
        Ok(fit) => fit.beta,
        Err(Error::NonConvergence { best, .. }) => best,
        Err(e) => return Err(e),
    };
    let model = candidate.cat_model(ds)?;
    let n = ds.n();
    let d_aug = 5 + 3;
    let mut covariates = Vec::with_capacity(n * d_aug);
    let mut probs = [0.0f64; 4];
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    for i in 0..n {
        covariates.extend_from_slice(ds.x(i));
        model.probs_into(i, &beta, &mut probs);
        covariates.extend_from_slice(&probs[1..]);
        treatment.push(ds.dose(i));
        outcome.push(ds.y(i));
    }
    let aug = Dataset::new(treatment, outcome, covariates, d_aug)?;

    let mut strings: Vec<&str> = cat41_basis_strings(m_correct).to_vec();
    strings.extend_from_slice(&["x6", "x7", "x8"]);
    let shared = BasisSpec::from_strings(&strings, d_aug, false)?;
    let family = PropensityFamily::SameBasisLinear {
        k_max: CAT41_K_MAX,
        basis: shared.clone(),
    };
    let init = match mle_fit(&aug, &family) {
        Ok(fit) => Some(fit.beta),
        Err(Error::NonConvergence { best, .. }) => Some(best),
        Err(_) => None,
    };
    Ok(CatBalanceConfig {
        data: aug,
        family,
        basis: shared,
        init,
    })
}

/// Prepared inputs for one categorical balancing fit.
pub struct CatBalanceConfig {
    /// The replicate's dataset with the candidate probabilities appended.
    pub data: Dataset,
    pub family: PropensityFamily,
    pub basis: BasisSpec,
    /// Warm start for the balancing fit: the family's own likelihood fit,
    /// whose stationary point already solves the balancing system because
    /// the basis and the family coincide. `None` if that fit failed hard.
    pub init: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// continuous design
// ---------------------------------------------------------------------------

/// Dose-assignment mean parameter `λ(x) = expit(γᵀx)`.
pub fn cont42_lambda(x: &[f64]) -> f64 {
    expit(dot(&CONT42_GAMMA, x))
}

/// Linear predictor `μ(a,x)` shared by both continuous outcomes.
pub fn cont42_mu(a: f64, x: &[f64]) -> f64 {
    dot(&CONT42_MU_BASE, x) + a * dot(&CONT42_MU_SLOPE, x) - CONT42_MU_CUBIC * a * a * a
}

/// True regression `m(a,x) = E(Y | A=a, X=x)` of the chosen outcome.
pub fn cont42_mean(outcome: ContOutcome, a: f64, x: &[f64]) -> f64 {
    let mu = cont42_mu(a, x);
    match outcome {
        ContOutcome::Nonlinear => expit(mu),
        ContOutcome::Linear => (mu + 15.0) / 20.0,
    }
}

/// True conditional outcome variance `σ²(a,x)` of the chosen outcome.
pub fn cont42_var(outcome: ContOutcome, a: f64, x: &[f64]) -> f64 {
    match outcome {
        ContOutcome::Nonlinear => {
            let m = cont42_mean(outcome, a, x);
            m * (1.0 - m)
        }
        ContOutcome::Linear => 0.16,
    }
}

/// True dose density `π₀(a,x)` on `(0, 20)`; zero outside the support.
pub fn cont42_pi0(a: f64, x: &[f64]) -> f64 {
    beta_density(a, x, &CONT42_GAMMA, CONT42_PHI, 0.0, CONT42_DOSE_MAX).unwrap_or(0.0)
}

/// True-curve record of the continuous design. The curve `θ(a) = E
/// m(a,X)` has no closed form under the Bernoulli outcome, so the record
/// evaluates it by Monte Carlo over fresh covariate draws; the Gaussian
/// outcome admits a cubic closed form, kept alongside as a cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ContTruth {
    pub outcome: ContOutcome,
}

impl ContTruth {
    /// Closed-form `θ(a)` where one exists (the Gaussian outcome):
    /// `0.8 + 0.005a − 0.00010985a³`.
    pub fn theta_closed_form(&self, a: f64) -> Option<f64> {
        match self.outcome {
            ContOutcome::Linear => {
                Some(0.8 + 0.005 * a - CONT42_MU_CUBIC / 20.0 * a * a * a)
            }
            ContOutcome::Nonlinear => None,
        }
    }

    /// Monte Carlo oracle `θ(a_g) ≈ mean over draws of m(a_g, X)` on a
    /// dose grid. Deterministic for a fixed seed and independent of the
    /// worker count (fixed-chunk reduction).
    pub fn theta_mc(&self, grid: &[f64], mc_draws: usize, seed: u64) -> Vec<f64> {
        let outcome = self.outcome;
        let cubes: Vec<f64> = grid.iter().map(|&a| a * a * a).collect();
        let sums = mc_chunked(mc_draws, seed, move |rng, draws| {
            let mut acc = vec![0.0f64; grid.len()];
            let mut x = [0.0f64; 5];
            for _ in 0..draws {
                x[0] = 1.0;
                for v in x.iter_mut().skip(1) {
                    *v = StandardNormal.sample(rng);
                }
                let c0 = dot(&CONT42_MU_BASE, &x);
                let c1 = dot(&CONT42_MU_SLOPE, &x);
                for (g, &a) in grid.iter().enumerate() {
                    let mu = c0 + a * c1 - CONT42_MU_CUBIC * cubes[g];
                    acc[g] += match outcome {
                        ContOutcome::Nonlinear => expit(mu),
                        ContOutcome::Linear => (mu + 15.0) / 20.0,
                    };
                }
            }
            acc
        });
        sums.into_iter().map(|s| s / mc_draws as f64).collect()
    }

    /// Disk-cached oracle: reuse a stored evaluation when one exists for
    /// this design, grid and draw count, otherwise compute with the fixed
    /// oracle seed and store it. The cache lives in `BALCAUSE_CACHE_DIR`
    /// (or the system temp directory) and failures to write it are
    /// ignored — the values are returned either way.
    pub fn theta_cached(&self, grid: &[f64], mc_draws: usize) -> Vec<f64> {
        let dir = std::env::var_os("BALCAUSE_CACHE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("balcause-oracle"));
        self.theta_cached_in(&dir, grid, mc_draws)
    }

    /// [`theta_cached`](Self::theta_cached) with an explicit cache
    /// directory.
    pub fn theta_cached_in(&self, dir: &Path, grid: &[f64], mc_draws: usize) -> Vec<f64> {
        let tag = match self.outcome {
            ContOutcome::Nonlinear => "nonlinear",
            ContOutcome::Linear => "linear",
        };
        let mut hasher = Sha256::new();
        hasher.update(mc_draws.to_le_bytes());
        for &a in grid {
            hasher.update(a.to_le_bytes());
        }
        let digest = hasher.finalize();
        let short: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        let path = dir.join(format!("theta-{tag}-{mc_draws}-{short}.json"));

        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(stored) = serde_json::from_slice::<OracleFile>(&bytes) {
                if stored.mc_draws == mc_draws && stored.grid == grid {
                    return stored.theta;
                }
            }
        }
        let theta = self.theta_mc(grid, mc_draws, ORACLE_SEED);
        let record = OracleFile {
            design: tag.to_string(),
            mc_draws,
            grid: grid.to_vec(),
            theta: theta.clone(),
        };
        if std::fs::create_dir_all(dir).is_ok() {
            if let Ok(json) = serde_json::to_vec(&record) {
                let tmp = path.with_extension("json.tmp");
                if std::fs::write(&tmp, json).is_ok() {
                    let _ = std::fs::rename(&tmp, &path);
                }
            }
        }
        theta
    }
}

#[derive(Serialize, Deserialize)]
struct OracleFile {
    design: String,
    mc_draws: usize,
    grid: Vec<f64>,
    theta: Vec<f64>,
}

/// Draw one continuous-design sample: `X₁ = 1`, `X₂..X₅` i.i.d. standard
/// normal, `A/20 ~ Beta(φλ(X), φ(1−λ(X)))`, and the outcome per the
/// chosen flavour.
pub fn gen_cont42(n: usize, seed: u64, outcome: ContOutcome) -> (Dataset, ContTruth) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut covariates = Vec::with_capacity(n * 5);
    let mut treatment = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    let mut x = [0.0f64; 5];
    for _ in 0..n {
        x[0] = 1.0;
        for v in x.iter_mut().skip(1) {
            *v = StandardNormal.sample(&mut rng);
        }
        let lam = cont42_lambda(&x);
        let beta = BetaDist::new(CONT42_PHI * lam, CONT42_PHI * (1.0 - lam))
            .expect("beta shapes are positive");
        // Keep the dose strictly interior so log-density evaluations stay
        // finite even if the sampler rounds to an endpoint.
        let b: f64 = beta.sample(&mut rng).clamp(1e-12, 1.0 - 1e-12);
        let a = CONT42_DOSE_MAX * b;
        let y = match outcome {
            ContOutcome::Nonlinear => {
                let p = expit(cont42_mu(a, &x));
                let u: f64 = rng.random();
                if u < p {
                    1.0
                } else {
                    0.0
                }
            }
            ContOutcome::Linear => {
                let z: f64 = StandardNormal.sample(&mut rng);
                cont42_mean(outcome, a, &x) + 0.4 * z
            }
        };
        covariates.extend_from_slice(&x);
        treatment.push(a);
        outcomes.push(y);
    }
    let ds = Dataset::new(treatment, outcomes, covariates, 5).expect("columns are coherent");
    (ds, ContTruth { outcome })
}

/// The nonlinear covariate transform shared by both misspecified working
/// models of the continuous design:
/// `x* = (1, e^{x₂/2}, x₃/(1+e^{x₂})+10, (x₂x₄/25+0.6)³, (x₃+x₅+20)²)`.
pub fn misspecify_cont(x: &[f64]) -> [f64; 5] {
    [
        1.0,
        (x[1] / 2.0).exp(),
        x[2] / (1.0 + x[1].exp()) + 10.0,
        {
            let t = x[1] * x[3] / 25.0 + 0.6;
            t * t * t
        },
        {
            let t = x[2] + x[4] + 20.0;
            t * t
        },
    ]
}

/// [`misspecify_cont`] as a parsed basis, for plugging into working
/// models; evaluates identically to the closed-form function.
pub fn cont42_misspec_spec() -> BasisSpec {
    BasisSpec::from_strings(
        &[
            "1",
            "exp(x2/2)",
            "x3/(1+exp(x2))+10",
            "(x2*x4/25+0.6)^3",
            "(x3+x5+20)^2",
        ],
        5,
        false,
    )
    .expect("fixed expressions parse")
}

/// Propensity family of the continuous design under the requested
/// specification regime.
pub fn cont42_family(pi_correct: bool) -> PropensityFamily {
    let features = if pi_correct {
        FeatureMap::Identity
    } else {
        FeatureMap::Mapped(cont42_misspec_spec())
    };
    PropensityFamily::BetaDensity {
        lo: 0.0,
        hi: CONT42_DOSE_MAX,
        features,
    }
}

/// Outcome basis of the continuous design. Correct: the basis of
/// `μ(a,x)` — the covariates, their dose interactions and the cubic dose
/// term. Misspecified: the same construction over the transformed
/// covariates, with no cubic dose term.
pub fn cont42_basis(m_correct: bool) -> BasisSpec {
    if m_correct {
        BasisSpec::from_strings(
            &[
                "x1", "x2", "x3", "x4", "x5", "a", "a*x2", "a*x3", "a*x4", "a*x5", "a^3",
            ],
            5,
            true,
        )
        .expect("fixed expressions parse")
    } else {
        BasisSpec::from_strings(
            &[
                "1",
                "exp(x2/2)",
                "x3/(1+exp(x2))+10",
                "(x2*x4/25+0.6)^3",
                "(x3+x5+20)^2",
                "a",
                "a*exp(x2/2)",
                "a*(x3/(1+exp(x2))+10)",
                "a*(x2*x4/25+0.6)^3",
                "a*(x3+x5+20)^2",
            ],
            5,
            true,
        )
        .expect("fixed expressions parse")
    }
}

// ---------------------------------------------------------------------------
// replicate runner
// ---------------------------------------------------------------------------

/// Run a full scenario: generate each replicate from its counter seed,
/// fit the balancing and maximum-likelihood IPW estimators under the
/// scenario's specification regime, and aggregate the metric table.
///
/// Replicates whose estimators fail hard are counted and excluded; more
/// than 5% of them fails the whole run. An optimizer that merely stops at
/// its iteration cap contributes its best point and is tallied under
/// `nonconverged` instead.
pub fn run_replicates(sc: &Scenario) -> Result<MetricTable> {
    sc.validate()?;
    match sc.design {
        Design::Cat41 => run_cat(sc),
        Design::ContNonlinear42 | Design::ContLinear42 => run_cont(sc),
    }
}

struct CatRep {
    /// Balancing contrast estimates `θ̂_k − θ̂_0`, `k = 1..=3`.
    cb: [f64; 3],
    /// Their estimated standard deviations from the sandwich matrix.
    cb_sd: [f64; 3],
    /// Maximum-likelihood IPW contrast estimates.
    ml: [f64; 3],
    nonconverged: bool,
}

fn contrast_stats(theta: &[f64], sigma: &[Vec<f64>]) -> ([f64; 3], [f64; 3]) {
    let mut est = [0.0; 3];
    let mut sd = [0.0; 3];
    for k in 1..=3 {
        est[k - 1] = theta[k] - theta[0];
        let var = sigma[k][k] + sigma[0][0] - 2.0 * sigma[k][0];
        sd[k - 1] = var.max(0.0).sqrt();
    }
    (est, sd)
}

fn cat_replicate(sc: &Scenario, r: u64) -> Result<CatRep> {
    let (ds, _) = gen_cat41(sc.n, sc.seed ^ r);
    let cfg = cat41_balance_config(&ds, sc.pi_correct, sc.m_correct)?;
    let (aug, family, basis) = (&cfg.data, &cfg.family, &cfg.basis);

    let (theta_cb, sigma, converged) = match fit_balance(aug, family, basis, cfg.init.as_deref())
    {
        Ok(fit) => (fit.theta, fit.sigma, true),
        Err(Error::NonConvergence { best, .. }) => {
            let clamps = ClampCounter::new();
            let theta = estimate_theta(aug, family, &best, &clamps)?;
            let sigma = sandwich_variance(aug, family, basis, &best, &theta, &clamps)?;
            (theta, sigma, false)
        }
        Err(e) => return Err(e),
    };
    let (cb, cb_sd) = contrast_stats(&theta_cb, &sigma);

    let ml_family = cat41_family(sc.pi_correct);
    let beta_ml = match mle_fit(&ds, &ml_family) {
        Ok(fit) => fit.beta,
        Err(Error::NonConvergence { best, .. }) => best,
        Err(e) => return Err(e),
    };
    let clamps = ClampCounter::new();
    let theta_ml = estimate_theta(&ds, &ml_family, &beta_ml, &clamps)?;
    let mut ml = [0.0; 3];
    for k in 1..=3 {
        ml[k - 1] = theta_ml[k] - theta_ml[0];
    }

    Ok(CatRep {
        cb,
        cb_sd,
        ml,
        nonconverged: !converged,
    })
}

fn run_cat(sc: &Scenario) -> Result<MetricTable> {
    let outs: Vec<Result<CatRep>> =
        par::map_collect(sc.replicates, |r| cat_replicate(sc, r as u64));
    let (reps, failures, nonconverged) = sift(outs, sc.replicates)?;

    let truth = cat41_truth();
    let used = reps.len();
    let mut cat = Vec::with_capacity(6);
    for k in 1..=3usize {
        let target = truth.contrast(k);
        let ests: Vec<f64> = reps.iter().map(|r| r.cb[k - 1]).collect();
        let sd_hats: Vec<f64> = reps.iter().map(|r| r.cb_sd[k - 1]).collect();
        let covered = ests
            .iter()
            .zip(&sd_hats)
            .filter(|(e, s)| (*e - target).abs() <= Z_975 * **s)
            .count();
        let mut row = summarize_cat("balance", k, target, &ests);
        row.mean_sd_hat = Some(mean(&sd_hats));
        row.coverage = Some(covered as f64 / used as f64);
        cat.push(row);
    }
    for k in 1..=3usize {
        let ests: Vec<f64> = reps.iter().map(|r| r.ml[k - 1]).collect();
        cat.push(summarize_cat("ml", k, truth.contrast(k), &ests));
    }

    Ok(MetricTable {
        scenario: sc.clone(),
        replicates_used: used,
        failures,
        nonconverged,
        cat,
        cont: Vec::new(),
    })
}

fn summarize_cat(estimator: &str, level: usize, truth: f64, ests: &[f64]) -> CatMetricRow {
    let m = mean(ests);
    let mse = mean(&ests.iter().map(|e| (e - truth) * (e - truth)).collect::<Vec<_>>());
    let sd = if ests.len() >= 2 {
        let v = ests.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (ests.len() - 1) as f64;
        Some(v.sqrt())
    } else {
        None
    };
    CatMetricRow {
        estimator: estimator.to_string(),
        level,
        truth,
        bias: m - truth,
        sd,
        mse,
        mean_sd_hat: None,
        coverage: None,
    }
}

struct ContRep {
    /// Balancing-curve values on the metric grid; NaN where the grid
    /// point fell outside this replicate's trimmed dose range (or its
    /// kernel window was empty).
    cb: Vec<f64>,
    /// Maximum-likelihood-curve values, same layout.
    ml: Vec<f64>,
    /// Count of this replicate's retained doses nearest each grid point.
    hist: Vec<u32>,
    nonconverged: bool,
}

fn metric_grid() -> Vec<f64> {
    (0..METRIC_GRID_POINTS)
        .map(|i| CONT42_DOSE_MAX * i as f64 / (METRIC_GRID_POINTS - 1) as f64)
        .collect()
}

/// Type-7 empirical quantile of an ascending-sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let idx = p * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn materialize_h(
    sc: &Scenario,
    ds: &Dataset,
    family: &PropensityFamily,
    beta: &[f64],
) -> Result<f64> {
    match sc.h_plan {
        HPlan::Fixed(h) => Ok(h),
        HPlan::LooCv => {
            let grid = default_h_grid(ds)?;
            select_h_loocv(ds, family, beta, &grid, sc.estimator, sc.kernel)
        }
        HPlan::Oscv => {
            let grid = default_h_grid(ds)?;
            select_h_oscv(ds, family, beta, &grid, sc.estimator, sc.kernel)
        }
    }
}

fn eval_curve_point(
    sc: &Scenario,
    ds: &Dataset,
    family: &PropensityFamily,
    beta: &[f64],
    a: f64,
    h: f64,
    clamps: &ClampCounter,
) -> Result<f64> {
    match sc.estimator {
        CurveKind::Raw => theta_raw(ds, family, beta, a, h, sc.kernel, clamps),
        CurveKind::LocalConstant => {
            theta_local_constant(ds, family, beta, a, h, sc.kernel, clamps)
        }
        CurveKind::LocalLinear => {
            theta_local_linear(ds, family, beta, a, h, sc.kernel, clamps).map(|(v, _)| v)
        }
    }
}

fn cont_replicate(sc: &Scenario, r: u64, grid: &[f64]) -> Result<ContRep> {
    let outcome = sc.design.outcome().expect("continuous design");
    let (ds, _) = gen_cont42(sc.n, sc.seed ^ r, outcome);
    let family = cont42_family(sc.pi_correct);
    let basis = cont42_basis(sc.m_correct);
    let cfg = BalanceConfig::new(rule_of_thumb_l(sc.n, CONT42_L_CONST));

    let (beta_cb, converged) = match fit_balance_continuous(&ds, &family, &basis, None, &cfg) {
        Ok(fit) => (fit.beta, fit.converged),
        Err(Error::NonConvergence { best, .. }) => (best, false),
        Err(e) => return Err(e),
    };
    let beta_ml = match mle_fit(&ds, &family) {
        Ok(fit) => fit.beta,
        Err(Error::NonConvergence { best, .. }) => best,
        Err(e) => return Err(e),
    };

    let h_cb = materialize_h(sc, &ds, &family, &beta_cb)?;
    let h_ml = materialize_h(sc, &ds, &family, &beta_ml)?;

    let mut doses = ds.treatments().to_vec();
    doses.sort_by(|a, b| a.partial_cmp(b).expect("doses are finite"));
    let q05 = quantile_sorted(&doses, 0.05);
    let q95 = quantile_sorted(&doses, 0.95);

    let step = grid[1] - grid[0];
    let mut hist = vec![0u32; grid.len()];
    for &a in doses.iter().filter(|&&a| a >= q05 && a <= q95) {
        let g = ((a - grid[0]) / step).round() as usize;
        hist[g.min(grid.len() - 1)] += 1;
    }

    let clamps = ClampCounter::new();
    let mut cb = vec![f64::NAN; grid.len()];
    let mut ml = vec![f64::NAN; grid.len()];
    for (g, &a) in grid.iter().enumerate() {
        if a < q05 || a > q95 {
            continue;
        }
        for (slot, beta, h) in [(&mut cb[g], &beta_cb, h_cb), (&mut ml[g], &beta_ml, h_ml)] {
            match eval_curve_point(sc, &ds, &family, beta, a, h, &clamps) {
                Ok(v) => *slot = v,
                Err(Error::EmptyWindow { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }

    Ok(ContRep {
        cb,
        ml,
        hist,
        nonconverged: !converged,
    })
}

fn run_cont(sc: &Scenario) -> Result<MetricTable> {
    let outcome = sc.design.outcome().expect("continuous design");
    let grid = metric_grid();
    let truth = ContTruth { outcome }.theta_cached(&grid, ORACLE_DRAWS);

    let outs: Vec<Result<ContRep>> =
        par::map_collect(sc.replicates, |r| cont_replicate(sc, r as u64, &grid));
    let (reps, failures, nonconverged) = sift(outs, sc.replicates)?;

    let g_len = grid.len();
    let mut hist = vec![0u64; g_len];
    let mut cb_acc = CurveAccumulator::new(g_len);
    let mut ml_acc = CurveAccumulator::new(g_len);
    for rep in &reps {
        for g in 0..g_len {
            hist[g] += u64::from(rep.hist[g]);
        }
        cb_acc.absorb(&rep.cb, &truth);
        ml_acc.absorb(&rep.ml, &truth);
    }

    let cont = vec![
        cb_acc.integrate("balance", &hist, &truth)?,
        ml_acc.integrate("ml", &hist, &truth)?,
    ];

    Ok(MetricTable {
        scenario: sc.clone(),
        replicates_used: reps.len(),
        failures,
        nonconverged,
        cat: Vec::new(),
        cont,
    })
}

/// Per-grid-point running sums of one estimator's curve values and
/// squared errors across replicates.
struct CurveAccumulator {
    sum: Vec<f64>,
    sse: Vec<f64>,
    cnt: Vec<u32>,
}

impl CurveAccumulator {
    fn new(g_len: usize) -> Self {
        CurveAccumulator {
            sum: vec![0.0; g_len],
            sse: vec![0.0; g_len],
            cnt: vec![0; g_len],
        }
    }

    fn absorb(&mut self, vals: &[f64], truth: &[f64]) {
        for (g, &v) in vals.iter().enumerate() {
            if v.is_finite() {
                self.sum[g] += v;
                let e = v - truth[g];
                self.sse[g] += e * e;
                self.cnt[g] += 1;
            }
        }
    }

    /// Weight the pointwise absolute bias and RMSE by the pooled
    /// retained-dose histogram and sum over grid points that carry both
    /// weight and at least one curve evaluation.
    fn integrate(&self, estimator: &str, hist: &[u64], truth: &[f64]) -> Result<ContMetricRow> {
        let total: u64 = hist
            .iter()
            .zip(&self.cnt)
            .filter(|(_, &c)| c > 0)
            .map(|(&w, _)| w)
            .sum();
        if total == 0 {
            return Err(Error::Degenerate(
                "no dose-grid point carries both weight and a curve evaluation".into(),
            ));
        }
        let mut ib = 0.0;
        let mut irmse = 0.0;
        let mut used = 0usize;
        for g in 0..truth.len() {
            if self.cnt[g] == 0 || hist[g] == 0 {
                continue;
            }
            used += 1;
            let w = hist[g] as f64 / total as f64;
            let c = f64::from(self.cnt[g]);
            ib += w * (self.sum[g] / c - truth[g]).abs();
            irmse += w * (self.sse[g] / c).sqrt();
        }
        Ok(ContMetricRow {
            estimator: estimator.to_string(),
            abs_bias_x100: 100.0 * ib,
            rmse_x100: 100.0 * irmse,
            grid_points_used: used,
        })
    }
}

/// Split replicate outcomes into successes and failures, enforcing the
/// failure budget; also tallies non-converged (but used) replicates.
fn sift<T>(outs: Vec<Result<T>>, replicates: usize) -> Result<(Vec<T>, usize, usize)>
where
    T: HasConvergence,
{
    let mut reps = Vec::with_capacity(outs.len());
    let mut failures = 0usize;
    let mut first_err: Option<Error> = None;
    for out in outs {
        match out {
            Ok(r) => reps.push(r),
            Err(e) => {
                failures += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    if failures as f64 > MAX_FAILURE_FRACTION * replicates as f64 {
        let detail = first_err.map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::Degenerate(format!(
            "{failures} of {replicates} replicates failed (first error: {detail})"
        )));
    }
    let nonconverged = reps.iter().filter(|r| r.nonconverged()).count();
    Ok((reps, failures, nonconverged))
}

trait HasConvergence {
    fn nonconverged(&self) -> bool;
}

impl HasConvergence for CatRep {
    fn nonconverged(&self) -> bool {
        self.nonconverged
    }
}

impl HasConvergence for ContRep {
    fn nonconverged(&self) -> bool {
        self.nonconverged
    }
}

// ---------------------------------------------------------------------------
// theoretical leading-order bias and variance
// ---------------------------------------------------------------------------

/// Which asymptotic regime the leading-order formulas are evaluated
/// under: a correctly specified propensity model, or a misspecified one
/// whose probability limit is supplied separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsymThm {
    /// Correct propensity: denominators use the true dose density.
    Thm2,
    /// Misspecified propensity with limiting working density `π(·,·,β*)`.
    Thm3,
}

/// Oracle callables describing a continuous-treatment data-generating
/// process, for evaluating the leading-order bias and variance formulas.
pub struct ContDgpOracles<'a> {
    /// True dose density `π₀(a,x)`.
    pub pi0: Box<dyn Fn(f64, &[f64]) -> f64 + Sync + 'a>,
    /// True regression `m(a,x)`.
    pub m: Box<dyn Fn(f64, &[f64]) -> f64 + Sync + 'a>,
    /// True conditional outcome variance `σ²(a,x)`.
    pub sigma2: Box<dyn Fn(f64, &[f64]) -> f64 + Sync + 'a>,
    /// Limiting working density under misspecification (required for
    /// [`AsymThm::Thm3`]).
    pub pi_star: Option<Box<dyn Fn(f64, &[f64]) -> f64 + Sync + 'a>>,
    /// Covariate sampler.
    pub sample_x: Box<dyn Fn(&mut ChaCha12Rng) -> Vec<f64> + Sync + 'a>,
    /// Dose step of the central second difference used for
    /// `∂²{π₀ m}/∂a²`.
    pub fd_step: f64,
}

/// Ready-made oracles for the bundled continuous design.
pub fn cont42_dgp_oracles(outcome: ContOutcome) -> ContDgpOracles<'static> {
    ContDgpOracles {
        pi0: Box::new(cont42_pi0),
        m: Box::new(move |a, x| cont42_mean(outcome, a, x)),
        sigma2: Box::new(move |a, x| cont42_var(outcome, a, x)),
        pi_star: None,
        sample_x: Box::new(|rng| {
            let mut x = vec![1.0; 5];
            for v in x.iter_mut().skip(1) {
                *v = StandardNormal.sample(rng);
            }
            x
        }),
        fd_step: 0.01,
    }
}

/// Leading-order asymptotic bias and variance of the raw kernel IPW
/// curve estimator at dose `a` with outcome bandwidth `h` and sample size
/// `n`:
///
/// ```text
/// bias = h²/2 · μ₂(K) · E[ ∂²{π₀(a,X) m(a,X)}/∂a² / denom(a,X) ]
/// var  = ∫K²/(nh)     · E[ numer(a,X) ]
/// ```
///
/// where under a correct propensity model `denom = π₀` and
/// `numer = (m² + σ²)/π₀`, and under a misspecified one with limit `π*`,
/// `denom = π*` and `numer = π₀ (m² + σ²)/π*²`. The expectations run by
/// Monte Carlo over `mc_draws` covariate draws (deterministic for a
/// fixed seed); the dose second derivative is a central second
/// difference with step `oracles.fd_step`.
pub fn theoretical_bias_var_cont(
    oracles: &ContDgpOracles,
    a: f64,
    h: f64,
    n: usize,
    which: AsymThm,
    kernel: KernelSpec,
    mc_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if mc_draws == 0 {
        return Err(Error::Config("mc_draws must be positive".into()));
    }
    let pi_star = match which {
        AsymThm::Thm2 => None,
        AsymThm::Thm3 => Some(oracles.pi_star.as_ref().ok_or_else(|| {
            Error::Config(
                "the misspecified-propensity formulas need the limiting working density"
                    .into(),
            )
        })?),
    };
    let d = oracles.fd_step;
    let sums = mc_chunked(mc_draws, seed, |rng, draws| {
        let mut acc = vec![0.0f64; 2];
        for _ in 0..draws {
            let x = (oracles.sample_x)(rng);
            let g = |t: f64| (oracles.pi0)(t, &x) * (oracles.m)(t, &x);
            let sec = (g(a + d) - 2.0 * g(a) + g(a - d)) / (d * d);
            let pi0 = (oracles.pi0)(a, &x);
            let m = (oracles.m)(a, &x);
            let s2 = (oracles.sigma2)(a, &x);
            match pi_star {
                None => {
                    acc[0] += sec / pi0;
                    acc[1] += (m * m + s2) / pi0;
                }
                Some(ps) => {
                    let p = ps(a, &x);
                    acc[0] += sec / p;
                    acc[1] += pi0 * (m * m + s2) / (p * p);
                }
            }
        }
        acc
    });
    let bias = h * h / 2.0 * kernel.mu2() * sums[0] / mc_draws as f64;
    let var = kernel.r_k() / (n as f64 * h) * sums[1] / mc_draws as f64;
    Ok((bias, var))
}

// ---------------------------------------------------------------------------
// shared numeric helpers
// ---------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Accumulate per-draw vectors over a fixed number of chunks, each with
/// its own derived seed, folding chunk results in index order; the total
/// is bit-identical for any worker count.
fn mc_chunked<F>(draws: usize, seed: u64, per_chunk: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha12Rng, usize) -> Vec<f64> + Sync,
{
    let chunks = MC_CHUNKS.min(draws.max(1));
    let base = draws / chunks;
    let rem = draws % chunks;
    let parts: Vec<Vec<f64>> = par::map_collect(chunks, |c| {
        let mut rng =
            ChaCha12Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let count = base + usize::from(c < rem);
        per_chunk(&mut rng, count)
    });
    let mut total = parts[0].clone();
    for part in &parts[1..] {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}
