//! Batch command-line front end for the `balcause` estimators.
//!
//! Three subcommands map one-to-one onto library entry points:
//! `fit-categorical` runs the balancing fit and reference-level contrasts
//! on a CSV, `fit-continuous` produces a dose-response curve file, and
//! `simulate` executes a Monte Carlo benchmark scenario. The binary adds
//! nothing numerical of its own — every figure in an output file comes from
//! the corresponding library call — it only parses flags, loads data and
//! writes result files stamped with a configuration fingerprint.
//!
//! Exit codes: `0` success, `1` usage error, `2` data or configuration
//! error, `3` estimator non-convergence (results are still written, with
//! the shortfall flagged in the diagnostics). Every failure prints a single
//! JSON line `{"error": <code>, "message": <text>}` on stderr.
//!
//! `--workers` bounds internal parallelism only; outputs are byte-identical
//! for any worker count, so the flag is excluded from the configuration
//! fingerprint.

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use balcause::basis::{BasisSpec, FeatureMap};
use balcause::categorical::{contrasts, fit_at, fit_balance};
use balcause::continuous::{
    default_h_grid, dose_response_curve, grid_over_support, rule_of_thumb_l, BandwidthPlan,
    CurveKind, HSelect, VarianceForm,
};
use balcause::data::{load_csv, ColumnSchema};
use balcause::kernel::KernelSpec;
use balcause::propensity::PropensityFamily;
use balcause::sim::{run_replicates, Design, HPlan, Scenario};
use balcause::{par, report, Error, Result, TreatmentSpace};

const GRAMMAR: &str = "BASIS MINI-GRAMMAR:
  A basis or covariate map is a comma-separated list of terms; each term is
  an arithmetic expression over covariate columns and, where a dose is in
  scope, the treatment dose:
    x1, x2, ...    covariate columns (1-based)
    x              shorthand expanding to one term per covariate column
    a              the dose; a2, a3 abbreviate a^2, a^3
    + - * / ^      arithmetic; ^ binds tightest and associates to the right
    exp log ln sin cos sqrt abs expit sigmoid tanh
  Examples: \"x,a,a2,a3\"    \"exp(x1),x1*x2,(x4-3)^3\"    \"x2/(1+exp(x3))\"
  The keyword \"linear\" means the raw covariate columns unchanged.";

#[derive(Parser)]
#[command(
    name = "balcause",
    version,
    about = "Covariate-balancing inverse-probability weighting for causal effects",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the balancing estimator for a categorical treatment on CSV data.
    FitCategorical(FitCategoricalArgs),
    /// Estimate a dose-response curve for a continuous treatment on CSV data.
    FitContinuous(FitContinuousArgs),
    /// Run a Monte Carlo benchmark scenario and write its metric table.
    Simulate(SimulateArgs),
}

/// Column selection shared by the two data-fitting subcommands.
#[derive(Args, Serialize)]
struct ColumnArgs {
    /// Treatment column name
    #[arg(long, default_value = "a")]
    treatment_col: String,

    /// Outcome column name
    #[arg(long, default_value = "y")]
    outcome_col: String,

    /// Comma-separated covariate columns [default: every other column]
    #[arg(long)]
    covariate_cols: Option<String>,

    /// Prepend a constant-one covariate column (it becomes x1)
    #[arg(long)]
    add_intercept: bool,
}

#[derive(Args, Serialize)]
#[command(after_help = GRAMMAR)]
struct FitCategoricalArgs {
    /// Input CSV file
    #[arg(long)]
    input: String,

    /// Highest treatment level; levels are 0..=K
    #[arg(long)]
    k: usize,

    /// Working propensity family
    #[arg(long, value_enum, default_value_t = CatFamilyArg::Mnl)]
    family: CatFamilyArg,

    /// Balance basis B(x): "linear" or a mini-grammar list
    #[arg(long, default_value = "linear")]
    basis: String,

    /// Covariate map inside the mnl family: "linear" or a mini-grammar list
    #[arg(long, default_value = "linear")]
    features: String,

    /// Reference level for the reported contrasts
    #[arg(long = "ref", default_value_t = 0)]
    reference: usize,

    #[command(flatten)]
    #[serde(flatten)]
    columns: ColumnArgs,

    /// Output path prefix; writes <out>.fit.json and <out>.contrasts.csv
    #[arg(long)]
    out: String,

    /// Worker threads, 0 = all cores; never affects the numbers
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Serialize)]
#[command(after_help = GRAMMAR)]
struct FitContinuousArgs {
    /// Input CSV file
    #[arg(long)]
    input: String,

    /// Working conditional dose-density family
    #[arg(long, value_enum, default_value_t = ContFamilyArg::Beta)]
    family: ContFamilyArg,

    /// Balance basis B(a,x) in the mini-grammar
    #[arg(long, default_value = "x,a,a2,a3")]
    basis: String,

    /// Covariate map of the family's mean index: "linear" or a list
    #[arg(long, default_value = "linear")]
    features: String,

    /// Lower endpoint of the dose support
    #[arg(long, default_value_t = 0.0)]
    lo: f64,

    /// Upper endpoint of the dose support
    #[arg(long, default_value_t = 1.0)]
    hi: f64,

    /// Outcome bandwidth: "loocv", "oscv" or a fixed positive number
    #[arg(long, value_parser = parse_h, default_value = "loocv")]
    h: HArg,

    /// Fixed balancing bandwidth l; overrides --l-const
    #[arg(long)]
    l: Option<f64>,

    /// Rule-of-thumb constant c in l = c*n^(-1/3)
    #[arg(long, default_value_t = 3.0)]
    l_const: f64,

    /// Number of evaluation grid points
    #[arg(long, default_value_t = 101)]
    grid: usize,

    /// Dose-range fraction trimmed from each end of the grid
    #[arg(long, default_value_t = 0.05)]
    trim: f64,

    /// Outcome-smoothing kernel
    #[arg(long, value_enum, default_value_t = KernelArg::Epanechnikov)]
    kernel: KernelArg,

    /// Curve estimator
    #[arg(long, value_enum, default_value_t = EstimatorArg::Lc)]
    estimator: EstimatorArg,

    /// Pointwise variance form
    #[arg(long, value_enum, default_value_t = VarianceArg::Ratio)]
    variance: VarianceArg,

    /// Evaluate grid points within h of the observed dose range edge
    #[arg(long)]
    allow_boundary: bool,

    #[command(flatten)]
    #[serde(flatten)]
    columns: ColumnArgs,

    /// Output path prefix; writes <out>.curve.csv
    #[arg(long)]
    out: String,

    /// Worker threads, 0 = all cores; never affects the numbers
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Benchmark design
    #[arg(long, value_enum)]
    design: DesignArg,

    /// Sample size per replicate
    #[arg(long, default_value_t = 2000)]
    n: usize,

    /// Number of Monte Carlo replicates
    #[arg(long, default_value_t = 500)]
    reps: usize,

    /// Propensity working model regime
    #[arg(long, value_enum, default_value_t = SpecArg::Correct)]
    pi: SpecArg,

    /// Balance-basis working model regime
    #[arg(long, value_enum, default_value_t = SpecArg::Correct)]
    m: SpecArg,

    /// Master seed; replicate r derives its stream from seed XOR r
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Outcome-smoothing kernel (continuous designs)
    #[arg(long, value_enum, default_value_t = KernelArg::Epanechnikov)]
    kernel: KernelArg,

    /// Curve estimator the metrics cover (continuous designs)
    #[arg(long, value_enum, default_value_t = EstimatorArg::Lc)]
    estimator: EstimatorArg,

    /// Outcome bandwidth plan: "loocv", "oscv" or a fixed positive number
    #[arg(long, value_parser = parse_h, default_value = "loocv")]
    h: HArg,

    /// Output path prefix; writes <out>.metrics.csv and <out>.metrics.json
    #[arg(long)]
    out: String,

    /// Worker threads, 0 = all cores; never affects the numbers
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum CatFamilyArg {
    /// Multinomial logit over the treatment levels
    Mnl,
    /// Linear-in-basis probabilities sharing the balance basis (exact balance)
    Samebasis,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ContFamilyArg {
    /// Beta conditional density on (lo, hi)
    Beta,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum KernelArg {
    Epanechnikov,
    Triweight,
    Uniform,
}

impl From<KernelArg> for KernelSpec {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Epanechnikov => KernelSpec::Epanechnikov,
            KernelArg::Triweight => KernelSpec::Triweight,
            KernelArg::Uniform => KernelSpec::Uniform,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EstimatorArg {
    /// Weighted local-constant (ratio) estimator
    Lc,
    /// Weighted local-linear estimator with local-constant fallback
    Ll,
    /// Plain inverse-probability kernel average
    Raw,
}

impl From<EstimatorArg> for CurveKind {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Lc => CurveKind::LocalConstant,
            EstimatorArg::Ll => CurveKind::LocalLinear,
            EstimatorArg::Raw => CurveKind::Raw,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum VarianceArg {
    /// Self-normalized pointwise variance
    Ratio,
    /// Unnormalized plug-in pointwise variance
    PlugZero,
}

impl From<VarianceArg> for VarianceForm {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Ratio => VarianceForm::Ratio,
            VarianceArg::PlugZero => VarianceForm::PlugZero,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DesignArg {
    /// Four-arm categorical design with a linear outcome
    Cat41,
    /// Continuous dose with a binary outcome
    ContNonlinear42,
    /// Continuous dose with a Gaussian linear outcome
    ContLinear42,
}

impl From<DesignArg> for Design {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Cat41 => Design::Cat41,
            DesignArg::ContNonlinear42 => Design::ContNonlinear42,
            DesignArg::ContLinear42 => Design::ContLinear42,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SpecArg {
    Correct,
    Misspec,
}

/// Bandwidth argument: a selection rule or a fixed value.
#[derive(Clone, Copy, Debug, PartialEq)]
enum HArg {
    LooCv,
    Oscv,
    Fixed(f64),
}

impl std::fmt::Display for HArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HArg::LooCv => write!(f, "loocv"),
            HArg::Oscv => write!(f, "oscv"),
            HArg::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for HArg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

fn parse_h(s: &str) -> std::result::Result<HArg, String> {
    match s {
        "loocv" => Ok(HArg::LooCv),
        "oscv" => Ok(HArg::Oscv),
        other => match other.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(HArg::Fixed(v)),
            _ => Err(format!(
                "expected \"loocv\", \"oscv\" or a positive number, got `{other}`"
            )),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!(
                "{}",
                serde_json::json!({ "error": "usage", "message": e.to_string() })
            );
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::FitCategorical(a) => par::with_workers(a.workers, || fit_categorical(&a)),
        Command::FitContinuous(a) => par::with_workers(a.workers, || fit_continuous(&a)),
        Command::Simulate(a) => par::with_workers(a.workers, || simulate(&a)),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.code(), "message": e.to_string() })
            );
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Data and configuration problems are 2; an estimator that ran but could
/// not finish its job is 3.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::NonConvergence { .. }
        | Error::EmptyWindow { .. }
        | Error::Singular(_)
        | Error::Degenerate(_) => 3,
        _ => 2,
    }
}

/// Canonical configuration JSON for the output fingerprint: the parsed
/// flags with the subcommand name folded in and `workers` dropped, keys
/// sorted. Two invocations share a hash exactly when every
/// number-affecting flag agrees.
fn config_json<T: Serialize>(subcommand: &str, args: &T) -> String {
    let mut v = serde_json::to_value(args).expect("flags serialize to a JSON map");
    let map = v.as_object_mut().expect("flag struct is a JSON map");
    map.remove("workers");
    map.insert("subcommand".into(), subcommand.into());
    v.to_string()
}

/// Resolve the column schema, defaulting the covariates to every header
/// column that is neither the treatment nor the outcome.
fn resolve_schema(input: &str, cols: &ColumnArgs) -> Result<ColumnSchema> {
    let covariates = match &cols.covariate_cols {
        Some(spec) => spec
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>(),
        None => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .trim(csv::Trim::All)
                .from_path(input)
                .map_err(|e| csv_error(input, e))?;
            let headers = rdr.headers().map_err(|e| csv_error(input, e))?;
            headers
                .iter()
                .filter(|h| *h != cols.treatment_col && *h != cols.outcome_col)
                .map(String::from)
                .collect()
        }
    };
    if covariates.is_empty() {
        return Err(Error::Config(
            "no covariate columns: the input needs at least one column besides treatment and outcome".into(),
        ));
    }
    Ok(ColumnSchema {
        treatment: cols.treatment_col.clone(),
        outcome: cols.outcome_col.clone(),
        covariates,
        add_intercept: cols.add_intercept,
        dose_transform: None,
    })
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_string(),
            source,
        },
        other => Error::Config(format!("csv header in {path}: {other:?}")),
    }
}

fn parse_basis(src: &str, d: usize, allow_dose: bool) -> Result<BasisSpec> {
    if src.trim() == "linear" {
        Ok(BasisSpec::identity(d))
    } else {
        BasisSpec::parse_list(src, d, allow_dose)
    }
}

fn parse_features(src: &str, d: usize) -> Result<FeatureMap> {
    if src.trim() == "linear" {
        Ok(FeatureMap::Identity)
    } else {
        Ok(FeatureMap::Mapped(BasisSpec::parse_list(src, d, false)?))
    }
}

fn fit_categorical(args: &FitCategoricalArgs) -> Result<u8> {
    if args.k == 0 {
        return Err(Error::Config(
            "--k must be at least 1 (levels run 0..=K)".into(),
        ));
    }
    let schema = resolve_schema(&args.input, &args.columns)?;
    let space = TreatmentSpace::Categorical { k_max: args.k };
    let ds = load_csv(&args.input, &schema, &space)?;
    let basis = parse_basis(&args.basis, ds.d(), false)?;
    let family = match args.family {
        CatFamilyArg::Mnl => PropensityFamily::MultinomialLogit {
            k_max: args.k,
            features: parse_features(&args.features, ds.d())?,
        },
        CatFamilyArg::Samebasis => PropensityFamily::SameBasisLinear {
            k_max: args.k,
            basis: basis.clone(),
        },
    };
    // A stopped optimisation still defines the estimator at its best point;
    // report it flagged instead of refusing, and exit 3.
    let (fit, code) = match fit_balance(&ds, &family, &basis, None) {
        Ok(fit) => (fit, 0),
        Err(Error::NonConvergence {
            iterations, best, ..
        }) => (fit_at(&ds, &family, &basis, best, false, iterations)?, 3),
        Err(e) => return Err(e),
    };
    let cons = contrasts(&fit, args.reference)?;
    report::write_categorical_fit(&fit, &cons, &config_json("fit-categorical", args), &args.out)?;
    Ok(code)
}

fn fit_continuous(args: &FitContinuousArgs) -> Result<u8> {
    if !(args.hi > args.lo) {
        return Err(Error::Config(format!(
            "dose support is empty: lo {} must be below hi {}",
            args.lo, args.hi
        )));
    }
    let schema = resolve_schema(&args.input, &args.columns)?;
    let space = TreatmentSpace::Continuous {
        lo: args.lo,
        hi: args.hi,
    };
    let ds = load_csv(&args.input, &schema, &space)?;
    let basis = parse_basis(&args.basis, ds.d(), true)?;
    let family = PropensityFamily::BetaDensity {
        lo: args.lo,
        hi: args.hi,
        features: parse_features(&args.features, ds.d())?,
    };
    let l = match args.l {
        Some(l) => l,
        None => rule_of_thumb_l(ds.n(), args.l_const),
    };
    let h = match args.h {
        HArg::Fixed(v) => HSelect::Fixed(v),
        HArg::LooCv => HSelect::LooCv {
            grid: default_h_grid(&ds)?,
        },
        HArg::Oscv => HSelect::Oscv {
            grid: default_h_grid(&ds)?,
        },
    };
    let plan = BandwidthPlan {
        kernel: args.kernel.into(),
        l,
        h,
        allow_boundary: args.allow_boundary,
    };
    let grid = grid_over_support(&ds, args.grid, args.trim)?;
    let curve = dose_response_curve(
        &ds,
        &family,
        &basis,
        &plan,
        &grid,
        args.estimator.into(),
        args.variance.into(),
    )?;
    report::write_curve(&curve, &config_json("fit-continuous", args), &args.out)?;
    Ok(if curve.diagnostics.fit_converged { 0 } else { 3 })
}

fn simulate(args: &SimulateArgs) -> Result<u8> {
    let sc = Scenario {
        design: args.design.into(),
        n: args.n,
        replicates: args.reps,
        pi_correct: args.pi == SpecArg::Correct,
        m_correct: args.m == SpecArg::Correct,
        seed: args.seed,
        kernel: args.kernel.into(),
        h_plan: match args.h {
            HArg::Fixed(v) => HPlan::Fixed(v),
            HArg::LooCv => HPlan::LooCv,
            HArg::Oscv => HPlan::Oscv,
        },
        estimator: args.estimator.into(),
    };
    let table = run_replicates(&sc)?;
    report::write_metrics(&table, &config_json("simulate", args), &args.out)?;
    Ok(0)
}
