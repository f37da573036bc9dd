//! Deterministic writers for fit, curve and study artifacts.
//!
//! Every output is reproducible byte for byte: floats are written in
//! Rust's shortest round-trip form, JSON follows struct field order, and
//! each file carries the configuration digest that produced it — CSV
//! files end with a `# config-hash: …` footer line, JSON files embed the
//! hash as a field. Re-running with an identical configuration and seed
//! rewrites identical bytes; changing any flag changes the hash.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::categorical::{CategoricalFit, Contrast};
use crate::continuous::DoseResponseCurve;
use crate::error::{Error, Result};
use crate::sim::MetricTable;

/// Paths written by one emit call, in write order.
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub paths: Vec<PathBuf>,
}

/// 16-hex-digit digest of the canonical configuration string.
pub fn config_hash(config_json: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn parse_config(config_json: &str) -> Result<serde_json::Value> {
    serde_json::from_str(config_json)
        .map_err(|e| Error::Config(format!("configuration is not valid JSON: {e}")))
}

/// Shortest round-trip decimal form; the absent-marker for missing cells.
fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "NA".to_string(),
    }
}

/// Write a categorical fit: `{prefix}.fit.json` with parameters, means,
/// the full row-major covariance matrix, diagnostics and configuration,
/// plus `{prefix}.contrasts.csv` with one row per treatment level.
pub fn write_categorical_fit(
    fit: &CategoricalFit,
    contrasts: &[Contrast],
    config_json: &str,
    prefix: &str,
) -> Result<OutputFiles> {
    let hash = config_hash(config_json);

    #[derive(Serialize)]
    struct FitDocument<'a> {
        fit: &'a CategoricalFit,
        contrasts: &'a [Contrast],
        config: serde_json::Value,
        config_hash: &'a str,
    }
    let doc = FitDocument {
        fit,
        contrasts,
        config: parse_config(config_json)?,
        config_hash: &hash,
    };
    let mut json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("fit serialization failed: {e}")))?;
    json.push('\n');
    let fit_path = PathBuf::from(format!("{prefix}.fit.json"));
    write_file(&fit_path, &json)?;

    let mut csv = String::from("level,estimate,sd,ci_lower,ci_upper\n");
    for c in contrasts {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.level, c.estimate, c.sd, c.ci_lower, c.ci_upper
        ));
    }
    csv.push_str(&format!("# config-hash: {hash}\n"));
    let csv_path = PathBuf::from(format!("{prefix}.contrasts.csv"));
    write_file(&csv_path, &csv)?;

    Ok(OutputFiles {
        paths: vec![fit_path, csv_path],
    })
}

/// Write a dose-response curve as `{prefix}.curve.csv`: exactly one data
/// row per grid point, then a diagnostics comment and the config-hash
/// footer.
pub fn write_curve(
    curve: &DoseResponseCurve,
    config_json: &str,
    prefix: &str,
) -> Result<OutputFiles> {
    let hash = config_hash(config_json);
    let mut csv = String::from("dose,theta,variance,band_lo,band_hi\n");
    for g in 0..curve.grid.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            curve.grid[g], curve.theta[g], curve.variance[g], curve.band_lo[g], curve.band_hi[g]
        ));
    }
    let diag = serde_json::json!({
        "h": curve.h,
        "l": curve.l,
        "estimator": curve.estimator_kind,
        "fit_converged": curve.diagnostics.fit_converged,
        "balance_objective": curve.diagnostics.balance_objective,
        "clamp_count": curve.diagnostics.clamp_count,
        "local_linear_fallbacks": curve.diagnostics.local_linear_fallbacks,
        "boundary_grid_points": curve.diagnostics.boundary_grid_points,
    });
    csv.push_str(&format!("# diagnostics: {diag}\n"));
    csv.push_str(&format!("# config-hash: {hash}\n"));
    let path = PathBuf::from(format!("{prefix}.curve.csv"));
    write_file(&path, &csv)?;
    Ok(OutputFiles { paths: vec![path] })
}

/// Write a study metric table: `{prefix}.metrics.csv` mirroring the
/// benchmark table columns, plus a `{prefix}.metrics.json` sidecar with
/// the scenario configuration and replicate accounting.
pub fn write_metrics(
    table: &MetricTable,
    config_json: &str,
    prefix: &str,
) -> Result<OutputFiles> {
    let hash = config_hash(config_json);

    let mut csv = String::new();
    if table.cont.is_empty() {
        csv.push_str("estimator,level,truth,bias,sd,mse,mean_sd_hat,coverage\n");
        for row in &table.cat {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.estimator,
                row.level,
                row.truth,
                row.bias,
                cell(row.sd),
                row.mse,
                cell(row.mean_sd_hat),
                cell(row.coverage),
            ));
        }
    } else {
        csv.push_str("estimator,abs_bias_x100,rmse_x100,grid_points_used\n");
        for row in &table.cont {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                row.estimator, row.abs_bias_x100, row.rmse_x100, row.grid_points_used
            ));
        }
    }
    csv.push_str(&format!(
        "# replicates-used: {} failures: {} nonconverged: {}\n",
        table.replicates_used, table.failures, table.nonconverged
    ));
    csv.push_str(&format!("# config-hash: {hash}\n"));
    let csv_path = PathBuf::from(format!("{prefix}.metrics.csv"));
    write_file(&csv_path, &csv)?;

    #[derive(Serialize)]
    struct MetricsDocument<'a> {
        table: &'a MetricTable,
        config: serde_json::Value,
        config_hash: &'a str,
    }
    let doc = MetricsDocument {
        table,
        config: parse_config(config_json)?,
        config_hash: &hash,
    };
    let mut json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Config(format!("metric serialization failed: {e}")))?;
    json.push('\n');
    let json_path = PathBuf::from(format!("{prefix}.metrics.json"));
    write_file(&json_path, &json)?;

    Ok(OutputFiles {
        paths: vec![csv_path, json_path],
    })
}
