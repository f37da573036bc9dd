//! Data containers: observations, treatment spaces and CSV ingestion.

use crate::error::{Error, Result, Violation};
use serde::{Deserialize, Serialize};

/// What kind of treatment the analysis is about.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TreatmentSpace {
    /// Levels `0, 1, ..., k_max` (so `k_max + 1` arms in total).
    Categorical { k_max: usize },
    /// A dose taking values in the open interval `(lo, hi)`.
    Continuous { lo: f64, hi: f64 },
}

impl TreatmentSpace {
    /// Number of treatment arms for the categorical case.
    pub fn arms(&self) -> Option<usize> {
        match self {
            TreatmentSpace::Categorical { k_max } => Some(k_max + 1),
            TreatmentSpace::Continuous { .. } => None,
        }
    }
}

/// Optional affine recoding of the raw dose column: `a = (raw − offset) / scale`.
///
/// Useful when a bounded working density is declared on a normalized
/// support, e.g. mapping a raw measurement in `(15, 55)` onto `(0, 1)`
/// with `offset = 15`, `scale = 40`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseTransform {
    pub offset: f64,
    pub scale: f64,
}

impl DoseTransform {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }
}

/// Column roles for [`load_csv`]. Covariate order here fixes the meaning of
/// `x1, x2, ...` in basis expressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    /// Prepend a constant-one column (it becomes `x1`).
    pub add_intercept: bool,
    pub dose_transform: Option<DoseTransform>,
}

/// An immutable rectangular data set: `n` units with a treatment value, an
/// outcome and `d` covariates stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    treatment: Vec<f64>,
    outcome: Vec<f64>,
    covariates: Vec<f64>,
}

impl Dataset {
    /// Assemble from columns. `covariates` is row-major with `d` entries
    /// per unit. Only shape coherence is checked here; value-level checks
    /// (finiteness, level ranges, support) live in [`validate`].
    pub fn new(
        treatment: Vec<f64>,
        outcome: Vec<f64>,
        covariates: Vec<f64>,
        d: usize,
    ) -> Result<Self> {
        let n = treatment.len();
        if outcome.len() != n || covariates.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "treatment has {n} rows, outcome {}, covariates {}x{d} (need {})",
                outcome.len(),
                covariates.len(),
                n * d
            )));
        }
        if d == 0 {
            return Err(Error::DimensionMismatch(
                "need at least one covariate column".into(),
            ));
        }
        Ok(Dataset {
            n,
            d,
            treatment,
            outcome,
            covariates,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of covariate columns.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Covariate row for unit `i`.
    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn y(&self, i: usize) -> f64 {
        self.outcome[i]
    }

    /// Raw treatment value (dose, or level stored as a float).
    #[inline]
    pub fn dose(&self, i: usize) -> f64 {
        self.treatment[i]
    }

    /// Treatment level as an integer; meaningful only after categorical
    /// validation has passed.
    #[inline]
    pub fn level(&self, i: usize) -> usize {
        self.treatment[i].round() as usize
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treatments(&self) -> &[f64] {
        &self.treatment
    }

    /// Build a copy with the covariate matrix replaced (same `n`).
    pub fn with_covariates(&self, covariates: Vec<f64>, d: usize) -> Result<Self> {
        Dataset::new(self.treatment.clone(), self.outcome.clone(), covariates, d)
    }
}

/// Check a data set against a treatment space. Returns *every* violation —
/// an empty vector means the data are usable.
pub fn validate(ds: &Dataset, space: &TreatmentSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..ds.n() {
        if !ds.y(i).is_finite() {
            out.push(Violation::NonFinite {
                row: i,
                field: "outcome".into(),
            });
        }
        for (j, v) in ds.x(i).iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFinite {
                    row: i,
                    field: format!("x{}", j + 1),
                });
            }
        }
        let t = ds.dose(i);
        if !t.is_finite() {
            out.push(Violation::NonFinite {
                row: i,
                field: "treatment".into(),
            });
            continue;
        }
        match space {
            TreatmentSpace::Categorical { k_max } => {
                let rounded = t.round();
                if (t - rounded).abs() > 1e-9 || rounded < 0.0 || rounded > *k_max as f64 {
                    out.push(Violation::LevelOutOfRange {
                        row: i,
                        value: t,
                        k_max: *k_max,
                    });
                }
            }
            TreatmentSpace::Continuous { lo, hi } => {
                if t <= *lo || t >= *hi {
                    out.push(Violation::DoseOutsideSupport { row: i, value: t });
                }
            }
        }
    }
    if let TreatmentSpace::Categorical { k_max } = space {
        let mut seen = vec![false; k_max + 1];
        for i in 0..ds.n() {
            let t = ds.dose(i);
            if t.is_finite() {
                let r = t.round();
                if (t - r).abs() <= 1e-9 && r >= 0.0 && r <= *k_max as f64 {
                    seen[r as usize] = true;
                }
            }
        }
        for (level, present) in seen.iter().enumerate() {
            if !present {
                out.push(Violation::EmptyLevel { level });
            }
        }
    }
    out
}

/// Validate and turn any violations into an [`Error::Invalid`].
pub fn require_valid(ds: &Dataset, space: &TreatmentSpace) -> Result<()> {
    let v = validate(ds, space);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(v))
    }
}

/// Load a headered CSV file according to `schema` and validate it against
/// `space`. The dose transform, if any, is applied during the load, and the
/// intercept column (when requested) is prepended as `x1`.
pub fn load_csv(path: &str, schema: &ColumnSchema, space: &TreatmentSpace) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => Error::Config(format!("cannot open {path}: {e}")),
        })?;

    let headers = rdr
        .headers()
        .map_err(|e| Error::Config(format!("cannot read header of {path}: {e}")))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let t_col = col_index(&schema.treatment)?;
    let y_col = col_index(&schema.outcome)?;
    let x_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let d = x_cols.len() + usize::from(schema.add_intercept);
    if d == 0 {
        return Err(Error::Config(
            "schema declares no covariate columns and no intercept".into(),
        ));
    }

    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut covariates = Vec::new();
    for (row_idx, record) in rdr.records().enumerate() {
        let record =
            record.map_err(|e| Error::Config(format!("cannot read row {row_idx}: {e}")))?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::NonNumericCell {
                row: row_idx,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        let mut t = cell(t_col, &schema.treatment)?;
        if let Some(tr) = &schema.dose_transform {
            t = tr.apply(t);
        }
        treatment.push(t);
        outcome.push(cell(y_col, &schema.outcome)?);
        if schema.add_intercept {
            covariates.push(1.0);
        }
        for (c, name) in x_cols.iter().zip(&schema.covariates) {
            covariates.push(cell(*c, name)?);
        }
    }

    if treatment.is_empty() {
        return Err(Error::EmptyFile);
    }
    let ds = Dataset::new(treatment, outcome, covariates, d)?;
    require_valid(&ds, space)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn schema(covs: &[&str], intercept: bool) -> ColumnSchema {
        ColumnSchema {
            treatment: "trt".into(),
            outcome: "y".into(),
            covariates: covs.iter().map(|s| s.to_string()).collect(),
            add_intercept: intercept,
            dose_transform: None,
        }
    }

    #[test]
    fn loads_basic_file() {
        let f = write_csv("trt,y,u,v\n0,1.5,2,3\n1,2.5,4,5\n");
        let ds = load_csv(
            f.path().to_str().unwrap(),
            &schema(&["u", "v"], false),
            &TreatmentSpace::Categorical { k_max: 1 },
        )
        .unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.x(1), &[4.0, 5.0]);
        assert_eq!(ds.level(0), 0);
        assert_eq!(ds.y(1), 2.5);
    }

    #[test]
    fn intercept_becomes_first_column() {
        let f = write_csv("trt,y,u\n0,1,7\n1,2,8\n");
        let ds = load_csv(
            f.path().to_str().unwrap(),
            &schema(&["u"], true),
            &TreatmentSpace::Categorical { k_max: 1 },
        )
        .unwrap();
        assert_eq!(ds.x(0), &[1.0, 7.0]);
        assert_eq!(ds.x(1), &[1.0, 8.0]);
    }

    #[test]
    fn missing_column_is_reported() {
        let f = write_csv("trt,y,u\n0,1,7\n");
        let err = load_csv(
            f.path().to_str().unwrap(),
            &schema(&["nope"], false),
            &TreatmentSpace::Categorical { k_max: 0 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "nope"));
    }

    #[test]
    fn non_numeric_cell_pinpoints_row_and_column() {
        let f = write_csv("trt,y,u\n0,1,7\n1,oops,8\n");
        let err = load_csv(
            f.path().to_str().unwrap(),
            &schema(&["u"], false),
            &TreatmentSpace::Categorical { k_max: 1 },
        )
        .unwrap_err();
        match err {
            Error::NonNumericCell { row, column, value } => {
                assert_eq!(row, 1);
                assert_eq!(column, "y");
                assert_eq!(value, "oops");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_csv("trt,y,u\n");
        let err = load_csv(
            f.path().to_str().unwrap(),
            &schema(&["u"], false),
            &TreatmentSpace::Categorical { k_max: 0 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyFile));
    }

    #[test]
    fn dose_transform_is_applied() {
        let f = write_csv("trt,y,u\n25,1,2\n35,2,3\n");
        let mut s = schema(&["u"], false);
        s.dose_transform = Some(DoseTransform {
            offset: 15.0,
            scale: 40.0,
        });
        let ds = load_csv(
            f.path().to_str().unwrap(),
            &s,
            &TreatmentSpace::Continuous { lo: 0.0, hi: 1.0 },
        )
        .unwrap();
        assert!((ds.dose(0) - 0.25).abs() < 1e-15);
        assert!((ds.dose(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation_collects_every_violation() {
        // row 0: NaN outcome; row 1: level 7 out of range; level 2 never
        // observed => three violations in one pass.
        let ds = Dataset::new(
            vec![0.0, 7.0, 1.0],
            vec![f64::NAN, 1.0, 2.0],
            vec![1.0, 1.0, 1.0],
            1,
        )
        .unwrap();
        let violations = validate(&ds, &TreatmentSpace::Categorical { k_max: 2 });
        assert_eq!(violations.len(), 3);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::NonFinite { row: 0, .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::LevelOutOfRange { row: 1, .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::EmptyLevel { level: 2 })));
    }

    #[test]
    fn continuous_support_is_open() {
        let ds = Dataset::new(vec![0.0, 0.5, 1.0], vec![0.0; 3], vec![1.0; 3], 1).unwrap();
        let violations = validate(&ds, &TreatmentSpace::Continuous { lo: 0.0, hi: 1.0 });
        assert_eq!(violations.len(), 2); // both endpoints rejected
    }

    #[test]
    fn non_integer_levels_are_rejected() {
        let ds = Dataset::new(vec![0.5, 1.0, 0.0], vec![0.0; 3], vec![1.0; 3], 1).unwrap();
        let violations = validate(&ds, &TreatmentSpace::Categorical { k_max: 1 });
        assert_eq!(violations.len(), 1);
        assert!(matches!(
            violations[0],
            Violation::LevelOutOfRange { row: 0, .. }
        ));
    }
}
