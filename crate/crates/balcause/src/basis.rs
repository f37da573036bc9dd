//! Balance bases and covariate maps built from parsed expressions.
//!
//! A [`BasisSpec`] is the vector-valued function `B(a, x)` whose moments the
//! balancing estimator equalizes between treatment groups; a [`FeatureMap`]
//! re-expresses raw covariates before they enter a working propensity model
//! (identity for a correctly specified model, arbitrary transforms for
//! sensitivity analyses). Both are lists of expressions in the mini-language
//! of [`crate::expr`].

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::expr::{self, Expr};

/// An ordered list of basis terms `B_1(a,x), ..., B_q(a,x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    terms: Vec<Expr>,
    labels: Vec<String>,
}

impl BasisSpec {
    /// The identity basis `(x1, ..., xd)`.
    pub fn identity(d: usize) -> Self {
        let terms = (0..d).map(Expr::Cov).collect();
        let labels = (1..=d).map(|j| format!("x{j}")).collect();
        BasisSpec { terms, labels }
    }

    /// Parse a comma-separated term list such as `"x,a,a2,a3"`.
    ///
    /// A term containing the bare identifier `x` is expanded into one copy
    /// per covariate column (`a*x` with `d = 2` becomes `a*x1, a*x2`), which
    /// keeps basis strings independent of the data dimension. `d` is the
    /// covariate count the expressions must fit; `allow_dose` controls
    /// whether `a` may appear (it may not in categorical problems).
    pub fn parse_list(src: &str, d: usize, allow_dose: bool) -> Result<Self> {
        let mut items = Vec::new();
        for raw in split_top_level(src) {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(Error::ExprParse(format!("empty term in basis `{src}`")));
            }
            match expand_bare_x(raw, d) {
                Some(expanded) => items.extend(expanded),
                None => items.push(raw.to_string()),
            }
        }
        Self::from_strings(&items, d, allow_dose)
    }

    /// Build from already-expanded term strings.
    pub fn from_strings<S: AsRef<str>>(items: &[S], d: usize, allow_dose: bool) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::ExprParse("basis needs at least one term".into()));
        }
        let mut terms = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for item in items {
            let term = expr::parse(item.as_ref())?;
            term.check(d, allow_dose)?;
            terms.push(term);
            labels.push(item.as_ref().trim().to_string());
        }
        Ok(BasisSpec { terms, labels })
    }

    /// Dimension `q` of the basis.
    pub fn q(&self) -> usize {
        self.terms.len()
    }

    /// Human-readable term labels, in order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// True if any term involves the dose variable.
    pub fn uses_dose(&self) -> bool {
        self.terms.iter().any(Expr::uses_dose)
    }

    /// Term expressions, in evaluation order.
    pub(crate) fn terms(&self) -> &[Expr] {
        &self.terms
    }

    /// Evaluate every term at `(a, x)` into `out` (length `q`).
    #[inline]
    pub fn eval_into(&self, x: &[f64], a: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.terms.len());
        for (slot, term) in out.iter_mut().zip(&self.terms) {
            *slot = term.eval(x, a);
        }
    }

    /// Evaluate into a fresh vector.
    pub fn eval(&self, x: &[f64], a: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.q()];
        self.eval_into(x, a, &mut out);
        out
    }
}

impl serde::Serialize for BasisSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.labels.serialize(serializer)
    }
}

/// How a working model sees the covariates.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum FeatureMap {
    /// Use the data set's covariate columns as-is.
    Identity,
    /// Replace them with the given transforms (no dose dependence allowed).
    Mapped(BasisSpec),
}

impl FeatureMap {
    /// Feature dimension given `d` raw covariates.
    pub fn dim(&self, d: usize) -> usize {
        match self {
            FeatureMap::Identity => d,
            FeatureMap::Mapped(b) => b.q(),
        }
    }

    /// Materialize the feature rows for a whole data set. For the identity
    /// map this borrows the existing storage.
    pub fn resolve<'a>(&self, ds: &'a Dataset) -> Result<Features<'a>> {
        match self {
            FeatureMap::Identity => Ok(Features {
                ds: Some(ds),
                owned: Vec::new(),
                d: ds.d(),
                n: ds.n(),
            }),
            FeatureMap::Mapped(b) => {
                if b.uses_dose() {
                    return Err(Error::Config(
                        "covariate maps may not reference the dose variable".into(),
                    ));
                }
                let q = b.q();
                let mut owned = vec![0.0; ds.n() * q];
                for i in 0..ds.n() {
                    b.eval_into(ds.x(i), 0.0, &mut owned[i * q..(i + 1) * q]);
                }
                for (idx, v) in owned.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Domain(format!(
                            "covariate map produced a non-finite value at row {}, feature {}",
                            idx / q,
                            idx % q + 1
                        )));
                    }
                }
                Ok(Features {
                    ds: None,
                    owned,
                    d: q,
                    n: ds.n(),
                })
            }
        }
    }
}

/// Resolved feature rows (borrowed for the identity map, materialized
/// otherwise).
pub struct Features<'a> {
    ds: Option<&'a Dataset>,
    owned: Vec<f64>,
    d: usize,
    n: usize,
}

impl<'a> Features<'a> {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        match self.ds {
            Some(ds) => ds.x(i),
            None => &self.owned[i * self.d..(i + 1) * self.d],
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Split on commas that are not nested inside parentheses.
fn split_top_level(src: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in src.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(&src[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&src[start..]);
    out
}

/// If `term` contains the bare identifier `x`, return the `d` column
/// substitutions; otherwise `None`.
fn expand_bare_x(term: &str, d: usize) -> Option<Vec<String>> {
    let bytes = term.as_bytes();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            if &term[start..i] == "x" {
                spans.push((start, i));
            }
        } else {
            i += 1;
        }
    }
    if spans.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(d);
    for j in 1..=d {
        let mut s = String::with_capacity(term.len() + 2 * spans.len());
        let mut prev = 0;
        for &(a, b) in &spans {
            s.push_str(&term[prev..a]);
            s.push_str(&format!("x{j}"));
            prev = b;
        }
        s.push_str(&term[prev..]);
        out.push(s);
    }
    Some(out)
}
