//! Model specification, long-format datasets, design matrices and the
//! unconstrained parameter vector used by the optimizer.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{EffectKind, FamilyKind};
use crate::special::{logistic, logit};

/// Reserved column name producing a column of ones.
pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overdispersion {
    #[default]
    None,
    IndependentConjugate,
    SharedConjugate,
}

/// Identifiability constraint on gamma overdispersion effects.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// `αβ = 1`, so `E(θ) = 1`; `α` is free.
    #[default]
    MeanOneGamma,
    /// `α = 1` (exponential effects); `β` is free.
    ExponentialGamma,
    /// `β` fixed at the given value; `α` is free.
    FreeWithFixedBeta(f64),
    /// Both `α` and `β` free. Aliased with an intercept; flagged by [`validate`].
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: FamilyKind,
    #[serde(default)]
    pub fixed_effects: Vec<String>,
    #[serde(default)]
    pub random_effects: Vec<String>,
    #[serde(default)]
    pub overdispersion: Overdispersion,
    #[serde(default)]
    pub constraint: Constraint,
    #[serde(default)]
    pub weibull_shape_free: bool,
}

impl ModelSpec {
    pub fn new(family: FamilyKind) -> Self {
        Self {
            family,
            fixed_effects: Vec::new(),
            random_effects: Vec::new(),
            overdispersion: Overdispersion::None,
            constraint: Constraint::MeanOneGamma,
            weibull_shape_free: false,
        }
    }

    pub fn fixed<S: AsRef<str>>(mut self, cols: &[S]) -> Self {
        self.fixed_effects = cols.iter().map(|c| c.as_ref().to_string()).collect();
        self
    }

    pub fn random<S: AsRef<str>>(mut self, cols: &[S]) -> Self {
        self.random_effects = cols.iter().map(|c| c.as_ref().to_string()).collect();
        self
    }

    pub fn with_overdispersion(mut self, od: Overdispersion) -> Self {
        self.overdispersion = od;
        self
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraint = c;
        self
    }

    pub fn with_free_shape(mut self) -> Self {
        self.weibull_shape_free = true;
        self
    }

    pub fn p(&self) -> usize {
        self.fixed_effects.len()
    }

    pub fn q(&self) -> usize {
        self.random_effects.len()
    }

    /// Kind of the conjugate overdispersion effect, if any.
    pub fn effect_kind(&self) -> Option<EffectKind> {
        if self.overdispersion == Overdispersion::None {
            return None;
        }
        Some(match self.family {
            FamilyKind::Normal => EffectKind::Normal,
            FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit => EffectKind::Beta,
            FamilyKind::Poisson | FamilyKind::Weibull => EffectKind::Gamma,
        })
    }

    fn shape_free(&self) -> bool {
        self.family == FamilyKind::Weibull && self.weibull_shape_free
    }

    /// Names of the packed (optimizer-scale) coordinates.
    pub fn packed_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.fixed_effects.clone();
        for i in 0..self.q() {
            for j in 0..=i {
                if i == j {
                    names.push(format!("log_chol({},{})", self.random_effects[i], self.random_effects[i]));
                } else {
                    names.push(format!("chol({},{})", self.random_effects[i], self.random_effects[j]));
                }
            }
        }
        match self.effect_kind() {
            Some(EffectKind::Gamma) => match self.constraint {
                Constraint::MeanOneGamma | Constraint::FreeWithFixedBeta(_) => names.push("log_alpha".into()),
                Constraint::ExponentialGamma => names.push("log_beta".into()),
                Constraint::Unconstrained => {
                    names.push("log_alpha".into());
                    names.push("log_beta".into());
                }
            },
            Some(EffectKind::Beta) => {
                names.push("logit_pi0".into());
                if self.overdispersion == Overdispersion::SharedConjugate {
                    names.push("log_precision".into());
                }
            }
            _ => {}
        }
        if self.shape_free() {
            names.push("log_rho".into());
        }
        if self.family == FamilyKind::Normal {
            names.push("log_sigma".into());
        }
        names
    }

    pub fn n_params(&self) -> usize {
        self.packed_names().len()
    }
}

/// Parameters of the conjugate overdispersion effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaParams {
    None,
    /// Gamma with shape `alpha` and scale `beta`.
    Gamma { alpha: f64, beta: f64 },
    /// Beta with mean `pi0`; `precision = α + β` enters only with a shared
    /// effect (or when simulating).
    Beta { pi0: f64, precision: Option<f64> },
}

impl ThetaParams {
    /// `(E(θ), Var(θ))`, if determined.
    pub fn moments(&self) -> Option<(f64, f64)> {
        match *self {
            ThetaParams::None => Some((1.0, 0.0)),
            ThetaParams::Gamma { alpha, beta } => Some((alpha * beta, alpha * beta * beta)),
            ThetaParams::Beta { pi0, precision: Some(s) } => Some((pi0, pi0 * (1.0 - pi0) / (s + 1.0))),
            ThetaParams::Beta { precision: None, .. } => None,
        }
    }

    /// Beta shape pair `(α, β)` when the precision is known.
    pub fn beta_shapes(&self) -> Option<(f64, f64)> {
        match *self {
            ThetaParams::Beta { pi0, precision: Some(s) } => Some((pi0 * s, (1.0 - pi0) * s)),
            _ => None,
        }
    }
}

/// Model parameters on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub xi: Vec<f64>,
    /// Lower-triangular `L` with `D = L Lᵀ` (q × q).
    pub d_chol: DMatrix<f64>,
    pub theta: ThetaParams,
    /// Weibull shape `ρ` (1 for an exponential model and for other families).
    pub shape: f64,
    /// Residual standard deviation for the normal family.
    pub sigma: f64,
}

impl Params {
    pub fn new(xi: Vec<f64>) -> Self {
        Self { xi, d_chol: DMatrix::zeros(0, 0), theta: ThetaParams::None, shape: 1.0, sigma: 1.0 }
    }

    /// Set `D` from a symmetric positive semi-definite matrix.
    pub fn with_d(mut self, d: DMatrix<f64>) -> Result<Self> {
        self.d_chol = psd_cholesky(&d)?;
        Ok(self)
    }

    pub fn with_theta(mut self, theta: ThetaParams) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_shape(mut self, shape: f64) -> Self {
        self.shape = shape;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn d(&self) -> DMatrix<f64> {
        &self.d_chol * self.d_chol.transpose()
    }

    pub fn q(&self) -> usize {
        self.d_chol.nrows()
    }
}

/// Cholesky factor of a PSD matrix, tolerating zero pivots.
pub(crate) fn psd_cholesky(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::Dimension { expected: n, got: d.ncols() });
    }
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut s = d[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if s < -1e-12 * scale || !s.is_finite() {
            return Err(Error::domain("D must be symmetric positive semi-definite"));
        }
        let ljj = s.max(0.0).sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            if (d[(i, j)] - d[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::domain("D must be symmetric"));
            }
            let mut s = d[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if ljj > 0.0 {
                l[(i, j)] = s / ljj;
            } else if s.abs() > 1e-10 * scale {
                return Err(Error::domain("D must be symmetric positive semi-definite"));
            }
        }
    }
    Ok(l)
}

/// Map parameters to the unconstrained vector (layout given by
/// [`ModelSpec::packed_names`]).
pub fn pack(spec: &ModelSpec, params: &Params) -> Result<Vec<f64>> {
    if params.xi.len() != spec.p() {
        return Err(Error::Dimension { expected: spec.p(), got: params.xi.len() });
    }
    if params.q() != spec.q() || params.d_chol.ncols() != spec.q() {
        return Err(Error::Dimension { expected: spec.q(), got: params.q() });
    }
    let mut v = params.xi.clone();
    for i in 0..spec.q() {
        for j in 0..=i {
            let l = params.d_chol[(i, j)];
            v.push(if i == j { l.abs().ln() } else { l });
        }
    }
    match (spec.effect_kind(), params.theta) {
        (None, _) => {}
        (Some(EffectKind::Gamma), ThetaParams::Gamma { alpha, beta }) => match spec.constraint {
            Constraint::MeanOneGamma | Constraint::FreeWithFixedBeta(_) => v.push(alpha.ln()),
            Constraint::ExponentialGamma => v.push(beta.ln()),
            Constraint::Unconstrained => {
                v.push(alpha.ln());
                v.push(beta.ln());
            }
        },
        (Some(EffectKind::Beta), ThetaParams::Beta { pi0, precision }) => {
            v.push(logit(pi0));
            if spec.overdispersion == Overdispersion::SharedConjugate {
                let s = precision
                    .ok_or_else(|| Error::Validation("a shared beta effect needs its precision".into()))?;
                v.push(s.ln());
            }
        }
        (Some(kind), theta) => {
            return Err(Error::Validation(format!("{kind:?} effect does not accept {theta:?}")));
        }
    }
    if spec.shape_free() {
        v.push(params.shape.ln());
    }
    if spec.family == FamilyKind::Normal {
        v.push(params.sigma.ln());
    }
    Ok(v)
}

/// Inverse of [`pack`].
pub fn unpack(spec: &ModelSpec, v: &[f64]) -> Result<Params> {
    let n = spec.n_params();
    if v.len() != n {
        return Err(Error::Dimension { expected: n, got: v.len() });
    }
    let p = spec.p();
    let q = spec.q();
    let xi = v[..p].to_vec();
    let mut k = p;
    let mut l = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j { v[k].exp() } else { v[k] };
            k += 1;
        }
    }
    let theta = match spec.effect_kind() {
        None | Some(EffectKind::Normal) => ThetaParams::None,
        Some(EffectKind::Gamma) => {
            let (alpha, beta) = match spec.constraint {
                Constraint::MeanOneGamma => {
                    let a = v[k].exp();
                    k += 1;
                    (a, 1.0 / a)
                }
                Constraint::FreeWithFixedBeta(b) => {
                    let a = v[k].exp();
                    k += 1;
                    (a, b)
                }
                Constraint::ExponentialGamma => {
                    let b = v[k].exp();
                    k += 1;
                    (1.0, b)
                }
                Constraint::Unconstrained => {
                    let (a, b) = (v[k].exp(), v[k + 1].exp());
                    k += 2;
                    (a, b)
                }
            };
            ThetaParams::Gamma { alpha, beta }
        }
        Some(EffectKind::Beta) => {
            let pi0 = logistic(v[k]);
            k += 1;
            let precision = if spec.overdispersion == Overdispersion::SharedConjugate {
                k += 1;
                Some(v[k - 1].exp())
            } else {
                None
            };
            ThetaParams::Beta { pi0, precision }
        }
    };
    let shape = if spec.shape_free() {
        k += 1;
        v[k - 1].exp()
    } else {
        1.0
    };
    let sigma = if spec.family == FamilyKind::Normal {
        k += 1;
        v[k - 1].exp()
    } else {
        1.0
    };
    debug_assert_eq!(k, n);
    Ok(Params { xi, d_chol: l, theta, shape, sigma })
}

/// Name of the `(i, j)` entry of `D` (`i >= j`).
pub fn d_name(spec: &ModelSpec, i: usize, j: usize) -> String {
    if i == j {
        format!("d({})", spec.random_effects[i])
    } else {
        format!("d({},{})", spec.random_effects[i], spec.random_effects[j])
    }
}

/// Named natural-scale parameters, including derived quantities such as
/// `theta_var` (gamma) or `alpha_beta_ratio` (beta).
pub fn natural_parameters(spec: &ModelSpec, params: &Params) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> =
        spec.fixed_effects.iter().cloned().zip(params.xi.iter().copied()).collect();
    let d = params.d();
    for i in 0..spec.q() {
        for j in 0..=i {
            out.push((d_name(spec, i, j), d[(i, j)]));
        }
    }
    match params.theta {
        ThetaParams::Gamma { alpha, beta } if spec.effect_kind().is_some() => {
            out.push(("alpha".into(), alpha));
            out.push(("beta".into(), beta));
            out.push(("theta_var".into(), alpha * beta * beta));
        }
        ThetaParams::Beta { pi0, precision } if spec.effect_kind().is_some() => {
            out.push(("pi0".into(), pi0));
            out.push(("one_minus_pi0".into(), 1.0 - pi0));
            out.push(("alpha_beta_ratio".into(), pi0 / (1.0 - pi0)));
            if let (Some(s), Overdispersion::SharedConjugate) = (precision, spec.overdispersion) {
                out.push(("precision".into(), s));
            }
        }
        _ => {}
    }
    if spec.shape_free() {
        out.push(("rho".into(), params.shape));
    }
    if spec.family == FamilyKind::Normal {
        out.push(("sigma".into(), params.sigma));
    }
    out
}

/// Names that cannot be used as covariate columns.
const RESERVED: &[&str] = &[
    "alpha",
    "beta",
    "theta_var",
    "pi0",
    "one_minus_pi0",
    "alpha_beta_ratio",
    "precision",
    "rho",
    "sigma",
];

/// Build parameters from named natural-scale values (as produced by
/// [`natural_parameters`]). Unspecified variance components default to 0;
/// derived names are ignored.
pub fn params_from_natural(spec: &ModelSpec, values: &HashMap<String, f64>) -> Result<Params> {
    let known: HashSet<String> = {
        let mut k: HashSet<String> = spec.fixed_effects.iter().cloned().collect();
        for i in 0..spec.q() {
            for j in 0..=i {
                k.insert(d_name(spec, i, j));
                if i != j {
                    k.insert(format!("d({},{})", spec.random_effects[j], spec.random_effects[i]));
                }
            }
        }
        k.extend(RESERVED.iter().map(|s| s.to_string()));
        k
    };
    if let Some(bad) = values.keys().find(|k| !known.contains(*k)) {
        return Err(Error::UnknownParameter(bad.clone()));
    }
    let get = |name: &str| values.get(name).copied();
    let mut xi = Vec::with_capacity(spec.p());
    for name in &spec.fixed_effects {
        xi.push(get(name).ok_or_else(|| Error::Validation(format!("missing value for `{name}`")))?);
    }
    let q = spec.q();
    let mut d = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..=i {
            let alt = format!("d({},{})", spec.random_effects[j], spec.random_effects[i]);
            let v = get(&d_name(spec, i, j)).or_else(|| get(&alt)).unwrap_or(0.0);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    let theta = match spec.effect_kind() {
        None | Some(EffectKind::Normal) => ThetaParams::None,
        Some(EffectKind::Gamma) => {
            let (alpha, beta) = match spec.constraint {
                Constraint::MeanOneGamma => {
                    let a = get("alpha").or_else(|| get("theta_var").map(|v| 1.0 / v));
                    let a = a.ok_or_else(|| Error::Validation("missing `alpha`".into()))?;
                    (a, 1.0 / a)
                }
                Constraint::ExponentialGamma => {
                    (1.0, get("beta").ok_or_else(|| Error::Validation("missing `beta`".into()))?)
                }
                Constraint::FreeWithFixedBeta(b) => {
                    (get("alpha").ok_or_else(|| Error::Validation("missing `alpha`".into()))?, b)
                }
                Constraint::Unconstrained => (
                    get("alpha").ok_or_else(|| Error::Validation("missing `alpha`".into()))?,
                    get("beta").ok_or_else(|| Error::Validation("missing `beta`".into()))?,
                ),
            };
            if !(alpha > 0.0 && beta > 0.0) {
                return Err(Error::domain("gamma parameters must be positive"));
            }
            ThetaParams::Gamma { alpha, beta }
        }
        Some(EffectKind::Beta) => {
            let pi0 = get("pi0")
                .or_else(|| get("alpha_beta_ratio").map(|r| r / (1.0 + r)))
                .ok_or_else(|| Error::Validation("missing `pi0`".into()))?;
            if !(pi0 > 0.0 && pi0 <= 1.0) {
                return Err(Error::domain("pi0 must lie in (0, 1]"));
            }
            ThetaParams::Beta { pi0, precision: get("precision") }
        }
    };
    let shape = if spec.shape_free() { get("rho").unwrap_or(1.0) } else { 1.0 };
    let sigma = get("sigma").unwrap_or(1.0);
    Params::new(xi).with_d(d).map(|p| p.with_theta(theta).with_shape(shape).with_sigma(sigma))
}

/// One long-format measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub id: String,
    pub occasion: u32,
    pub y: f64,
    /// Covariate values in the dataset's column order.
    pub values: Vec<f64>,
}

/// Summary used to check that fits were computed on the same data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub subjects: usize,
    pub rows: usize,
    pub y_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<String>,
    rows: Vec<Row>,
}

impl Dataset {
    /// Rows are stored sorted by subject then occasion; `(id, occasion)` pairs
    /// must be unique and occasions start at 1.
    pub fn new(columns: Vec<String>, mut rows: Vec<Row>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(Error::Validation(format!("duplicate column `{c}`")));
            }
        }
        let mut keys = HashSet::new();
        for r in &rows {
            if r.values.len() != columns.len() {
                return Err(Error::Dimension { expected: columns.len(), got: r.values.len() });
            }
            if r.occasion < 1 {
                return Err(Error::Validation(format!("subject {}: occasions start at 1", r.id)));
            }
            if !keys.insert((r.id.clone(), r.occasion)) {
                return Err(Error::Validation(format!(
                    "duplicate (id, occasion) = ({}, {})",
                    r.id, r.occasion
                )));
            }
        }
        let numeric = rows.iter().all(|r| r.id.parse::<i64>().is_ok());
        rows.sort_by(|a, b| {
            let ord = if numeric {
                a.id.parse::<i64>().unwrap().cmp(&b.id.parse::<i64>().unwrap())
            } else {
                a.id.cmp(&b.id)
            };
            ord.then(a.occasion.cmp(&b.occasion))
        });
        Ok(Self { columns, rows })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Column values, if present.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r.values[k]).collect())
    }

    /// Rows grouped by subject, in subject order.
    pub fn subjects(&self) -> Vec<(&str, &[Row])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].id != self.rows[start].id {
                out.push((self.rows[start].id.as_str(), &self.rows[start..i]));
                start = i;
            }
        }
        out
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects().len()
    }

    pub fn fingerprint(&self) -> DataFingerprint {
        DataFingerprint {
            subjects: self.n_subjects(),
            rows: self.rows.len(),
            y_sum: self.rows.iter().map(|r| r.y).sum(),
        }
    }
}

/// Per-subject response and design matrices, rows ordered by occasion.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDesign {
    pub id: String,
    pub occasions: Vec<u32>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl SubjectDesign {
    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// How a named design column is computed from dataset columns.
#[derive(Debug, Clone)]
enum ColumnExpr {
    Ones,
    Product(Vec<usize>),
}

fn resolve(name: &str, columns: &[String]) -> Result<ColumnExpr> {
    if let Some(k) = columns.iter().position(|c| c == name) {
        return Ok(ColumnExpr::Product(vec![k]));
    }
    if name == INTERCEPT {
        return Ok(ColumnExpr::Ones);
    }
    let parts: Vec<&str> = name.split(':').collect();
    if parts.len() > 1 {
        let mut idx = Vec::with_capacity(parts.len());
        for p in parts {
            match columns.iter().position(|c| c == p) {
                Some(k) => idx.push(k),
                None if p == INTERCEPT => {}
                None => return Err(Error::Validation(format!("missing covariate column `{p}` (in `{name}`)"))),
            }
        }
        return Ok(ColumnExpr::Product(idx));
    }
    Err(Error::Validation(format!("missing covariate column `{name}`")))
}

fn eval(expr: &ColumnExpr, values: &[f64]) -> f64 {
    match expr {
        ColumnExpr::Ones => 1.0,
        ColumnExpr::Product(idx) => idx.iter().map(|&k| values[k]).product(),
    }
}

/// Evaluate design columns from named covariate values (a covariate profile).
pub fn design_row(names: &[String], values: &HashMap<String, f64>) -> Result<Vec<f64>> {
    let columns: Vec<String> = values.keys().cloned().collect();
    let vals: Vec<f64> = columns.iter().map(|c| values[c]).collect();
    names
        .iter()
        .map(|n| resolve(n, &columns).map(|e| eval(&e, &vals)))
        .collect()
}

/// Build `(X_i, Z_i, y_i)` for every subject.
pub fn build_designs(spec: &ModelSpec, data: &Dataset) -> Result<Vec<SubjectDesign>> {
    let fixed: Vec<ColumnExpr> =
        spec.fixed_effects.iter().map(|n| resolve(n, data.columns())).collect::<Result<_>>()?;
    let random: Vec<ColumnExpr> =
        spec.random_effects.iter().map(|n| resolve(n, data.columns())).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (id, rows) in data.subjects() {
        let n = rows.len();
        let mut x = DMatrix::zeros(n, fixed.len());
        let mut z = DMatrix::zeros(n, random.len());
        for (r, row) in rows.iter().enumerate() {
            for (c, e) in fixed.iter().enumerate() {
                x[(r, c)] = eval(e, &row.values);
            }
            for (c, e) in random.iter().enumerate() {
                z[(r, c)] = eval(e, &row.values);
            }
        }
        if let Some(bad) = x.iter().chain(z.iter()).find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("subject {id}: non-finite covariate value {bad}")));
        }
        out.push(SubjectDesign {
            id: id.to_string(),
            occasions: rows.iter().map(|r| r.occasion).collect(),
            y: DVector::from_iterator(n, rows.iter().map(|r| r.y)),
            x,
            z,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    /// Convert into an error if any issue is an error.
    pub fn into_result(self) -> Result<Self> {
        if self.has_errors() {
            let msg: Vec<&str> = self.errors().map(|i| i.message.as_str()).collect();
            Err(Error::Validation(msg.join("; ")))
        } else {
            Ok(self)
        }
    }

    fn error(&mut self, msg: impl Into<String>) {
        self.issues.push(Issue { severity: Severity::Error, message: msg.into() });
    }

    fn warn(&mut self, msg: impl Into<String>) {
        self.issues.push(Issue { severity: Severity::Warning, message: msg.into() });
    }
}

/// Check a specification against a dataset.
pub fn validate(spec: &ModelSpec, data: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut keys = HashSet::new();
    for r in data.rows() {
        if !keys.insert((r.id.as_str(), r.occasion)) {
            report.error(format!("duplicate (id, occasion) = ({}, {})", r.id, r.occasion));
        }
    }
    for c in data.columns() {
        if RESERVED.contains(&c.as_str()) || c.starts_with("d(") {
            report.error(format!("column name `{c}` is reserved for a parameter"));
        }
    }
    let mut bad_support = BTreeMap::new();
    for r in data.rows() {
        if !spec.family.in_support(r.y) {
            bad_support.entry(r.y.to_string()).or_insert(r.id.clone());
        }
    }
    for (y, id) in bad_support {
        report.error(format!("y = {y} (subject {id}) outside the {} support", spec.family.name()));
    }

    let mut used = Vec::new();
    for name in spec.fixed_effects.iter().chain(&spec.random_effects) {
        match resolve(name, data.columns()) {
            Ok(ColumnExpr::Product(idx)) => used.extend(idx),
            Ok(ColumnExpr::Ones) => {}
            Err(e) => report.error(e.to_string()),
        }
    }
    used.sort_unstable();
    used.dedup();
    for k in used {
        if let Some(r) = data.rows().iter().find(|r| !r.values[k].is_finite()) {
            report.error(format!(
                "non-finite value in column `{}` (subject {}, occasion {})",
                data.columns()[k],
                r.id,
                r.occasion
            ));
        }
    }
    let dup = |v: &[String]| {
        let mut s = HashSet::new();
        v.iter().find(|c| !s.insert(c.as_str())).cloned()
    };
    if let Some(c) = dup(&spec.fixed_effects) {
        report.error(format!("fixed effect `{c}` listed twice"));
    }
    if let Some(c) = dup(&spec.random_effects) {
        report.error(format!("random effect `{c}` listed twice"));
    }

    if spec.q() > 2 {
        report.error(format!("at most 2 normal random effects are supported, got {}", spec.q()));
    }
    if spec.family == FamilyKind::Normal && spec.overdispersion != Overdispersion::None {
        report.error("the normal family takes no conjugate overdispersion effect");
    }
    if spec.family == FamilyKind::Weibull {
        if let Some(status) = data.column("status") {
            if status.iter().any(|&s| s != 1.0) {
                report.error("status other than 1 found: censoring out of scope");
            }
        }
    }
    if spec.weibull_shape_free && spec.family != FamilyKind::Weibull {
        report.warn("weibull_shape_free is ignored for non-Weibull families");
    }

    if spec.overdispersion == Overdispersion::SharedConjugate {
        let subjects = data.subjects();
        let single = subjects.iter().filter(|(_, r)| r.len() < 2).count();
        if !subjects.is_empty() && single == subjects.len() {
            report.error("a shared overdispersion effect needs subjects with at least 2 occasions");
        } else if single > 0 {
            report.warn(format!("{single} subject(s) with a single occasion under a shared effect"));
        }
    }

    if spec.effect_kind() == Some(EffectKind::Gamma) {
        let aliased = match spec.constraint {
            Constraint::Unconstrained => Some("α and β are both free"),
            Constraint::ExponentialGamma => Some("β is free with α = 1"),
            _ => None,
        };
        if let Some(what) = aliased {
            if spans_constant(spec, data) {
                report.warn(format!(
                    "{what}: the gamma scale is aliased with the intercept and not identifiable"
                ));
            }
        }
    } else if spec.overdispersion == Overdispersion::None
        && !matches!(spec.constraint, Constraint::MeanOneGamma)
    {
        report.warn("constraint has no effect without gamma overdispersion");
    }
    report
}

/// Whether the constant vector lies in the span of the fixed-effect columns.
fn spans_constant(spec: &ModelSpec, data: &Dataset) -> bool {
    if spec.fixed_effects.iter().any(|c| c == INTERCEPT) {
        return true;
    }
    let Ok(designs) = build_designs(&ModelSpec { random_effects: vec![], ..spec.clone() }, data) else {
        return false;
    };
    let n: usize = designs.iter().map(|d| d.n()).sum();
    let p = spec.p();
    if n == 0 || p == 0 {
        return false;
    }
    let mut x = DMatrix::zeros(n, p);
    let mut r = 0;
    for d in &designs {
        for i in 0..d.n() {
            x.set_row(r, &d.x.row(i));
            r += 1;
        }
    }
    let ones = DVector::from_element(n, 1.0);
    let svd = x.clone().svd(true, true);
    match svd.solve(&ones, 1e-10) {
        Ok(beta) => (&x * beta - ones).norm() < 1e-8 * (n as f64).sqrt(),
        Err(_) => false,
    }
}
