//! Maximum-likelihood fitting, standard errors, Wald and boundary tests, and
//! nested-model comparisons.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::FamilyKind;
use crate::likelihood::{glm_start, Likelihood, QuadratureRule};
use crate::model::{
    natural_parameters, pack, unpack, validate, Constraint, DataFingerprint, Dataset, ModelSpec, Overdispersion,
    Params, ThetaParams,
};
use crate::optim::{minimize, numeric_gradient, numeric_hessian, BfgsOptions, GRAD_STEP, HESS_STEP};
use crate::special::{chi2_1_sf, chi2_sf};

/// Diagonal entries of `D` below this mark the fit as sitting on the boundary.
const BOUNDARY_D: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Gradient tolerance on the packed scale.
    pub tol: f64,
    pub starts: usize,
    /// Half-width of the uniform jitter applied to extra starts.
    pub jitter: f64,
    pub seed: u64,
    /// Packed starting values; derived from a GLM fit when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-6, starts: 3, jitter: 0.5, seed: 0, init: None }
    }
}

/// Serde helpers mapping NaN to `null`.
mod nan_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    fn opt(v: f64) -> Option<f64> {
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    pub mod vec {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| opt(*x)).collect::<Vec<_>>().serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let v: Vec<Option<f64>> = Vec::deserialize(d)?;
            Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        }
    }

    pub mod mat {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
            v.iter()
                .map(|r| r.iter().map(|x| opt(*x)).collect::<Vec<_>>())
                .collect::<Vec<_>>()
                .serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
            let v: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
            Ok(v.into_iter().map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()).collect())
        }
    }

    pub mod scalar {
        use super::*;
        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            opt(*v).serialize(s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    #[serde(with = "nan_null::scalar")]
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    /// Natural-scale parameter names (including derived quantities).
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    #[serde(with = "nan_null::vec")]
    pub se: Vec<f64>,
    /// Delta-method covariance of the natural-scale estimates.
    #[serde(with = "nan_null::mat")]
    pub vcov: Vec<Vec<f64>>,
    pub packed_names: Vec<String>,
    pub packed_estimates: Vec<f64>,
    #[serde(with = "nan_null::mat")]
    pub vcov_packed: Vec<Vec<f64>>,
    pub loglik: f64,
    pub minus2ll: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// False when the Hessian was not positive definite or a variance
    /// component sits on its boundary.
    pub se_reliable: bool,
    pub n_params: usize,
    pub fingerprint: DataFingerprint,
    pub starts: Vec<StartTrace>,
}

impl FitResult {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.estimates[i])
    }

    pub fn se_of(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.se[i])
    }

    pub fn params(&self) -> Result<Params> {
        unpack(&self.spec, &self.packed_estimates)
    }
}

/// Covariance estimates at a given packed point.
#[derive(Debug, Clone)]
pub struct StandardErrors {
    pub vcov_packed: DMatrix<f64>,
    pub vcov: DMatrix<f64>,
    pub names: Vec<String>,
    pub se: Vec<f64>,
    pub reliable: bool,
}

/// Inverse of the negative Hessian of `loglik` at `x`. Falls back to the
/// pseudo-inverse (and reports `false`) when it is not positive definite.
pub fn vcov_from_loglik<F>(loglik: &F, x: &[f64]) -> Result<(DMatrix<f64>, bool)>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let n = x.len();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), true));
    }
    let neg = |v: &[f64]| loglik(v).map(|l| -l);
    let h = numeric_hessian(&neg, x, HESS_STEP)
        .ok_or_else(|| Error::Numeric("log-likelihood not finite around the estimate".into()))?;
    let h = (&h + h.transpose()) * 0.5;
    let eig = h.clone().symmetric_eigen();
    let tol = 1e-8 * eig.eigenvalues.amax().max(1e-300);
    if eig.eigenvalues.min() > tol {
        if let Some(c) = h.cholesky() {
            return Ok((c.inverse(), true));
        }
    }
    let mut inv = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tol {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / lam;
        }
    }
    Ok((inv, false))
}

fn natural_values(spec: &ModelSpec, v: &[f64]) -> Option<Vec<f64>> {
    let p = unpack(spec, v).ok()?;
    Some(natural_parameters(spec, &p).into_iter().map(|(_, x)| x).collect())
}

/// Delta-method transfer of a packed covariance to the natural scale.
fn natural_vcov(spec: &ModelSpec, x: &[f64], vcov_packed: &DMatrix<f64>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let params = unpack(spec, x)?;
    let names: Vec<String> = natural_parameters(spec, &params).into_iter().map(|(n, _)| n).collect();
    let m = names.len();
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut w = x.to_vec();
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        w[j] = x[j] + h;
        let up = natural_values(spec, &w).ok_or_else(|| Error::Numeric("natural map failed".into()))?;
        w[j] = x[j] - h;
        let dn = natural_values(spec, &w).ok_or_else(|| Error::Numeric("natural map failed".into()))?;
        w[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    Ok((names, &jac * vcov_packed * jac.transpose()))
}

fn boundary_reached(spec: &ModelSpec, params: &Params) -> bool {
    let d = params.d();
    (0..spec.q()).any(|i| d[(i, i)] < BOUNDARY_D)
}

fn standard_errors_with(lik: &Likelihood, packed: &[f64]) -> Result<StandardErrors> {
    let spec = lik.spec();
    let f = |v: &[f64]| unpack(spec, v).ok().and_then(|p| lik.loglik(&p).ok());
    let (vcov_packed, pd) = vcov_from_loglik(&f, packed)?;
    let (names, vcov) = natural_vcov(spec, packed, &vcov_packed)?;
    let se: Vec<f64> = (0..names.len()).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    let params = unpack(spec, packed)?;
    let reliable = pd && !boundary_reached(spec, &params) && se.iter().all(|s| s.is_finite());
    Ok(StandardErrors { vcov_packed, vcov, names, se, reliable })
}

/// Covariance matrices and standard errors at `packed_estimates`.
pub fn standard_errors(
    spec: &ModelSpec,
    data: &Dataset,
    quad: QuadratureRule,
    packed_estimates: &[f64],
) -> Result<StandardErrors> {
    let lik = Likelihood::new(spec, data, quad)?;
    standard_errors_with(&lik, packed_estimates)
}

/// Default packed starting point: GLM fixed effects, `D = 0.1 I`,
/// `ln α = 0`, `ln ρ = 0`.
pub fn default_start(spec: &ModelSpec, lik: &Likelihood) -> Result<Vec<f64>> {
    let (xi, sigma) = glm_start(spec, lik.designs());
    let q = spec.q();
    let theta = match spec.effect_kind() {
        None => ThetaParams::None,
        Some(crate::family::EffectKind::Gamma) => match spec.constraint {
            Constraint::MeanOneGamma => ThetaParams::Gamma { alpha: 1.0, beta: 1.0 },
            Constraint::ExponentialGamma => ThetaParams::Gamma { alpha: 1.0, beta: 1.0 },
            Constraint::FreeWithFixedBeta(b) => ThetaParams::Gamma { alpha: 1.0, beta: b },
            Constraint::Unconstrained => ThetaParams::Gamma { alpha: 1.0, beta: 1.0 },
        },
        Some(crate::family::EffectKind::Beta) => ThetaParams::Beta {
            pi0: crate::special::logistic(2.0),
            precision: (spec.overdispersion == Overdispersion::SharedConjugate).then_some(2.0),
        },
        Some(crate::family::EffectKind::Normal) => ThetaParams::None,
    };
    let params = Params::new(xi)
        .with_d(DMatrix::identity(q, q) * 0.1)?
        .with_theta(theta)
        .with_sigma(sigma);
    pack(spec, &params)
}

/// Fit the model by maximum likelihood.
pub fn fit(spec: &ModelSpec, data: &Dataset, quad: QuadratureRule, opts: &FitOptions) -> Result<FitResult> {
    validate(spec, data).into_result()?;
    let lik = Likelihood::new(spec, data, quad)?;
    fit_with(&lik, data.fingerprint(), opts)
}

fn fit_with(lik: &Likelihood, fingerprint: DataFingerprint, opts: &FitOptions) -> Result<FitResult> {
    let spec = lik.spec();
    let n = spec.n_params();
    let init = match &opts.init {
        Some(v) if v.len() != n => return Err(Error::Dimension { expected: n, got: v.len() }),
        Some(v) => v.clone(),
        None => default_start(spec, lik)?,
    };
    let objective = |v: &[f64]| -> Option<f64> {
        let p = unpack(spec, v).ok()?;
        lik.loglik(&p).ok().filter(|l| l.is_finite()).map(|l| -l)
    };
    if objective(&init).is_none() {
        let reason = unpack(spec, &init).and_then(|p| lik.loglik(&p)).err().map(|e| e.to_string());
        return Err(Error::Initialization(reason.unwrap_or_else(|| "log-likelihood is not finite".into())));
    }
    let bfgs = BfgsOptions { max_iter: opts.max_iter, grad_tol: opts.tol, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut traces = Vec::new();
    let mut best: Option<crate::optim::BfgsResult> = None;
    for s in 0..opts.starts.max(1) {
        let x0: Vec<f64> = if s == 0 {
            init.clone()
        } else {
            init.iter().map(|v| v + rng.random_range(-opts.jitter..=opts.jitter)).collect()
        };
        let r = minimize(&objective, &x0, bfgs);
        traces.push(StartTrace { loglik: -r.f, converged: r.converged, iterations: r.iterations, message: r.message.clone() });
        if r.f.is_finite() && best.as_ref().is_none_or(|b| r.f < b.f || (!b.converged && r.converged && r.f <= b.f + 1e-8)) {
            best = Some(r);
        }
    }
    let Some(mut best) = best else {
        let trace: Vec<String> = traces.iter().map(|t| t.message.clone()).collect();
        return Err(Error::FitFailure(format!("all starts diverged: {}", trace.join("; "))));
    };

    // a Newton step with the numerical Hessian sharpens the optimum
    let ll = |v: &[f64]| objective(v).map(|f| -f);
    if n > 0 {
        if let Some(h) = numeric_hessian(&objective, &best.x, HESS_STEP) {
            if let Some(c) = ((&h + h.transpose()) * 0.5).cholesky() {
                let g = DVector::from_column_slice(&best.grad);
                let step = c.solve(&g);
                if step.amax() < 1.0 {
                    let cand: Vec<f64> = best.x.iter().zip(step.iter()).map(|(x, s)| x - s).collect();
                    if let Some(fc) = objective(&cand) {
                        if fc <= best.f {
                            if let Some(gc) = numeric_gradient(&objective, &cand, GRAD_STEP) {
                                let gn = gc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                                best.converged |= gn < opts.tol;
                                best.x = cand;
                                best.f = fc;
                                best.grad = gc;
                            }
                        }
                    }
                }
            }
        }
    }
    let se = standard_errors_with(lik, &best.x)?;
    let params = unpack(spec, &best.x)?;
    let estimates: Vec<f64> = natural_parameters(spec, &params).into_iter().map(|(_, v)| v).collect();
    let loglik = ll(&best.x).unwrap_or(-best.f);
    Ok(FitResult {
        spec: spec.clone(),
        names: se.names.clone(),
        estimates,
        se: se.se.clone(),
        vcov: to_rows(&se.vcov),
        packed_names: spec.packed_names(),
        packed_estimates: best.x.clone(),
        vcov_packed: to_rows(&se.vcov_packed),
        loglik,
        minus2ll: -2.0 * loglik,
        converged: best.converged,
        iterations: best.iterations,
        gradient_norm: best.grad_norm(),
        se_reliable: se.reliable,
        n_params: n,
        fingerprint,
        starts: traces,
    })
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

/// Two-sided Wald test from an estimate and its standard error.
pub fn wald(estimate: f64, se: f64, null_value: f64) -> WaldTest {
    let z = (estimate - null_value) / se;
    WaldTest { estimate, se, z, p: libm::erfc(z.abs() / std::f64::consts::SQRT_2) }
}

/// Wald test of `Σ c_k θ_k = null_value` over natural-scale parameters.
pub fn wald_test(fit: &FitResult, contrast: &[(&str, f64)], null_value: f64) -> Result<WaldTest> {
    let m = fit.names.len();
    let mut c = DVector::zeros(m);
    for (name, w) in contrast {
        let i = fit.index_of(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        c[i] += w;
    }
    let theta = DVector::from_column_slice(&fit.estimates);
    let v = from_rows(&fit.vcov);
    let var = (c.transpose() * &v * &c)[(0, 0)];
    Ok(wald(c.dot(&theta), var.max(0.0).sqrt(), null_value))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTest {
    pub statistic: f64,
    pub p: f64,
}

/// Likelihood-ratio test of one variance component against the
/// `½χ²₀ + ½χ²₁` mixture.
pub fn boundary_variance_test(loglik_null: f64, loglik_alt: f64) -> Result<BoundaryTest> {
    let w = 2.0 * (loglik_alt - loglik_null);
    if !w.is_finite() {
        return Err(Error::Numeric(format!("log-likelihoods must be finite ({loglik_null}, {loglik_alt})")));
    }
    if w < -2e-8 {
        return Err(Error::Nesting(format!(
            "alternative log-likelihood {loglik_alt} is below the null {loglik_null}"
        )));
    }
    let w = w.max(0.0);
    Ok(BoundaryTest { statistic: w, p: 0.5 * chi2_1_sf(w) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonKind {
    /// One-sided Wald test `Z = est/se` of the extra variance component.
    WaldVarianceBoundary,
    /// Likelihood ratio against `½χ²₀ + ½χ²₁`.
    LrBoundary,
    /// Likelihood ratio against `χ²` with the parameter-count difference.
    LrInterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub null_model: String,
    pub alt_model: String,
    pub kind: ComparisonKind,
    /// Variance component tested (Wald kind only).
    pub component: Option<String>,
    pub statistic: f64,
    pub p: f64,
}

/// Names of variance components in a fit.
fn variance_components(fit: &FitResult) -> Vec<String> {
    fit.names
        .iter()
        .filter(|n| {
            let diag = n.starts_with("d(") && !n.contains(',');
            diag || *n == "theta_var" || *n == "one_minus_pi0"
        })
        .cloned()
        .collect()
}

/// Slack allowed for an alternative fit ending marginally below its null.
const NESTING_SLACK: f64 = 1e-4;

/// Compare nested fits pairwise.
pub fn compare_models(
    fits: &[(String, FitResult)],
    nesting: &[(String, String, ComparisonKind)],
) -> Result<Vec<ComparisonRow>> {
    let lookup: HashMap<&str, &FitResult> = fits.iter().map(|(l, f)| (l.as_str(), f)).collect();
    let get = |label: &str| lookup.get(label).copied().ok_or_else(|| Error::Validation(format!("no fit labelled `{label}`")));
    let mut rows = Vec::new();
    for (null_label, alt_label, kind) in nesting {
        let null = get(null_label)?;
        let alt = get(alt_label)?;
        if null.fingerprint != alt.fingerprint {
            return Err(Error::MismatchedData(format!(
                "`{null_label}` used {:?}, `{alt_label}` used {:?}",
                null.fingerprint, alt.fingerprint
            )));
        }
        if null.n_params > alt.n_params {
            return Err(Error::Nesting(format!(
                "`{null_label}` has more parameters ({}) than `{alt_label}` ({})",
                null.n_params, alt.n_params
            )));
        }
        let diff = alt.loglik - null.loglik;
        if diff < -NESTING_SLACK {
            return Err(Error::Nesting(format!(
                "`{alt_label}` log-likelihood {} is below `{null_label}` {}",
                alt.loglik, null.loglik
            )));
        }
        let diff = diff.max(0.0);
        let (component, statistic, p) = match kind {
            ComparisonKind::LrBoundary => {
                let t = boundary_variance_test(null.loglik, null.loglik + diff)?;
                (None, t.statistic, t.p)
            }
            ComparisonKind::LrInterior => {
                let df = alt.n_params - null.n_params;
                let w = 2.0 * diff;
                (None, w, if df == 0 { 1.0 } else { chi2_sf(w, df as f64) })
            }
            ComparisonKind::WaldVarianceBoundary => {
                let in_null = variance_components(null);
                let extra: Vec<String> =
                    variance_components(alt).into_iter().filter(|c| !in_null.contains(c)).collect();
                match extra.as_slice() {
                    [] => (None, 0.0, 0.5),
                    [c] => {
                        let i = alt.index_of(c).expect("component listed from names");
                        let z = alt.estimates[i] / alt.se[i];
                        (Some(c.clone()), z, 0.5 * libm::erfc(z / std::f64::consts::SQRT_2))
                    }
                    many => {
                        return Err(Error::Nesting(format!(
                            "a Wald boundary test needs exactly one extra variance component, found {many:?}"
                        )));
                    }
                }
            }
        };
        rows.push(ComparisonRow {
            null_model: null_label.clone(),
            alt_model: alt_label.clone(),
            kind: *kind,
            component,
            statistic,
            p,
        });
    }
    Ok(rows)
}

/// Whether a family/overdispersion combination has any free parameter
/// beyond the fixed effects; used in reports.
pub fn describe(spec: &ModelSpec) -> String {
    let od = match spec.overdispersion {
        Overdispersion::None => "",
        Overdispersion::IndependentConjugate => " + independent conjugate effects",
        Overdispersion::SharedConjugate => " + shared conjugate effect",
    };
    let re = if spec.q() == 0 { String::new() } else { format!(" + normal effects [{}]", spec.random_effects.join(", ")) };
    let fam = match spec.family {
        FamilyKind::Weibull if !spec.weibull_shape_free => "exponential",
        f => f.name(),
    };
    format!("{fam}{od}{re}")
}
