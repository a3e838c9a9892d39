//! Closed-form marginal moments, correlation functions, probit joint
//! probabilities and the logit–probit bridge.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{from_rows, FitResult};
use crate::family::FamilyKind;
use crate::model::{design_row, psd_cholesky, unpack, ModelSpec, Overdispersion, Params, ThetaParams};
use crate::special::{
    bvn_cdf, ln_gamma, mvn_cdf, std_normal_cdf, stirling2, CorrelationMatrix, MVN_MAX_DIM, STIRLING_MAX,
};

/// Scale `c = 16√3/(15π)` for which `Φ(c·y)` approximates the logistic CDF.
pub const LOGIT_PROBIT_C: f64 = 0.588_084_155_116_578_2;

/// Largest number of occasions accepted by [`probit_joint_prob`].
pub const PROBIT_MAX_OCCASIONS: usize = 15;

/// Tolerance handed to the multivariate normal CDF.
const MVN_TOL: f64 = 1e-7;

/// Marginal moments over the occasions of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// `raw[j][k-1] = E(Y_j^k)` when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub raw: Vec<Vec<f64>>,
    /// True when the moments come from an approximation.
    pub approximate: bool,
}

impl MomentSet {
    fn from_parts(mean: Vec<f64>, cov: DMatrix<f64>, approximate: bool) -> Self {
        let n = cov.nrows();
        let cov = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (cov[(i, j)] + cov[(j, i)])).collect())
            .collect();
        Self { mean, cov, raw: Vec::new(), approximate }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self, j: usize) -> f64 {
        self.cov[j][j]
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        from_rows(&self.cov)
    }

    pub fn correlation(&self, j: usize, k: usize) -> Result<f64> {
        let (vj, vk) = (self.variance(j), self.variance(k));
        if !(vj > 0.0 && vk > 0.0) {
            return Err(Error::domain(format!("zero variance at occasion {}", if vj > 0.0 { k } else { j })));
        }
        Ok(self.cov[j][k] / (vj * vk).sqrt())
    }
}

fn check_dims(xi: &[f64], d: &DMatrix<f64>, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != xi.len() {
        return Err(Error::Dimension { expected: xi.len(), got: x.ncols() });
    }
    if d.nrows() != d.ncols() || z.ncols() != d.nrows() {
        return Err(Error::Dimension { expected: d.nrows(), got: z.ncols() });
    }
    if z.nrows() != x.nrows() {
        return Err(Error::Dimension { expected: x.nrows(), got: z.nrows() });
    }
    psd_cholesky(d).map(|_| ())
}

/// Moments of the overdispersion effect entering the combined moments:
/// `mean = E(θ)`, `var = Var(θ)`, and whether one θ is shared by all
/// occasions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaMoments {
    pub mean: f64,
    pub var: f64,
    pub shared: bool,
}

impl ThetaMoments {
    /// Mean-one effect with the given variance, independent across occasions.
    pub fn mean_one(var: f64) -> Self {
        Self { mean: 1.0, var, shared: false }
    }

    fn cross(&self, same: bool) -> f64 {
        if same || self.shared {
            self.mean * self.mean + self.var
        } else {
            self.mean * self.mean
        }
    }
}

/// Poisson moments with a mean-one independent gamma effect of variance
/// `var_theta` and normal effects with covariance `D`.
pub fn poisson_combined_moments(
    xi: &[f64],
    d: &DMatrix<f64>,
    var_theta: f64,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<MomentSet> {
    poisson_moments(xi, d, ThetaMoments::mean_one(var_theta), x, z)
}

/// Poisson moments for a general overdispersion effect.
pub fn poisson_moments(
    xi: &[f64],
    d: &DMatrix<f64>,
    theta: ThetaMoments,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<MomentSet> {
    check_dims(xi, d, x, z)?;
    if !(theta.var >= 0.0 && theta.mean > 0.0) {
        return Err(Error::domain("θ needs a positive mean and nonnegative variance"));
    }
    let n = x.nrows();
    let lin = x * DVector::from_column_slice(xi);
    let zdz = z * d * z.transpose();
    // E(κ_j κ_k) = exp(x_j'ξ + x_k'ξ + ½(z_j+z_k)'D(z_j+z_k))
    let e_kk = |j: usize, k: usize| {
        (lin[j] + lin[k] + 0.5 * (zdz[(j, j)] + zdz[(k, k)] + 2.0 * zdz[(j, k)])).exp()
    };
    let e_k: Vec<f64> = (0..n).map(|j| (lin[j] + 0.5 * zdz[(j, j)]).exp()).collect();
    let mean: Vec<f64> = e_k.iter().map(|k| theta.mean * k).collect();
    let cov = DMatrix::from_fn(n, n, |j, k| {
        let c = theta.cross(j == k) * e_kk(j, k) - mean[j] * mean[k];
        if j == k {
            mean[j] + c
        } else {
            c
        }
    });
    Ok(MomentSet::from_parts(mean, cov, false))
}

/// `E(Y^k)` for the Poisson–gamma–normal model with gamma shape `alpha`
/// and scale `beta`, via Stirling numbers of the second kind.
pub fn poisson_marginal_moment(
    k: u32,
    alpha: f64,
    beta: f64,
    x: &[f64],
    xi: &[f64],
    z: &[f64],
    d: &DMatrix<f64>,
) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::domain("gamma shape and scale must be positive"));
    }
    let ln_theta = |l: u32| l as f64 * beta.ln() + ln_gamma(alpha + l as f64) - ln_gamma(alpha);
    raw_poisson_moment(k, &ln_theta, x, xi, z, d)
}

fn raw_poisson_moment(
    k: u32,
    ln_theta: &dyn Fn(u32) -> f64,
    x: &[f64],
    xi: &[f64],
    z: &[f64],
    d: &DMatrix<f64>,
) -> Result<f64> {
    if k == 0 || k > STIRLING_MAX {
        return Err(Error::domain(format!("moment order must be in 1..={STIRLING_MAX}, got {k}")));
    }
    if x.len() != xi.len() {
        return Err(Error::Dimension { expected: xi.len(), got: x.len() });
    }
    if z.len() != d.nrows() {
        return Err(Error::Dimension { expected: d.nrows(), got: z.len() });
    }
    let lin: f64 = x.iter().zip(xi).map(|(a, b)| a * b).sum();
    let zv = DVector::from_column_slice(z);
    let s = (zv.transpose() * d * &zv)[(0, 0)];
    let mut total = 0.0;
    for l in 1..=k {
        let lf = l as f64;
        let ln_term = ln_theta(l) + lf * lin + 0.5 * lf * lf * s;
        if ln_term > 700.0 {
            return Err(Error::Overflow(format!("term ℓ={l} of E(Y^{k}) exceeds the double range")));
        }
        total += stirling2(k, l)? as f64 * ln_term.exp();
    }
    if !total.is_finite() {
        return Err(Error::Overflow(format!("E(Y^{k}) overflows")));
    }
    Ok(total)
}

/// Bernoulli–beta moments with success probabilities `θκ_j`, θ ~ Beta(α, β).
/// `rho_shared` is the correlation between the θ draws of different
/// occasions (1 for one shared θ, 0 or `None` for independent draws).
pub fn bernoulli_beta_moments(kappa: &[f64], alpha: f64, beta: f64, rho_shared: Option<f64>) -> Result<MomentSet> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::domain("beta shapes must be positive"));
    }
    if let Some(&k) = kappa.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
        return Err(Error::domain(format!("κ = {k} outside (0, 1]")));
    }
    let rho = rho_shared.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::domain(format!("θ correlation {rho} outside [0, 1]")));
    }
    let s = alpha + beta;
    let pi = alpha / s;
    let var_theta = alpha * beta / (s * s * (s + 1.0));
    let mean: Vec<f64> = kappa.iter().map(|k| pi * k).collect();
    let n = kappa.len();
    let cov = DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            mean[j] * (1.0 - mean[j])
        } else {
            rho * var_theta * kappa[j] * kappa[k]
        }
    });
    Ok(MomentSet::from_parts(mean, cov, false))
}

/// Mean and variance of `Σ Y_j` over `n` exchangeable Bernoulli outcomes
/// with success probability `pi` and pairwise correlation `rho`.
pub fn betabinomial_aggregate(n: u32, pi: f64, rho: f64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::domain("n must be positive"));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::domain(format!("probability {pi} outside [0, 1]")));
    }
    let nf = f64::from(n);
    if n > 1 && !(rho >= -1.0 / (nf - 1.0) && rho <= 1.0) {
        return Err(Error::domain(format!("correlation {rho} outside [-1/(n-1), 1]")));
    }
    let var = nf * pi * (1.0 - pi) * (1.0 + (nf - 1.0) * rho);
    if var < 0.0 {
        return Err(Error::Numeric(format!("negative variance {var}")));
    }
    Ok((nf * pi, var))
}

/// Standardized upper limits and correlation of the latent normal vector of
/// a probit model: `Y*_j = x_j'ξ + z_j'b + ε_j`, scaled to unit variance.
fn probit_latent(xi: &[f64], d: &DMatrix<f64>, x: &DMatrix<f64>, z: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let lin = x * DVector::from_column_slice(xi);
    // L⁻¹ = I + Z D Z'
    let cov = DMatrix::identity(n, n) + z * d * z.transpose();
    let sd: Vec<f64> = (0..n).map(|j| cov[(j, j)].sqrt()).collect();
    let upper = (0..n).map(|j| lin[j] / sd[j]).collect();
    let corr = DMatrix::from_fn(n, n, |j, k| if j == k { 1.0 } else { cov[(j, k)] / (sd[j] * sd[k]) });
    (upper, corr)
}

/// Probability of a binary response pattern under the probit model with
/// normal effects and independent beta effects of mean `pi0`.
pub fn probit_joint_prob(
    pattern: &[bool],
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    xi: &[f64],
    d: &DMatrix<f64>,
    pi0: f64,
) -> Result<f64> {
    check_dims(xi, d, x, z)?;
    let n = pattern.len();
    if n != x.nrows() {
        return Err(Error::Dimension { expected: x.nrows(), got: n });
    }
    if n > PROBIT_MAX_OCCASIONS {
        return Err(Error::unsupported(format!(
            "probit pattern probabilities support at most {PROBIT_MAX_OCCASIONS} occasions, got {n}"
        )));
    }
    if !(pi0 > 0.0 && pi0 <= 1.0) {
        return Err(Error::domain(format!("π0 = {pi0} outside (0, 1]")));
    }
    let (upper, corr) = probit_latent(xi, d, x, z);
    let ones: Vec<usize> = (0..n).filter(|&j| pattern[j]).collect();
    let zeros: Vec<usize> = (0..n).filter(|&j| !pattern[j]).collect();
    let mut total = 0.0;
    for mask in 0u32..(1u32 << zeros.len()) {
        let mut set = ones.clone();
        set.extend(zeros.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &j)| j));
        set.sort_unstable();
        let extra = mask.count_ones() as i32;
        let sign = if extra % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * pi0.powi(set.len() as i32) * all_ones_prob(&set, &upper, &corr)?;
    }
    Ok(total)
}

/// `P(Y*_j > 0 for j in set)` given standardized limits and correlation.
fn all_ones_prob(set: &[usize], upper: &[f64], corr: &DMatrix<f64>) -> Result<f64> {
    match set.len() {
        0 => Ok(1.0),
        1 => Ok(std_normal_cdf(upper[set[0]])),
        2 => Ok(bvn_cdf(upper[set[0]], upper[set[1]], corr[(set[0], set[1])])),
        m if m > MVN_MAX_DIM => Err(Error::unsupported(format!(
            "joint probability over {m} occasions exceeds the {MVN_MAX_DIM}-dimensional normal CDF"
        ))),
        m => {
            let sub = DMatrix::from_fn(m, m, |a, b| corr[(set[a], set[b])]);
            let lim: Vec<f64> = set.iter().map(|&j| upper[j]).collect();
            let c = CorrelationMatrix::new(sub).map_err(|e| Error::Numeric(format!("degenerate L matrix: {e}")))?;
            Ok(mvn_cdf(&lim, &c, MVN_TOL, 0x5eed)?.0)
        }
    }
}

/// Probit moments with `E(θ_jθ_k)` supplied by `theta`.
fn probit_moments(
    xi: &[f64],
    d: &DMatrix<f64>,
    theta: ThetaMoments,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    approximate: bool,
) -> Result<MomentSet> {
    check_dims(xi, d, x, z)?;
    let n = x.nrows();
    let (upper, corr) = probit_latent(xi, d, x, z);
    let mean: Vec<f64> = upper.iter().map(|u| theta.mean * std_normal_cdf(*u)).collect();
    let cov = DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            mean[j] * (1.0 - mean[j])
        } else {
            theta.cross(false) * bvn_cdf(upper[j], upper[k], corr[(j, k)]) - mean[j] * mean[k]
        }
    });
    Ok(MomentSet::from_parts(mean, cov, approximate))
}

/// Logit-model moments approximated through the probit closed forms with
/// `Φ(c·η) ≈ logistic(η)`.
pub fn logit_moments_via_probit(
    xi: &[f64],
    d: &DMatrix<f64>,
    pi0: f64,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Result<MomentSet> {
    if !(pi0 > 0.0 && pi0 <= 1.0) {
        return Err(Error::domain(format!("π0 = {pi0} outside (0, 1]")));
    }
    let c = LOGIT_PROBIT_C;
    let xi_c: Vec<f64> = xi.iter().map(|v| c * v).collect();
    let theta = ThetaMoments { mean: pi0, var: 0.0, shared: false };
    probit_moments(&xi_c, &(d * (c * c)), theta, x, z, true)
}

fn theta_moments(spec: &ModelSpec, params: &Params) -> Result<ThetaMoments> {
    let shared = spec.overdispersion == Overdispersion::SharedConjugate;
    match params.theta {
        ThetaParams::None => Ok(ThetaMoments { mean: 1.0, var: 0.0, shared: false }),
        ThetaParams::Beta { pi0, precision: None } if !shared => Ok(ThetaMoments { mean: pi0, var: 0.0, shared }),
        t => {
            let (mean, var) =
                t.moments().ok_or_else(|| Error::domain("θ moments need the beta precision"))?;
            Ok(ThetaMoments { mean, var, shared })
        }
    }
}

/// Closed-form marginal moments of a model at the occasions with designs
/// `x` (n × p) and `z` (n × q). Logit models with normal effects use the
/// probit bridge and are flagged approximate.
pub fn model_moments(spec: &ModelSpec, params: &Params, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<MomentSet> {
    let d = params.d();
    let theta = theta_moments(spec, params)?;
    match spec.family {
        FamilyKind::Poisson => poisson_moments(&params.xi, &d, theta, x, z),
        FamilyKind::BernoulliProbit => probit_moments(&params.xi, &d, theta, x, z, false),
        FamilyKind::BernoulliLogit if spec.q() == 0 => {
            check_dims(&params.xi, &d, x, z)?;
            let kappa: Vec<f64> =
                (x * DVector::from_column_slice(&params.xi)).iter().map(|e| FamilyKind::BernoulliLogit.inverse_link(*e)).collect();
            let n = kappa.len();
            let mean: Vec<f64> = kappa.iter().map(|k| theta.mean * k).collect();
            let cov = DMatrix::from_fn(n, n, |j, k| {
                if j == k {
                    mean[j] * (1.0 - mean[j])
                } else {
                    (theta.cross(false) - theta.mean * theta.mean) * kappa[j] * kappa[k]
                }
            });
            Ok(MomentSet::from_parts(mean, cov, false))
        }
        FamilyKind::BernoulliLogit => {
            let c = LOGIT_PROBIT_C;
            let xi_c: Vec<f64> = params.xi.iter().map(|v| c * v).collect();
            probit_moments(&xi_c, &(d * (c * c)), theta, x, z, true)
        }
        FamilyKind::Normal => {
            check_dims(&params.xi, &d, x, z)?;
            let n = x.nrows();
            let mean = (x * DVector::from_column_slice(&params.xi)).iter().copied().collect();
            let cov = z * &d * z.transpose() + DMatrix::identity(n, n) * params.sigma.powi(2);
            Ok(MomentSet::from_parts(mean, cov, false))
        }
        FamilyKind::Weibull => Err(Error::unsupported(
            "closed-form Weibull covariances are not available; use weibull_marginal_mean or simulation",
        )),
    }
}

/// Raw moments `E(Y^k)`, `k = 1..=kmax`, per occasion.
pub fn raw_moments(
    spec: &ModelSpec,
    params: &Params,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    kmax: u32,
) -> Result<Vec<Vec<f64>>> {
    let d = params.d();
    let n = x.nrows();
    match spec.family {
        FamilyKind::Poisson => {
            if theta_moments(spec, params)?.shared && n > 0 {
                // marginal per-occasion moments do not depend on sharing
            }
            let ln_theta: Box<dyn Fn(u32) -> f64> = match params.theta {
                ThetaParams::Gamma { alpha, beta } => {
                    Box::new(move |l: u32| l as f64 * beta.ln() + ln_gamma(alpha + l as f64) - ln_gamma(alpha))
                }
                _ => Box::new(|_| 0.0),
            };
            (0..n)
                .map(|j| {
                    let xr: Vec<f64> = x.row(j).iter().copied().collect();
                    let zr: Vec<f64> = z.row(j).iter().copied().collect();
                    (1..=kmax).map(|k| raw_poisson_moment(k, &*ln_theta, &xr, &params.xi, &zr, &d)).collect()
                })
                .collect()
        }
        FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit => {
            let m = model_moments(spec, params, x, z)?;
            Ok(m.mean.iter().map(|&mu| vec![mu; kmax as usize]).collect())
        }
        FamilyKind::Normal => {
            let m = model_moments(spec, params, x, z)?;
            Ok((0..n)
                .map(|j| {
                    let (mu, v) = (m.mean[j], m.variance(j));
                    let mut out = vec![1.0, mu];
                    for k in 2..=kmax as usize {
                        out.push(mu * out[k - 1] + (k - 1) as f64 * v * out[k - 2]);
                    }
                    out.split_off(1)
                })
                .collect())
        }
        FamilyKind::Weibull => Err(Error::unsupported("raw Weibull moments are not available in closed form")),
    }
}

/// Exact marginal mean of the Weibull combined model, where `Y^ρ` given
/// `(θ, b)` is exponential with rate `θ·exp(x'ξ + z'b)`.
pub fn weibull_marginal_mean(spec: &ModelSpec, params: &Params, x: &[f64], z: &[f64]) -> Result<f64> {
    if spec.family != FamilyKind::Weibull {
        return Err(Error::domain("not a Weibull model"));
    }
    let r = 1.0 / params.shape;
    let d = params.d();
    let zv = DVector::from_column_slice(z);
    let s = (zv.transpose() * &d * &zv)[(0, 0)];
    let lin: f64 = x.iter().zip(&params.xi).map(|(a, b)| a * b).sum();
    let ln_theta = match params.theta {
        ThetaParams::Gamma { alpha, beta } => {
            if alpha <= r {
                return Err(Error::Nonexistence(format!("E(Y) needs α > 1/ρ (α = {alpha}, ρ = {})", params.shape)));
            }
            -r * beta.ln() + ln_gamma(alpha - r) - ln_gamma(alpha)
        }
        _ => 0.0,
    };
    Ok((ln_theta + ln_gamma(1.0 + r) - r * lin + 0.5 * r * r * s).exp())
}

/// Second-order expansion of the inverse link around `b = 0`, combined
/// with the θ moments.
pub fn approx_moments_delta(spec: &ModelSpec, params: &Params, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<MomentSet> {
    let d = params.d();
    check_dims(&params.xi, &d, x, z)?;
    // conditional variance a·μ + b·μ² + c
    let (a, b, c) = match spec.family {
        FamilyKind::Poisson => (1.0, 0.0, 0.0),
        FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit => (1.0, -1.0, 0.0),
        FamilyKind::Normal => (0.0, 0.0, params.sigma.powi(2)),
        FamilyKind::Weibull => {
            return Err(Error::unsupported("the delta approximation is not defined for Weibull means"));
        }
    };
    let theta = theta_moments(spec, params)?;
    let n = x.nrows();
    let eta = x * DVector::from_column_slice(&params.xi);
    let zdz = z * &d * z.transpose();
    let g: Vec<(f64, f64, f64)> = eta
        .iter()
        .map(|&e| {
            let (g1, g2) = spec.family.inverse_link_derivatives(e);
            (spec.family.inverse_link(e), g1, g2)
        })
        .collect();
    let e_kappa: Vec<f64> = (0..n).map(|j| g[j].0 + 0.5 * g[j].2 * zdz[(j, j)]).collect();
    let cov_kappa = DMatrix::from_fn(n, n, |j, k| {
        g[j].1 * g[k].1 * zdz[(j, k)] + 0.5 * g[j].2 * g[k].2 * zdz[(j, k)].powi(2)
    });
    let mean: Vec<f64> = e_kappa.iter().map(|k| theta.mean * k).collect();
    let cov = DMatrix::from_fn(n, n, |j, k| {
        let e_kk = cov_kappa[(j, k)] + e_kappa[j] * e_kappa[k];
        if j == k {
            a * mean[j] + (b + 1.0) * theta.cross(true) * e_kk - mean[j] * mean[j] + c
        } else {
            theta.cross(false) * e_kk - mean[j] * mean[k]
        }
    });
    let exact = matches!(spec.family, FamilyKind::Normal);
    Ok(MomentSet::from_parts(mean, cov, !exact))
}

/// Covariate values at one time point: `time_column` set to the time and
/// every other referenced column taken from `fixed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeProfile {
    pub time_column: String,
    #[serde(default)]
    pub fixed: HashMap<String, f64>,
}

impl TimeProfile {
    pub fn new(time_column: &str) -> Self {
        Self { time_column: time_column.to_string(), fixed: HashMap::new() }
    }

    pub fn with(mut self, column: &str, value: f64) -> Self {
        self.fixed.insert(column.to_string(), value);
        self
    }

    fn values_at(&self, t: f64) -> HashMap<String, f64> {
        let mut v = self.fixed.clone();
        v.insert(self.time_column.clone(), t);
        v
    }
}

/// Fixed- and random-effect design matrices for a list of covariate rows.
pub fn profile_designs(spec: &ModelSpec, rows: &[HashMap<String, f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let mut x = DMatrix::zeros(n, spec.p());
    let mut z = DMatrix::zeros(n, spec.q());
    for (i, r) in rows.iter().enumerate() {
        let xr = design_row(&spec.fixed_effects, r)?;
        let zr = design_row(&spec.random_effects, r)?;
        x.row_mut(i).copy_from_slice(&xr);
        z.row_mut(i).copy_from_slice(&zr);
    }
    Ok((x, z))
}

/// `Corr(Y(t), Y(s))` for each requested time pair.
pub fn marginal_correlation(
    spec: &ModelSpec,
    params: &Params,
    profile: &TimeProfile,
    pairs: &[(f64, f64)],
) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(t, s)| {
            let (x, z) = profile_designs(spec, &[profile.values_at(t), profile.values_at(s)])?;
            model_moments(spec, params, &x, &z)?.correlation(0, 1)
        })
        .collect()
}

/// Largest and smallest correlation over all pairs `t < s` of a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationExtremes {
    pub max: f64,
    pub max_pair: (f64, f64),
    pub min: f64,
    pub min_pair: (f64, f64),
    /// Full matrix over the grid (unit diagonal).
    pub matrix: Vec<Vec<f64>>,
    pub approximate: bool,
}

pub fn correlation_extremes(
    spec: &ModelSpec,
    params: &Params,
    profile: &TimeProfile,
    grid: &[f64],
) -> Result<CorrelationExtremes> {
    if grid.len() < 2 {
        return Err(Error::domain("the time grid needs at least two points"));
    }
    let rows: Vec<_> = grid.iter().map(|&t| profile.values_at(t)).collect();
    let (x, z) = profile_designs(spec, &rows)?;
    let m = model_moments(spec, params, &x, &z)?;
    let n = grid.len();
    let mut matrix = vec![vec![1.0; n]; n];
    let (mut max, mut min) = ((f64::NEG_INFINITY, (0, 0)), (f64::INFINITY, (0, 0)));
    for j in 0..n {
        for k in j + 1..n {
            let r = m.correlation(j, k)?;
            matrix[j][k] = r;
            matrix[k][j] = r;
            if r > max.0 {
                max = (r, (j, k));
            }
            if r < min.0 {
                min = (r, (j, k));
            }
        }
    }
    Ok(CorrelationExtremes {
        max: max.0,
        max_pair: (grid[max.1 .0], grid[max.1 .1]),
        min: min.0,
        min_pair: (grid[min.1 .0], grid[min.1 .1]),
        matrix,
        approximate: m.approximate,
    })
}

/// Difference of marginal means between two covariate profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffect {
    pub mean0: f64,
    pub mean1: f64,
    pub difference: f64,
    pub se: f64,
    pub approximate: bool,
}

fn profile_mean(spec: &ModelSpec, params: &Params, profile: &HashMap<String, f64>) -> Result<(f64, bool)> {
    let (x, z) = profile_designs(spec, std::slice::from_ref(profile))?;
    if spec.family == FamilyKind::Weibull {
        let xr: Vec<f64> = x.row(0).iter().copied().collect();
        let zr: Vec<f64> = z.row(0).iter().copied().collect();
        return Ok((weibull_marginal_mean(spec, params, &xr, &zr)?, false));
    }
    let m = model_moments(spec, params, &x, &z)?;
    Ok((m.mean[0], m.approximate))
}

/// `E(Y | profile1) − E(Y | profile0)` at the fitted parameters, with a
/// delta-method standard error from the packed covariance of the fit.
pub fn marginal_fixed_effect(
    fit: &FitResult,
    profile0: &HashMap<String, f64>,
    profile1: &HashMap<String, f64>,
) -> Result<MarginalEffect> {
    let spec = &fit.spec;
    let diff = |v: &[f64]| -> Result<(f64, f64, bool)> {
        let p = unpack(spec, v)?;
        let (m0, a0) = profile_mean(spec, &p, profile0)?;
        let (m1, a1) = profile_mean(spec, &p, profile1)?;
        Ok((m0, m1, a0 || a1))
    };
    let x = &fit.packed_estimates;
    let (mean0, mean1, approximate) = diff(x)?;
    let mut grad = DVector::zeros(x.len());
    let mut w = x.clone();
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        w[i] = x[i] + h;
        let (u0, u1, _) = diff(&w)?;
        w[i] = x[i] - h;
        let (l0, l1, _) = diff(&w)?;
        w[i] = x[i];
        grad[i] = ((u1 - u0) - (l1 - l0)) / (2.0 * h);
    }
    let v = from_rows(&fit.vcov_packed);
    let var = (grad.transpose() * v * &grad)[(0, 0)];
    Ok(MarginalEffect { mean0, mean1, difference: mean1 - mean0, se: var.max(0.0).sqrt(), approximate })
}
