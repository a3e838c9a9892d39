//! Exponential-family members and their conjugate random-effect pairings.
//!
//! Densities follow `f(y) = exp{φ⁻¹[yη − ψ(η)] + c(y, φ)}`. The Weibull
//! member is handled as an exponential family in `y^ρ`: the sufficient
//! statistic is `y^ρ`, the natural parameter is minus the rate, and the
//! Jacobian `ρ y^(ρ−1)` lives in the normalizer so that densities are on the
//! original time scale.
//!
//! Conjugate hyperparameters are stored in canonical form `(γ, γψ)`, which
//! stays finite at the edges of the usual `(γ, ψ)` parameterization (for
//! instance `α = 1` in the gamma–Weibull pair gives `γ = 0`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_beta, ln_factorial, ln_gamma, logistic, softplus, std_normal_cdf, LN_SQRT_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Normal,
    BernoulliLogit,
    BernoulliProbit,
    Poisson,
    Weibull,
}

impl FamilyKind {
    pub fn is_bernoulli(self) -> bool {
        matches!(self, FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit)
    }

    /// Whether `y` lies in the outcome support.
    pub fn in_support(self, y: f64) -> bool {
        match self {
            FamilyKind::Normal => y.is_finite(),
            FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y.is_finite() && y >= 0.0 && y.fract() == 0.0,
            FamilyKind::Weibull => y.is_finite() && y > 0.0,
        }
    }

    /// Inverse link `κ = g(η)` used for the normal-effects part of the
    /// combined model: identity, logistic, `Φ`, or `exp` (Poisson mean,
    /// Weibull rate).
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            FamilyKind::Normal => eta,
            FamilyKind::BernoulliLogit => logistic(eta),
            FamilyKind::BernoulliProbit => std_normal_cdf(eta),
            FamilyKind::Poisson | FamilyKind::Weibull => eta.exp(),
        }
    }

    /// First and second derivatives of the inverse link.
    pub fn inverse_link_derivatives(self, eta: f64) -> (f64, f64) {
        match self {
            FamilyKind::Normal => (1.0, 0.0),
            FamilyKind::BernoulliLogit => {
                let p = logistic(eta);
                let d1 = p * (1.0 - p);
                (d1, d1 * (1.0 - 2.0 * p))
            }
            FamilyKind::BernoulliProbit => {
                let phi = crate::special::std_normal_pdf(eta);
                (phi, -eta * phi)
            }
            FamilyKind::Poisson | FamilyKind::Weibull => {
                let e = eta.exp();
                (e, e)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Normal => "normal",
            FamilyKind::BernoulliLogit => "bernoulli_logit",
            FamilyKind::BernoulliProbit => "bernoulli_probit",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Weibull => "weibull",
        }
    }
}

/// An exponential-family member with its dispersion and (Weibull) shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyMember {
    pub kind: FamilyKind,
    /// `φ`; fixed to 1 except for the normal family where it is `σ²`.
    pub dispersion: f64,
    /// `ρ`; 1 unless the member is Weibull.
    pub shape: f64,
}

impl FamilyMember {
    pub fn normal(sigma2: f64) -> Self {
        Self { kind: FamilyKind::Normal, dispersion: sigma2, shape: 1.0 }
    }

    pub fn bernoulli_logit() -> Self {
        Self { kind: FamilyKind::BernoulliLogit, dispersion: 1.0, shape: 1.0 }
    }

    pub fn bernoulli_probit() -> Self {
        Self { kind: FamilyKind::BernoulliProbit, dispersion: 1.0, shape: 1.0 }
    }

    pub fn poisson() -> Self {
        Self { kind: FamilyKind::Poisson, dispersion: 1.0, shape: 1.0 }
    }

    pub fn weibull(shape: f64) -> Self {
        Self { kind: FamilyKind::Weibull, dispersion: 1.0, shape }
    }

    pub fn exponential() -> Self {
        Self::weibull(1.0)
    }

    /// Probit is catalogued but does not use the canonical link.
    pub fn has_natural_link(&self) -> bool {
        self.kind != FamilyKind::BernoulliProbit
    }

    /// Weibull belongs to the exponential family only after `y ↦ y^ρ`.
    pub fn is_power_transformed(&self) -> bool {
        self.kind == FamilyKind::Weibull
    }

    /// Sufficient statistic: `y`, or `y^ρ` for Weibull.
    pub fn statistic(&self, y: f64) -> f64 {
        if self.kind == FamilyKind::Weibull {
            y.powf(self.shape)
        } else {
            y
        }
    }

    /// Cumulant function `ψ(η)`.
    pub fn cumulant(&self, eta: f64) -> Result<f64> {
        match self.kind {
            FamilyKind::Normal => Ok(0.5 * eta * eta),
            FamilyKind::BernoulliLogit => Ok(softplus(eta)),
            FamilyKind::Poisson => Ok(eta.exp()),
            FamilyKind::Weibull => {
                if eta >= 0.0 {
                    return Err(Error::domain(format!("Weibull natural parameter must be < 0, got {eta}")));
                }
                Ok(-(-eta).ln())
            }
            FamilyKind::BernoulliProbit => {
                Err(Error::unsupported("the probit member has no canonical cumulant"))
            }
        }
    }

    /// Normalizer `c(y, φ)` (includes the Weibull Jacobian).
    pub fn normalizer(&self, y: f64, phi: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok(match self.kind {
            FamilyKind::Normal => -0.5 * y * y / phi - 0.5 * (std::f64::consts::TAU * phi).ln(),
            FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit => 0.0,
            FamilyKind::Poisson => -ln_factorial(y as u64),
            FamilyKind::Weibull => self.shape.ln() + (self.shape - 1.0) * y.ln(),
        })
    }

    fn check_support(&self, y: f64) -> Result<()> {
        if self.kind.in_support(y) {
            Ok(())
        } else {
            Err(Error::domain(format!("y = {y} outside the {} support", self.kind.name())))
        }
    }

    fn check_dispersion(&self, phi: f64) -> Result<()> {
        match self.kind {
            FamilyKind::Normal if phi > 0.0 && phi.is_finite() => Ok(()),
            FamilyKind::Normal => Err(Error::domain(format!("normal dispersion must be > 0, got {phi}"))),
            _ if phi == 1.0 => Ok(()),
            _ => Err(Error::domain(format!("{} dispersion is fixed to 1, got {phi}", self.kind.name()))),
        }
    }
}

/// Density or mass function at natural parameter `eta`.
///
/// For the probit member `eta` is the probit-scale predictor (`π = Φ(η)`).
/// For Weibull `eta = -rate`.
pub fn density(member: &FamilyMember, y: f64, eta: f64, phi: f64) -> Result<f64> {
    ln_density(member, y, eta, phi).map(f64::exp)
}

pub fn ln_density(member: &FamilyMember, y: f64, eta: f64, phi: f64) -> Result<f64> {
    member.check_dispersion(phi)?;
    let c = member.normalizer(y, phi)?;
    if member.kind == FamilyKind::BernoulliProbit {
        let p = std_normal_cdf(if y == 1.0 { eta } else { -eta });
        return Ok(p.ln());
    }
    let psi = member.cumulant(eta)?;
    Ok((member.statistic(y) * eta - psi) / phi + c)
}

/// `(E(Y), Var(Y))` at natural parameter `eta`.
pub fn mean_variance(member: &FamilyMember, eta: f64, phi: f64) -> Result<(f64, f64)> {
    member.check_dispersion(phi)?;
    if !eta.is_finite() {
        return Err(Error::domain("natural parameter must be finite"));
    }
    Ok(match member.kind {
        FamilyKind::Normal => (eta, phi),
        FamilyKind::BernoulliLogit => {
            let p = logistic(eta);
            (p, p * (1.0 - p))
        }
        FamilyKind::BernoulliProbit => {
            let p = std_normal_cdf(eta);
            (p, p * (1.0 - p))
        }
        FamilyKind::Poisson => {
            let l = eta.exp();
            (l, l)
        }
        FamilyKind::Weibull => {
            if eta >= 0.0 {
                return Err(Error::domain(format!("Weibull natural parameter must be < 0, got {eta}")));
            }
            let rate = -eta;
            let inv = 1.0 / member.shape;
            let g1 = ln_gamma(inv + 1.0).exp();
            let g2 = ln_gamma(2.0 * inv + 1.0).exp();
            (rate.powf(-inv) * g1, rate.powf(-2.0 * inv) * (g2 - g1 * g1))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Normal,
    Beta,
    Gamma,
}

/// Random-effect parameters in their usual parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectParams {
    /// `θ ~ N(mean, var)`.
    Normal { mean: f64, var: f64 },
    /// `θ ~ Beta(alpha, beta)`.
    Beta { alpha: f64, beta: f64 },
    /// `θ ~ Gamma(shape alpha, scale beta)`.
    Gamma { alpha: f64, beta: f64 },
}

/// Conjugate hyperparameters in canonical form `(γ, γψ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub gamma: f64,
    pub gamma_psi: f64,
}

impl Hyper {
    pub fn new(gamma: f64, psi: f64) -> Self {
        Self { gamma, gamma_psi: gamma * psi }
    }

    pub fn canonical(gamma: f64, gamma_psi: f64) -> Self {
        Self { gamma, gamma_psi }
    }

    pub fn psi(&self) -> f64 {
        self.gamma_psi / self.gamma
    }
}

/// A (data model, random effect) conjugate pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConjugatePair {
    pub data: FamilyKind,
    pub effect: EffectKind,
    /// Weibull shape `ρ`; 1 otherwise.
    pub shape: f64,
}

impl ConjugatePair {
    pub fn normal_normal() -> Self {
        Self { data: FamilyKind::Normal, effect: EffectKind::Normal, shape: 1.0 }
    }

    pub fn bernoulli_beta() -> Self {
        Self { data: FamilyKind::BernoulliLogit, effect: EffectKind::Beta, shape: 1.0 }
    }

    pub fn poisson_gamma() -> Self {
        Self { data: FamilyKind::Poisson, effect: EffectKind::Gamma, shape: 1.0 }
    }

    pub fn weibull_gamma(shape: f64) -> Self {
        Self { data: FamilyKind::Weibull, effect: EffectKind::Gamma, shape }
    }

    pub fn exponential_gamma() -> Self {
        Self::weibull_gamma(1.0)
    }

    /// Strong conjugacy: the effect family is closed under `θ ↦ κθ`.
    pub fn strong_conjugate(&self) -> bool {
        !matches!(self.effect, EffectKind::Beta)
    }

    fn member(&self) -> FamilyMember {
        match self.data {
            FamilyKind::Weibull => FamilyMember::weibull(self.shape),
            kind => FamilyMember { kind, dispersion: 1.0, shape: 1.0 },
        }
    }

    /// `h(θ)`.
    pub fn h(&self, theta: f64) -> f64 {
        match self.effect {
            EffectKind::Normal => theta,
            EffectKind::Beta => (theta / (1.0 - theta)).ln(),
            EffectKind::Gamma if self.data == FamilyKind::Poisson => theta.ln(),
            EffectKind::Gamma => -theta,
        }
    }

    /// `g(θ)`; the gamma–Weibull pair depends on `φ = 1/rate`.
    pub fn g(&self, theta: f64, phi: f64) -> f64 {
        match self.effect {
            EffectKind::Normal => 0.5 * theta * theta,
            EffectKind::Beta => -(1.0 - theta).ln(),
            EffectKind::Gamma if self.data == FamilyKind::Poisson => theta,
            EffectKind::Gamma => -theta.ln() * phi,
        }
    }

    /// Translate natural effect parameters to `(γ, γψ)` given the data
    /// dispersion `φ` (`σ²` for normal data, `1/rate` for Weibull data).
    pub fn hyper_from(&self, params: EffectParams, phi: f64) -> Result<Hyper> {
        match (self.effect, params) {
            (EffectKind::Normal, EffectParams::Normal { mean, var }) if var > 0.0 => {
                Ok(Hyper::canonical(1.0 / var, mean / var))
            }
            (EffectKind::Beta, EffectParams::Beta { alpha, beta }) if alpha > 0.0 && beta > 0.0 => {
                Ok(Hyper::canonical(alpha + beta - 2.0, alpha - 1.0))
            }
            (EffectKind::Gamma, EffectParams::Gamma { alpha, beta }) if alpha > 0.0 && beta > 0.0 => {
                if self.data == FamilyKind::Poisson {
                    Ok(Hyper::canonical(1.0 / beta, alpha - 1.0))
                } else {
                    let rate = 1.0 / phi;
                    Ok(Hyper::canonical(rate * (alpha - 1.0), 1.0 / beta))
                }
            }
            _ => Err(Error::domain(format!("inadmissible effect parameters {params:?}"))),
        }
    }

    /// Inverse of [`hyper_from`](Self::hyper_from).
    pub fn params_from(&self, hyper: Hyper, phi: f64) -> Result<EffectParams> {
        let Hyper { gamma, gamma_psi } = hyper;
        let p = match self.effect {
            EffectKind::Normal => EffectParams::Normal { mean: gamma_psi / gamma, var: 1.0 / gamma },
            EffectKind::Beta => EffectParams::Beta { alpha: gamma_psi + 1.0, beta: gamma - gamma_psi + 1.0 },
            EffectKind::Gamma if self.data == FamilyKind::Poisson => {
                EffectParams::Gamma { alpha: 1.0 + gamma_psi, beta: 1.0 / gamma }
            }
            EffectKind::Gamma => EffectParams::Gamma { alpha: 1.0 + gamma * phi, beta: 1.0 / gamma_psi },
        };
        let ok = match p {
            EffectParams::Normal { mean, var } => mean.is_finite() && var > 0.0 && var.is_finite(),
            EffectParams::Beta { alpha, beta } | EffectParams::Gamma { alpha, beta } => {
                alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()
            }
        };
        if ok {
            Ok(p)
        } else {
            Err(Error::domain(format!("inadmissible hyperparameters {hyper:?}")))
        }
    }

    /// Normalizer `c*(γ, ψ)` of the random-effect density.
    pub fn normalizer_star(&self, hyper: Hyper, phi: f64) -> Result<f64> {
        let params = self.params_from(hyper, phi)?;
        let Hyper { gamma, gamma_psi } = hyper;
        Ok(match (self.effect, params) {
            (EffectKind::Normal, _) => {
                -0.5 * gamma_psi * gamma_psi / gamma - 0.5 * (std::f64::consts::TAU / gamma).ln()
            }
            (EffectKind::Beta, EffectParams::Beta { alpha, beta }) => -ln_beta(alpha, beta),
            (EffectKind::Gamma, _) if self.data == FamilyKind::Poisson => {
                (1.0 + gamma_psi) * gamma.ln() - ln_gamma(1.0 + gamma_psi)
            }
            (EffectKind::Gamma, _) => {
                let a = (gamma + 1.0 / phi) * phi;
                a * gamma_psi.ln() - ln_gamma(a)
            }
            _ => unreachable!("params_from matches the effect kind"),
        })
    }

    /// Log-density of the random effect, `γ[ψh(θ) − g(θ)] + c*(γ, ψ)`.
    pub fn effect_ln_density(&self, theta: f64, hyper: Hyper, phi: f64) -> Result<f64> {
        let c = self.normalizer_star(hyper, phi)?;
        Ok(hyper.gamma_psi * self.h(theta) - hyper.gamma * self.g(theta, phi) + c)
    }

    /// Log-density of the data model given `θ` in conjugate form.
    pub fn data_ln_density(&self, y: f64, theta: f64, phi: f64) -> Result<f64> {
        let member = self.member();
        let c = self.data_normalizer(y, phi)?;
        Ok((member.statistic(y) * self.h(theta) - self.g(theta, phi)) / phi + c)
    }

    /// `c(y, φ)` of the conjugate data model.
    pub fn data_normalizer(&self, y: f64, phi: f64) -> Result<f64> {
        let member = self.member();
        member.check_support(y)?;
        if !(phi > 0.0) {
            return Err(Error::domain("dispersion must be positive"));
        }
        match self.data {
            FamilyKind::Weibull => Ok((1.0 / phi).ln() + member.normalizer(y, 1.0)?),
            FamilyKind::BernoulliProbit => Err(Error::unsupported("the probit member has no conjugate pair")),
            _ => member.normalizer(y, phi),
        }
    }

    /// Absorb a multiplicative predictor factor `κ` into the hyperparameters,
    /// i.e. the distribution of `κθ`.
    pub fn absorb(&self, hyper: Hyper, kappa: f64) -> Result<Hyper> {
        if !self.strong_conjugate() {
            return Err(Error::unsupported(
                "beta effects lack strong conjugacy: κθ is not beta distributed",
            ));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::domain(format!("κ must be positive, got {kappa}")));
        }
        Ok(match (self.effect, self.data) {
            (EffectKind::Normal, _) => Hyper::canonical(hyper.gamma / (kappa * kappa), hyper.gamma_psi / kappa),
            (EffectKind::Gamma, FamilyKind::Poisson) => Hyper::canonical(hyper.gamma / kappa, hyper.gamma_psi),
            (EffectKind::Gamma, _) => Hyper::canonical(hyper.gamma, hyper.gamma_psi / kappa),
            (EffectKind::Beta, _) => unreachable!(),
        })
    }
}

/// Marginal density of `y` from the generic conjugate identity
/// `exp[c(y,φ) + c*(γ,ψ) − c*(φ⁻¹+γ, (φ⁻¹y+γψ)/(φ⁻¹+γ))]`.
pub fn conjugate_marginal(pair: &ConjugatePair, y: f64, phi: f64, hyper: Hyper) -> Result<f64> {
    ln_conjugate_marginal(pair, y, phi, hyper).map(f64::exp)
}

pub fn ln_conjugate_marginal(pair: &ConjugatePair, y: f64, phi: f64, hyper: Hyper) -> Result<f64> {
    let c = pair.data_normalizer(y, phi)?;
    let prior = pair.normalizer_star(hyper, phi)?;
    let t = pair.member().statistic(y);
    let post = Hyper::canonical(1.0 / phi + hyper.gamma, t / phi + hyper.gamma_psi);
    let posterior = pair.normalizer_star(post, phi)?;
    Ok(c + prior - posterior)
}

/// Marginal of `y` given a predictor factor `κ`, for strongly conjugate pairs.
pub fn strong_conjugate_marginal(
    pair: &ConjugatePair,
    y: f64,
    kappa: f64,
    phi: f64,
    hyper: Hyper,
) -> Result<f64> {
    let absorbed = pair.absorb(hyper, kappa)?;
    conjugate_marginal(pair, y, phi, absorbed)
}

/// Closed-form marginal mean and variance of the conjugate model.
///
/// `phi` is the data dispersion (`σ²` for normal data, `1/rate` for Weibull).
pub fn marginal_moments(pair: &ConjugatePair, params: EffectParams, phi: f64) -> Result<(f64, f64)> {
    match (pair.effect, params) {
        (EffectKind::Normal, EffectParams::Normal { mean, var }) => Ok((mean, phi + var)),
        (EffectKind::Beta, EffectParams::Beta { alpha, beta }) => {
            let s = alpha + beta;
            Ok((alpha / s, alpha * beta / (s * s)))
        }
        (EffectKind::Gamma, EffectParams::Gamma { alpha, beta }) if pair.data == FamilyKind::Poisson => {
            Ok((alpha * beta, alpha * beta * (beta + 1.0)))
        }
        (EffectKind::Gamma, EffectParams::Gamma { alpha, beta }) => {
            let rate = 1.0 / phi;
            let inv = 1.0 / pair.shape;
            if alpha <= 2.0 * inv {
                return Err(Error::Nonexistence(format!(
                    "Weibull-gamma variance requires α > 2/ρ, got α = {alpha}, ρ = {}",
                    pair.shape
                )));
            }
            let lg_a = ln_gamma(alpha);
            let scale = rate * beta;
            let mean = (ln_gamma(alpha - inv) + ln_gamma(inv + 1.0) - lg_a).exp() / scale.powf(inv);
            let second = 2.0 * (ln_gamma(alpha - 2.0 * inv) + ln_gamma(2.0 * inv)).exp();
            let sq = (2.0 * (ln_gamma(alpha - inv) + ln_gamma(inv)) - lg_a).exp() / pair.shape;
            let var = (second - sq) / (pair.shape * scale.powf(2.0 * inv) * lg_a.exp());
            Ok((mean, var))
        }
        _ => Err(Error::domain(format!("parameters {params:?} do not match the pair"))),
    }
}

/// Marginal mean alone, which exists under weaker conditions than the
/// variance for Weibull data (`α > 1/ρ`).
pub fn marginal_mean(pair: &ConjugatePair, params: EffectParams, phi: f64) -> Result<f64> {
    if let (EffectKind::Gamma, FamilyKind::Weibull, EffectParams::Gamma { alpha, beta }) =
        (pair.effect, pair.data, params)
    {
        let inv = 1.0 / pair.shape;
        if alpha <= inv {
            return Err(Error::Nonexistence(format!(
                "Weibull-gamma mean requires α > 1/ρ, got α = {alpha}, ρ = {}",
                pair.shape
            )));
        }
        let scale = beta / phi;
        return Ok((ln_gamma(alpha - inv) + ln_gamma(inv + 1.0) - ln_gamma(alpha)).exp() / scale.powf(inv));
    }
    marginal_moments(pair, params, phi).map(|m| m.0)
}

/// Negative-binomial log-pmf `Γ(α+y)/(y!Γ(α)) (β/(β+1))^y (1/(β+1))^α`.
pub fn ln_negbin_pmf(y: f64, alpha: f64, beta: f64) -> f64 {
    ln_gamma(alpha + y) - ln_factorial(y as u64) - ln_gamma(alpha) + y * (beta / (beta + 1.0)).ln()
        - alpha * beta.ln_1p()
}

/// Beta–Bernoulli log-pmf.
pub fn ln_beta_bernoulli_pmf(y: f64, alpha: f64, beta: f64) -> f64 {
    if y == 1.0 {
        (alpha / (alpha + beta)).ln()
    } else {
        (beta / (alpha + beta)).ln()
    }
}

/// Weibull–gamma log-density `rate ρ y^(ρ−1) αβ / (1 + rate β y^ρ)^(α+1)`.
pub fn ln_weibull_gamma_density(y: f64, rate: f64, shape: f64, alpha: f64, beta: f64) -> f64 {
    (rate * shape * alpha * beta).ln() + (shape - 1.0) * y.ln()
        - (alpha + 1.0) * (rate * beta * y.powf(shape)).ln_1p()
}

/// Normal log-density.
pub fn ln_normal_density(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (y - mean).powi(2) / var - 0.5 * var.ln() - LN_SQRT_2PI
}
