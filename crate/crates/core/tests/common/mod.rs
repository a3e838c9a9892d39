//! Independent reference computations: closed forms written out by hand,
//! brute-force integration over θ and over the normal effects.

#![allow(dead_code)]

use conmix::model::{SubjectDesign, ThetaParams};
use conmix::{FamilyKind, ModelSpec, Overdispersion, Params};
use nalgebra::{DMatrix, DVector};

pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn lgamma(x: f64) -> f64 {
    libm::lgamma(x)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean function `κ = g(η)`.
pub fn kappa(family: FamilyKind, eta: f64) -> f64 {
    match family {
        FamilyKind::Normal => eta,
        FamilyKind::Poisson | FamilyKind::Weibull => eta.exp(),
        FamilyKind::BernoulliLogit => logistic(eta),
        FamilyKind::BernoulliProbit => phi(eta),
    }
}

pub fn ln_poisson(y: f64, mu: f64) -> f64 {
    y * mu.ln() - mu - lgamma(y + 1.0)
}

/// Negative binomial: Poisson(θκ) with θ ~ Gamma(α, scale β).
pub fn ln_nb(y: f64, kappa: f64, alpha: f64, beta: f64) -> f64 {
    lgamma(alpha + y) - lgamma(alpha) - lgamma(y + 1.0) + y * (beta * kappa).ln() - (alpha + y) * (1.0 + beta * kappa).ln()
}

/// `Y^ρ ~ Exp(λ)`.
pub fn ln_weibull(y: f64, lambda: f64, rho: f64) -> f64 {
    rho.ln() + lambda.ln() + (rho - 1.0) * y.ln() - lambda * y.powf(rho)
}

/// Weibull with rate θκ, θ ~ Gamma(α, scale β).
pub fn ln_weibull_gamma(y: f64, kappa: f64, rho: f64, alpha: f64, beta: f64) -> f64 {
    rho.ln() + (rho - 1.0) * y.ln() + kappa.ln() + alpha.ln() + beta.ln()
        - (alpha + 1.0) * (1.0 + beta * kappa * y.powf(rho)).ln()
}

pub fn ln_bernoulli(y: f64, p: f64) -> f64 {
    if y == 1.0 {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

pub fn ln_normal(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mean).powi(2) / var)
}

/// `∫ f(θ) Gamma(θ; α, scale β) dθ` by the trapezoid rule in `u = ln θ`.
pub fn integrate_gamma(f: impl Fn(f64) -> f64, alpha: f64, beta: f64) -> f64 {
    let ln_norm = lgamma(alpha) + alpha * beta.ln();
    let centre = (alpha * beta).ln();
    let h = 0.002;
    // the left tail in ln θ decays like exp(α u), so widen it for small α
    let (left, right) = ((40.0f64).max(40.0 / alpha), 40.0);
    let mut s = 0.0;
    for i in -((left / h) as i64)..=(right / h) as i64 {
        let u = centre + i as f64 * h;
        let th = u.exp();
        let w = (alpha * u - th / beta - ln_norm).exp();
        if w > 0.0 {
            s += f(th) * w;
        }
    }
    s * h
}

/// `∫ f(θ) Beta(θ; a, b) dθ` by the trapezoid rule in `u = logit θ`.
pub fn integrate_beta(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let ln_b = lgamma(a) + lgamma(b) - lgamma(a + b);
    let h = 0.002;
    // tails decay like exp(a u) on the left and exp(-b u) on the right
    let (left, right) = (60.0f64.max(60.0 / a), 60.0f64.max(60.0 / b));
    let mut s = 0.0;
    for i in -((left / h) as i64)..=(right / h) as i64 {
        let u = i as f64 * h;
        // ln θ and ln(1-θ) without cancellation or overflow
        let soft = libm::log1p((-u.abs()).exp());
        let (lt, l1t) = if u >= 0.0 { (-soft, -u - soft) } else { (u - soft, -soft) };
        let w = (a * lt + b * l1t - ln_b).exp();
        if w > 0.0 {
            s += f(lt.exp()) * w;
        }
    }
    s * h
}

/// Log-density of one subject's outcomes given linear predictors `eta`,
/// with any conjugate effect integrated out by hand.
pub fn conditional_ln_density(spec: &ModelSpec, p: &Params, y: &[f64], eta: &[f64]) -> f64 {
    let fam = spec.family;
    let k: Vec<f64> = eta.iter().map(|&e| kappa(fam, e)).collect();
    let n = y.len();
    match (spec.overdispersion, fam, p.theta) {
        (_, FamilyKind::Normal, _) => (0..n).map(|j| ln_normal(y[j], eta[j], p.sigma * p.sigma)).sum(),
        (Overdispersion::None, FamilyKind::Poisson, _) => (0..n).map(|j| ln_poisson(y[j], k[j])).sum(),
        (Overdispersion::None, FamilyKind::Weibull, _) => (0..n).map(|j| ln_weibull(y[j], k[j], p.shape)).sum(),
        (Overdispersion::None, _, _) => (0..n).map(|j| ln_bernoulli(y[j], k[j])).sum(),
        (Overdispersion::IndependentConjugate, FamilyKind::Poisson, ThetaParams::Gamma { alpha, beta }) => {
            (0..n).map(|j| ln_nb(y[j], k[j], alpha, beta)).sum()
        }
        (Overdispersion::IndependentConjugate, FamilyKind::Weibull, ThetaParams::Gamma { alpha, beta }) => {
            (0..n).map(|j| ln_weibull_gamma(y[j], k[j], p.shape, alpha, beta)).sum()
        }
        (Overdispersion::IndependentConjugate, _, ThetaParams::Beta { pi0, .. }) => {
            (0..n).map(|j| ln_bernoulli(y[j], pi0 * k[j])).sum()
        }
        (Overdispersion::SharedConjugate, FamilyKind::Poisson, ThetaParams::Gamma { alpha, beta }) => {
            let s: f64 = y.iter().sum();
            let sk: f64 = k.iter().sum();
            lgamma(alpha + s) - lgamma(alpha) + s * beta.ln() - (alpha + s) * (1.0 + beta * sk).ln()
                + (0..n).map(|j| y[j] * k[j].ln() - lgamma(y[j] + 1.0)).sum::<f64>()
        }
        (Overdispersion::SharedConjugate, FamilyKind::Weibull, ThetaParams::Gamma { alpha, beta }) => {
            let nf = n as f64;
            let rho = p.shape;
            let st: f64 = (0..n).map(|j| k[j] * y[j].powf(rho)).sum();
            lgamma(alpha + nf) - lgamma(alpha) + nf * beta.ln() - (alpha + nf) * (1.0 + beta * st).ln()
                + (0..n).map(|j| rho.ln() + (rho - 1.0) * y[j].ln() + k[j].ln()).sum::<f64>()
        }
        (Overdispersion::SharedConjugate, _, t @ ThetaParams::Beta { .. }) => {
            let (a, b) = t.beta_shapes().expect("shared beta effect needs a precision");
            // ∏_j (θκ_j)^{y_j} (1-θκ_j)^{1-y_j} expanded as a polynomial in θ,
            // then E θ^m = ∏_{r<m} (a+r)/(a+b+r)
            let mut poly = vec![1.0];
            for j in 0..n {
                let mut next = vec![0.0; poly.len() + 1];
                for (m, c) in poly.iter().enumerate() {
                    if y[j] == 1.0 {
                        next[m + 1] += c * k[j];
                    } else {
                        next[m] += c;
                        next[m + 1] -= c * k[j];
                    }
                }
                poly = next;
            }
            let mut raw = 1.0;
            let mut total = 0.0;
            for (m, c) in poly.iter().enumerate() {
                total += c * raw;
                raw *= (a + m as f64) / (a + b + m as f64);
            }
            total.ln()
        }
        other => panic!("no oracle for {other:?}"),
    }
}

/// Subject log-likelihood by the trapezoid rule over standardized normal
/// effects `v`, with `b = L v`.
pub fn trapezoid_subject_loglik(spec: &ModelSpec, p: &Params, s: &SubjectDesign) -> f64 {
    let y: Vec<f64> = s.y.iter().copied().collect();
    let lin = &s.x * DVector::from_column_slice(&p.xi);
    let eval = |b: &DVector<f64>| {
        let eta = &lin + &s.z * b;
        conditional_ln_density(spec, p, &y, eta.as_slice())
    };
    let q = spec.q();
    let l: &DMatrix<f64> = &p.d_chol;
    let ln_phi = |v: f64| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln();
    match q {
        0 => eval(&DVector::zeros(0)),
        1 => {
            let h = 0.002;
            let n = (10.0 / h) as i64;
            let terms: Vec<f64> = (-n..=n)
                .map(|i| {
                    let v = i as f64 * h;
                    eval(&DVector::from_element(1, l[(0, 0)] * v)) + ln_phi(v)
                })
                .collect();
            logsumexp(&terms) + h.ln()
        }
        2 => {
            let h = 0.01;
            let n = (7.0 / h) as i64;
            let mut terms = Vec::with_capacity(((2 * n + 1) * (2 * n + 1)) as usize);
            for i in -n..=n {
                for j in -n..=n {
                    let v = DVector::from_vec(vec![i as f64 * h, j as f64 * h]);
                    terms.push(eval(&(l * &v)) + ln_phi(v[0]) + ln_phi(v[1]));
                }
            }
            logsumexp(&terms) + 2.0 * h.ln()
        }
        _ => panic!("q > 2"),
    }
}

/// Closed-form likelihood when `D = 0`, summed over subjects.
pub fn no_random_effect_loglik(spec: &ModelSpec, p: &Params, designs: &[SubjectDesign]) -> f64 {
    designs
        .iter()
        .map(|s| {
            let y: Vec<f64> = s.y.iter().copied().collect();
            let eta = &s.x * DVector::from_column_slice(&p.xi);
            conditional_ln_density(spec, p, &y, eta.as_slice())
        })
        .sum()
}
