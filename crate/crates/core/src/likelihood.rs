//! Conditional densities with the conjugate effect integrated out, and the
//! marginal log-likelihood over the normal random effects.
//!
//! Normal effects are handled by reparameterizing `b = L u` with `D = L Lᵀ`
//! and `u ~ N(0, I)`, so singular `D` (including `D = 0`) needs no special
//! casing. Adaptive Gauss–Hermite quadrature centres each subject's rule at
//! the mode of its integrand in `u` and scales it by the inverse curvature.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::FamilyKind;
use crate::model::{build_designs, Dataset, ModelSpec, Overdispersion, Params, ThetaParams};
pub use crate::model::SubjectDesign;
use crate::special::{
    gh_nodes, ln_beta, ln_factorial, ln_gamma, ln_std_normal_cdf, logistic, logit, normal_mills_ratio,
    softplus, std_normal_cdf, std_normal_pdf, std_normal_quantile, LN_SQRT_2PI,
};

/// Gauss–Hermite settings for the normal random effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureRule {
    /// Nodes for a single random effect.
    pub order: usize,
    /// Nodes per dimension for two random effects (tensor product).
    pub order_2d: usize,
    pub adaptive: bool,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self { order: 21, order_2d: 13, adaptive: true }
    }
}

impl QuadratureRule {
    /// Same order in every dimension.
    pub fn new(order: usize) -> Self {
        Self { order, order_2d: order, adaptive: true }
    }

    pub fn non_adaptive(mut self) -> Self {
        self.adaptive = false;
        self
    }

    fn order_for(&self, q: usize) -> usize {
        if q >= 2 {
            self.order_2d
        } else {
            self.order
        }
    }
}

const MODE_TOL: f64 = 1e-8;
const MODE_MAX_ITER: usize = 100;

/// Parameter-dependent constants shared by every observation.
#[derive(Debug, Clone)]
struct Kernel {
    family: FamilyKind,
    od: Overdispersion,
    alpha: f64,
    ln_beta: f64,
    ln_gamma_alpha: f64,
    /// Beta effect mean and its complement (computed without cancellation).
    pi0: f64,
    one_minus_pi0: f64,
    /// Beta shapes for a shared beta effect.
    beta_a: f64,
    beta_b: f64,
    shape: f64,
    sigma2: f64,
}

impl Kernel {
    fn new(spec: &ModelSpec, params: &Params) -> Result<Self> {
        let mut k = Kernel {
            family: spec.family,
            od: spec.overdispersion,
            alpha: f64::INFINITY,
            ln_beta: 0.0,
            ln_gamma_alpha: 0.0,
            pi0: 1.0,
            one_minus_pi0: 0.0,
            beta_a: f64::NAN,
            beta_b: f64::NAN,
            shape: params.shape,
            sigma2: params.sigma * params.sigma,
        };
        if params.xi.len() != spec.p() {
            return Err(Error::Dimension { expected: spec.p(), got: params.xi.len() });
        }
        if params.q() != spec.q() {
            return Err(Error::Dimension { expected: spec.q(), got: params.q() });
        }
        if !(params.shape > 0.0 && params.shape.is_finite()) {
            return Err(Error::domain(format!("Weibull shape must be positive, got {}", params.shape)));
        }
        if spec.family == FamilyKind::Normal && !(params.sigma > 0.0 && params.sigma.is_finite()) {
            return Err(Error::domain(format!("sigma must be positive, got {}", params.sigma)));
        }
        if spec.overdispersion == Overdispersion::None {
            return Ok(k);
        }
        match (spec.family, params.theta) {
            (FamilyKind::Poisson | FamilyKind::Weibull, ThetaParams::Gamma { alpha, beta }) => {
                if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
                    return Err(Error::domain(format!("gamma parameters must be positive, got ({alpha}, {beta})")));
                }
                k.alpha = alpha;
                k.ln_beta = beta.ln();
                k.ln_gamma_alpha = ln_gamma(alpha);
            }
            (FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit, ThetaParams::Beta { pi0, precision }) => {
                if !(pi0 > 0.0 && pi0 <= 1.0) {
                    return Err(Error::domain(format!("pi0 must lie in (0, 1], got {pi0}")));
                }
                k.pi0 = pi0;
                k.one_minus_pi0 = if pi0 < 1.0 { logistic(-logit(pi0)) } else { 0.0 };
                if spec.overdispersion == Overdispersion::SharedConjugate {
                    let s = precision
                        .ok_or_else(|| Error::Validation("a shared beta effect needs its precision".into()))?;
                    if !(s > 0.0 && s.is_finite()) || pi0 >= 1.0 {
                        return Err(Error::domain("shared beta effect needs precision > 0 and pi0 < 1"));
                    }
                    k.beta_a = pi0 * s;
                    k.beta_b = k.one_minus_pi0 * s;
                }
            }
            (FamilyKind::Normal, _) => {
                return Err(Error::unsupported("the normal family takes no conjugate overdispersion effect"));
            }
            (family, theta) => {
                return Err(Error::Validation(format!("{} model does not accept {theta:?}", family.name())));
            }
        }
        Ok(k)
    }

    fn shared(&self) -> bool {
        self.od == Overdispersion::SharedConjugate
    }

    fn independent(&self) -> bool {
        self.od == Overdispersion::IndependentConjugate
    }

    /// `η`-free part of `ln f(y | η)` for one observation (non-shared).
    fn obs_const(&self, y: f64) -> f64 {
        match self.family {
            FamilyKind::Normal => -0.5 * self.sigma2.ln() - LN_SQRT_2PI,
            FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit => 0.0,
            FamilyKind::Poisson if self.independent() => {
                ln_gamma(self.alpha + y) - self.ln_gamma_alpha - ln_factorial(y as u64)
            }
            FamilyKind::Poisson => -ln_factorial(y as u64),
            FamilyKind::Weibull => {
                let base = self.shape.ln() + (self.shape - 1.0) * y.ln();
                if self.independent() {
                    base + self.alpha.ln() + self.ln_beta
                } else {
                    base
                }
            }
        }
    }

    /// `η`-dependent part of `ln f(y | η)` and its first two derivatives.
    /// `t` is the sufficient statistic (`y^ρ` for Weibull).
    fn obs(&self, y: f64, t: f64, eta: f64) -> (f64, f64, f64) {
        match (self.family, self.independent()) {
            (FamilyKind::Normal, _) => {
                let r = y - eta;
                (-0.5 * r * r / self.sigma2, r / self.sigma2, -1.0 / self.sigma2)
            }
            (FamilyKind::Poisson, false) => {
                let mu = eta.exp();
                (y * eta - mu, y - mu, -mu)
            }
            (FamilyKind::Poisson, true) => {
                let s = eta + self.ln_beta;
                let p = logistic(s);
                let a = self.alpha + y;
                (y * s - a * softplus(s), y - a * p, -a * p * (1.0 - p))
            }
            (FamilyKind::Weibull, false) => {
                let m = eta.exp() * t;
                (eta - m, 1.0 - m, -m)
            }
            (FamilyKind::Weibull, true) => {
                let s = eta + self.ln_beta + t.ln();
                let p = logistic(s);
                let a = self.alpha + 1.0;
                (eta - a * softplus(s), 1.0 - a * p, -a * p * (1.0 - p))
            }
            (FamilyKind::BernoulliLogit, _) => {
                let k = logistic(eta);
                let kd = k * (1.0 - k);
                if y == 1.0 {
                    (self.pi0.ln() - softplus(-eta), 1.0 - k, -kd)
                } else if self.one_minus_pi0 == 0.0 {
                    (-softplus(eta), -k, -kd)
                } else {
                    let g = self.one_minus_pi0 + self.pi0 * logistic(-eta);
                    let kdd = kd * (1.0 - 2.0 * k);
                    let d1 = -self.pi0 * kd / g;
                    let d2 = -self.pi0 * (kdd * g + self.pi0 * kd * kd) / (g * g);
                    (g.ln(), d1, d2)
                }
            }
            (FamilyKind::BernoulliProbit, _) => {
                if y == 1.0 {
                    let m = normal_mills_ratio(eta);
                    (self.pi0.ln() + ln_std_normal_cdf(eta), m, -m * (eta + m))
                } else if self.one_minus_pi0 == 0.0 {
                    let m = normal_mills_ratio(-eta);
                    (ln_std_normal_cdf(-eta), -m, -m * (m - eta))
                } else {
                    let g = self.one_minus_pi0 + self.pi0 * std_normal_cdf(-eta);
                    let phi = std_normal_pdf(eta);
                    let d1 = -self.pi0 * phi / g;
                    let d2 = self.pi0 * phi * (eta * g - self.pi0 * phi) / (g * g);
                    (g.ln(), d1, d2)
                }
            }
        }
    }
}

/// One subject's data with the parameter-dependent pieces precomputed.
struct SubjectEval<'a> {
    kernel: &'a Kernel,
    y: &'a [f64],
    /// Sufficient statistics (`y`, or `y^ρ` for Weibull).
    t: Vec<f64>,
    offset: Vec<f64>,
    /// `A = Z L`, row-major `n × q`.
    a: Vec<f64>,
    q: usize,
    constant: f64,
}

impl<'a> SubjectEval<'a> {
    fn new(kernel: &'a Kernel, design: &'a SubjectDesign, params: &Params) -> Self {
        let y = design.y.as_slice();
        let n = y.len();
        let q = design.z.ncols();
        let t: Vec<f64> = if kernel.family == FamilyKind::Weibull {
            y.iter().map(|v| v.powf(kernel.shape)).collect()
        } else {
            y.to_vec()
        };
        let xi = DVector::from_column_slice(&params.xi);
        let offset = (&design.x * xi).as_slice().to_vec();
        let a_mat = &design.z * &params.d_chol;
        let mut a = vec![0.0; n * q];
        for j in 0..n {
            for k in 0..q {
                a[j * q + k] = a_mat[(j, k)];
            }
        }
        let constant = if kernel.shared() { shared_constant(kernel, y) } else { y.iter().map(|&v| kernel.obs_const(v)).sum() };
        Self { kernel, y, t, offset, a, q, constant }
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn eta_at(&self, u: &[f64], eta: &mut [f64]) {
        for (j, e) in eta.iter_mut().enumerate() {
            let mut v = self.offset[j];
            for k in 0..self.q {
                v += self.a[j * self.q + k] * u[k];
            }
            *e = v;
        }
    }

    /// `ln f(y_i | η)` (conjugate effect integrated out).
    fn value(&self, eta: &[f64]) -> f64 {
        if self.kernel.shared() {
            return self.constant + shared_value(self.kernel, self.y, &self.t, eta).0;
        }
        let mut s = self.constant;
        for j in 0..self.n() {
            s += self.kernel.obs(self.y[j], self.t[j], eta[j]).0;
        }
        s
    }

    /// `h(u) = ln f(y | η(u)) − ½|u|²` with its gradient and Hessian in `u`.
    fn h_derivs(&self, u: &[f64], eta: &mut [f64]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        self.eta_at(u, eta);
        let q = self.q;
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        let value;
        if self.kernel.shared() {
            let (v, grad, hess) = shared_value(self.kernel, self.y, &self.t, eta);
            value = self.constant + v;
            match (grad, hess) {
                (Some(grad), Some((diag, outer, w))) => {
                    // Hess_η = diag + outer * w wᵀ
                    for k in 0..q {
                        let mut aw = 0.0;
                        for j in 0..self.n() {
                            let ajk = self.a[j * q + k];
                            g[k] += ajk * grad[j];
                            aw += ajk * w[j];
                            for l in 0..q {
                                h[k][l] += ajk * diag[j] * self.a[j * q + l];
                            }
                        }
                        for l in 0..q {
                            let aw_l: f64 = (0..self.n()).map(|j| self.a[j * q + l] * w[j]).sum();
                            h[k][l] += outer * aw * aw_l;
                        }
                    }
                }
                _ => {
                    let (gn, hn) = self.numeric_derivs(u, eta);
                    g = gn;
                    h = hn;
                    // numeric_derivs works on h(u) directly
                    let uu: f64 = u[..q].iter().map(|x| x * x).sum();
                    self.eta_at(u, eta);
                    return (value - 0.5 * uu, g, h);
                }
            }
        } else {
            let mut v = self.constant;
            for j in 0..self.n() {
                let (f, d1, d2) = self.kernel.obs(self.y[j], self.t[j], eta[j]);
                v += f;
                for k in 0..q {
                    let ajk = self.a[j * q + k];
                    g[k] += ajk * d1;
                    for l in 0..q {
                        h[k][l] += ajk * d2 * self.a[j * q + l];
                    }
                }
            }
            value = v;
        }
        let mut uu = 0.0;
        for k in 0..q {
            g[k] -= u[k];
            h[k][k] -= 1.0;
            uu += u[k] * u[k];
        }
        (value - 0.5 * uu, g, h)
    }

    /// Central-difference gradient and Hessian of `h(u)`.
    fn numeric_derivs(&self, u: &[f64], eta: &mut [f64]) -> ([f64; 2], [[f64; 2]; 2]) {
        let q = self.q;
        let step = 1e-4;
        let mut hval = |du: [f64; 2]| {
            let w = [u[0] + du[0], if q > 1 { u[1] + du[1] } else { 0.0 }];
            self.eta_at(&w, eta);
            let uu: f64 = w[..q].iter().map(|x| x * x).sum();
            self.value(eta) - 0.5 * uu
        };
        let f0 = hval([0.0, 0.0]);
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for k in 0..q {
            let mut e = [0.0; 2];
            e[k] = step;
            let fp = hval(e);
            e[k] = -step;
            let fm = hval(e);
            g[k] = (fp - fm) / (2.0 * step);
            h[k][k] = (fp - 2.0 * f0 + fm) / (step * step);
        }
        if q == 2 {
            let fpp = hval([step, step]);
            let fpm = hval([step, -step]);
            let fmp = hval([-step, step]);
            let fmm = hval([-step, -step]);
            h[0][1] = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[1][0] = h[0][1];
        }
        (g, h)
    }

    fn h_value(&self, u: &[f64], eta: &mut [f64]) -> f64 {
        self.eta_at(u, eta);
        let uu: f64 = u[..self.q].iter().map(|x| x * x).sum();
        self.value(eta) - 0.5 * uu
    }
}

/// `η`-free part of the shared-effect joint density.
fn shared_constant(k: &Kernel, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    match k.family {
        FamilyKind::Poisson => {
            let total: f64 = y.iter().sum();
            -y.iter().map(|&v| ln_factorial(v as u64)).sum::<f64>() + ln_gamma(k.alpha + total)
                - k.ln_gamma_alpha
                - k.alpha * k.ln_beta
        }
        FamilyKind::Weibull => {
            y.iter().map(|&v| k.shape.ln() + (k.shape - 1.0) * v.ln()).sum::<f64>() + ln_gamma(k.alpha + n)
                - k.ln_gamma_alpha
                - k.alpha * k.ln_beta
        }
        _ => -ln_beta(k.beta_a, k.beta_b),
    }
}

type SharedHessian = (Vec<f64>, f64, Vec<f64>);

/// `η`-dependent part of the shared-effect joint density. For the gamma
/// cases also returns the gradient and the Hessian as `diag + c·w wᵀ`.
fn shared_value(k: &Kernel, y: &[f64], t: &[f64], eta: &[f64]) -> (f64, Option<Vec<f64>>, Option<SharedHessian>) {
    match k.family {
        FamilyKind::Poisson | FamilyKind::Weibull => {
            // Σ a_j η_j − (α + T) ln(1/β + Σ w_j e^{η_j})
            let poisson = k.family == FamilyKind::Poisson;
            let n = y.len();
            let total = if poisson { y.iter().sum::<f64>() } else { n as f64 };
            let coef = k.alpha + total;
            // work in log space: ln(1/β + S) with S = Σ exp(η_j + ln w_j)
            let mut terms: Vec<f64> = (0..n).map(|j| if poisson { eta[j] } else { eta[j] + t[j].ln() }).collect();
            terms.push(-k.ln_beta);
            let lse = log_sum_exp(&terms);
            let linear: f64 = (0..n).map(|j| if poisson { y[j] * eta[j] } else { eta[j] }).sum();
            let value = linear - coef * lse;
            let share: Vec<f64> = terms[..n].iter().map(|v| (v - lse).exp()).collect();
            let grad: Vec<f64> = (0..n).map(|j| (if poisson { y[j] } else { 1.0 }) - coef * share[j]).collect();
            let diag: Vec<f64> = share.iter().map(|s| -coef * s).collect();
            (value, Some(grad), Some((diag, coef, share)))
        }
        _ => {
            let mut ones = 0usize;
            let mut ln_k = 0.0;
            let mut zeros_v = Vec::new();
            for (j, &yj) in y.iter().enumerate() {
                let (ln_kappa, one_minus) = match k.family {
                    FamilyKind::BernoulliLogit => (-softplus(-eta[j]), logistic(-eta[j])),
                    _ => (ln_std_normal_cdf(eta[j]), std_normal_cdf(-eta[j])),
                };
                if yj == 1.0 {
                    ones += 1;
                    ln_k += ln_kappa;
                } else {
                    zeros_v.push(one_minus);
                }
            }
            // Π(1 − θκ) = Σ_r e_r(1 − κ) θ^r (1 − θ)^(nz − r), all terms non-negative
            let nz = zeros_v.len();
            let mut e = vec![0.0; nz + 1];
            e[0] = 1.0;
            for (i, v) in zeros_v.iter().enumerate() {
                for r in (1..=i + 1).rev() {
                    e[r] += e[r - 1] * v;
                }
            }
            let m = ones as f64;
            let terms: Vec<f64> = (0..=nz)
                .filter(|&r| e[r] > 0.0)
                .map(|r| e[r].ln() + ln_beta(k.beta_a + m + r as f64, k.beta_b + (nz - r) as f64))
                .collect();
            (ln_k + log_sum_exp(&terms), None, None)
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Tensor-product Gauss–Hermite grid: nodes (`q` coordinates each),
/// log-weights including the `e^{x'x}` factor.
struct Grid {
    q: usize,
    nodes: Vec<[f64; 2]>,
    ln_w: Vec<f64>,
}

impl Grid {
    fn new(q: usize, order: usize) -> Result<Self> {
        let (x, w) = gh_nodes(order)?;
        let mut nodes = Vec::new();
        let mut ln_w = Vec::new();
        match q {
            1 => {
                for i in 0..order {
                    nodes.push([x[i], 0.0]);
                    ln_w.push(w[i].ln() + x[i] * x[i]);
                }
            }
            2 => {
                for i in 0..order {
                    for j in 0..order {
                        nodes.push([x[i], x[j]]);
                        ln_w.push(w[i].ln() + w[j].ln() + x[i] * x[i] + x[j] * x[j]);
                    }
                }
            }
            _ => return Err(Error::unsupported(format!("{q} normal random effects (at most 2)"))),
        }
        Ok(Self { q, nodes, ln_w })
    }
}

/// Cholesky of a 1×1 or 2×2 symmetric matrix; `None` if not positive definite.
fn chol2(m: [[f64; 2]; 2], q: usize) -> Option<[[f64; 2]; 2]> {
    if !(m[0][0] > 0.0) || !m[0][0].is_finite() {
        return None;
    }
    let l00 = m[0][0].sqrt();
    if q == 1 {
        return Some([[l00, 0.0], [0.0, 0.0]]);
    }
    let l10 = m[1][0] / l00;
    let s = m[1][1] - l10 * l10;
    if !(s > 0.0) || !s.is_finite() {
        return None;
    }
    Some([[l00, 0.0], [l10, s.sqrt()]])
}

/// Solve `(R Rᵀ) x = b` with lower-triangular `R`.
fn chol_solve(r: [[f64; 2]; 2], b: [f64; 2], q: usize) -> [f64; 2] {
    if q == 1 {
        return [b[0] / (r[0][0] * r[0][0]), 0.0];
    }
    let z0 = b[0] / r[0][0];
    let z1 = (b[1] - r[1][0] * z0) / r[1][1];
    let x1 = z1 / r[1][1];
    let x0 = (z0 - r[1][0] * x1) / r[0][0];
    [x0, x1]
}

/// Maximize `h(u)` by damped Newton. Returns the mode and the Cholesky
/// factor of `−∇²h` there.
fn find_mode(s: &SubjectEval, eta: &mut [f64]) -> Result<([f64; 2], [[f64; 2]; 2])> {
    let q = s.q;
    let mut u = [0.0; 2];
    let (mut f, mut g, mut h) = s.h_derivs(&u, eta);
    for _ in 0..MODE_MAX_ITER {
        let neg = [[-h[0][0], -h[0][1]], [-h[1][0], -h[1][1]]];
        let gnorm = g[..q].iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < MODE_TOL {
            if let Some(r) = chol2(neg, q) {
                return Ok((u, r));
            }
        }
        // Levenberg-style shift until the Newton matrix is positive definite
        let mut shift = 0.0;
        let r = loop {
            let mut m = neg;
            for k in 0..q {
                m[k][k] += shift;
            }
            if let Some(r) = chol2(m, q) {
                break r;
            }
            shift = if shift == 0.0 { 1e-3 } else { shift * 10.0 };
            if shift > 1e12 {
                return Err(Error::Numeric("mode search: curvature is not finite".into()));
            }
        };
        let step = chol_solve(r, g, q);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = [u[0] + scale * step[0], u[1] + scale * step[1]];
            let fc = s.h_value(&cand, eta);
            if fc.is_finite() && fc >= f - 1e-12 * f.abs().max(1.0) {
                moved = cand != u;
                u = cand;
                break;
            }
            scale *= 0.5;
        }
        let (nf, ng, nh) = s.h_derivs(&u, eta);
        let converged_by_stall = !moved || (nf - f).abs() <= 1e-15 * nf.abs().max(1.0);
        f = nf;
        g = ng;
        h = nh;
        if converged_by_stall {
            let neg = [[-h[0][0], -h[0][1]], [-h[1][0], -h[1][1]]];
            if let Some(r) = chol2(neg, q) {
                return Ok((u, r));
            }
        }
    }
    let neg = [[-h[0][0], -h[0][1]], [-h[1][0], -h[1][1]]];
    chol2(neg, q)
        .map(|r| (u, r))
        .ok_or_else(|| Error::Numeric("mode search did not converge".into()))
}

fn subject_loglik_eval(s: &SubjectEval, grid: Option<&Grid>, adaptive: bool) -> Result<f64> {
    let n = s.n();
    let mut eta = vec![0.0; n];
    if s.q == 0 {
        eta.copy_from_slice(&s.offset);
        return Ok(s.value(&eta));
    }
    let grid = grid.expect("grid for q > 0");
    let q = grid.q;
    // u = û + √2 C x with C Cᵀ = (−∇²h)⁻¹, C = R⁻ᵀ
    let (mode, c, ln_det_c) = if adaptive {
        let (u, r) = find_mode(s, &mut eta)?;
        let c = if q == 1 {
            [[1.0 / r[0][0], 0.0], [0.0, 0.0]]
        } else {
            // R⁻ᵀ is upper triangular
            let i00 = 1.0 / r[0][0];
            let i11 = 1.0 / r[1][1];
            let i10 = -r[1][0] * i00 * i11;
            [[i00, i10], [0.0, i11]]
        };
        let ln_det = -(0..q).map(|k| r[k][k].ln()).sum::<f64>();
        (u, c, ln_det)
    } else {
        ([0.0; 2], [[1.0, 0.0], [0.0, 1.0]], 0.0)
    };
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut terms = Vec::with_capacity(grid.nodes.len());
    let mut u = [0.0; 2];
    for (x, lw) in grid.nodes.iter().zip(&grid.ln_w) {
        for k in 0..q {
            let mut v = mode[k];
            for l in 0..q {
                v += sqrt2 * c[k][l] * x[l];
            }
            u[k] = v;
        }
        terms.push(lw + s.h_value(&u, &mut eta));
    }
    let ln_norm = -(q as f64) * LN_SQRT_2PI;
    Ok(0.5 * q as f64 * std::f64::consts::LN_2 + ln_det_c + log_sum_exp(&terms) + ln_norm)
}

/// Exact log-density of `N(Xξ, Z D Zᵀ + σ² I)`.
fn normal_subject_loglik(design: &SubjectDesign, params: &Params) -> Result<f64> {
    let n = design.n();
    let xi = DVector::from_column_slice(&params.xi);
    let r = &design.y - &design.x * xi;
    let a = &design.z * &params.d_chol;
    let v = &a * a.transpose() + DMatrix::identity(n, n) * (params.sigma * params.sigma);
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::Numeric("marginal covariance is not positive definite".into()))?;
    let w = chol.l().solve_lower_triangular(&r).expect("non-singular factor");
    let ln_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    Ok(-0.5 * w.norm_squared() - ln_det - n as f64 * LN_SQRT_2PI)
}

/// Reusable likelihood evaluator for a fixed model and dataset.
#[derive(Debug, Clone)]
pub struct Likelihood {
    spec: ModelSpec,
    designs: Vec<SubjectDesign>,
    quad: QuadratureRule,
}

impl Likelihood {
    pub fn new(spec: &ModelSpec, data: &Dataset, quad: QuadratureRule) -> Result<Self> {
        let designs = build_designs(spec, data)?;
        Self::from_designs(spec, designs, quad)
    }

    pub fn from_designs(spec: &ModelSpec, designs: Vec<SubjectDesign>, quad: QuadratureRule) -> Result<Self> {
        if spec.q() > 2 {
            return Err(Error::unsupported(format!("{} normal random effects (at most 2)", spec.q())));
        }
        if quad.order_for(spec.q()) == 0 {
            return Err(Error::domain("quadrature order must be at least 1"));
        }
        for d in &designs {
            if let Some(y) = d.y.iter().find(|&&y| !spec.family.in_support(y)) {
                return Err(Error::Validation(format!(
                    "subject {}: y = {y} outside the {} support",
                    d.id,
                    spec.family.name()
                )));
            }
        }
        Ok(Self { spec: spec.clone(), designs, quad })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn designs(&self) -> &[SubjectDesign] {
        &self.designs
    }

    /// Per-subject log-likelihood contributions in subject order.
    pub fn contributions(&self, params: &Params) -> Result<Vec<f64>> {
        let kernel = Kernel::new(&self.spec, params)?;
        let q = self.spec.q();
        let grid = if q > 0 && self.spec.family != FamilyKind::Normal {
            Some(Grid::new(q, self.quad.order_for(q))?)
        } else {
            None
        };
        self.designs
            .par_iter()
            .map(|d| {
                let v = if self.spec.family == FamilyKind::Normal {
                    normal_subject_loglik(d, params)
                } else {
                    let s = SubjectEval::new(&kernel, d, params);
                    subject_loglik_eval(&s, grid.as_ref(), self.quad.adaptive)
                };
                match v {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(v) => Err(Error::Evaluation { subject: d.id.clone(), reason: format!("log-likelihood is {v}") }),
                    Err(e) => Err(Error::Evaluation { subject: d.id.clone(), reason: e.to_string() }),
                }
            })
            .collect()
    }

    /// Total log-likelihood; the reduction order is fixed, so results are
    /// bit-identical regardless of thread count.
    pub fn loglik(&self, params: &Params) -> Result<f64> {
        Ok(neumaier_sum(&self.contributions(params)?))
    }
}

/// Fixed-effect estimates ignoring every random effect, by damped
/// Newton–Raphson; used as optimizer starting values. For the normal family
/// the residual standard deviation is returned too.
pub(crate) fn glm_start(spec: &ModelSpec, designs: &[SubjectDesign]) -> (Vec<f64>, f64) {
    let p = spec.p();
    let plain = ModelSpec { overdispersion: Overdispersion::None, random_effects: vec![], ..spec.clone() };
    let base = Params::new(vec![0.0; p]);
    let Ok(kernel) = Kernel::new(&plain, &base) else {
        return (vec![0.0; p], 1.0);
    };
    let loglik = |xi: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut ll = 0.0;
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for d in designs {
            let eta = &d.x * xi;
            for j in 0..d.n() {
                let y = d.y[j];
                let (f, d1, d2) = kernel.obs(y, y, eta[j]);
                ll += f;
                let row = d.x.row(j).transpose();
                g += &row * d1;
                h += &row * row.transpose() * d2;
            }
        }
        (ll, g, h)
    };
    let mut xi = DVector::zeros(p);
    if p > 0 {
        let (mut ll, mut g, mut h) = loglik(&xi);
        for _ in 0..100 {
            let neg = -&h;
            let ridge = 1e-10 * neg.trace().abs().max(1.0);
            let step = match (neg.clone() + DMatrix::identity(p, p) * ridge).cholesky() {
                Some(c) => c.solve(&g),
                None => break,
            };
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let cand = &xi + &step * scale;
                let (lc, gc, hc) = loglik(&cand);
                if lc.is_finite() && lc >= ll {
                    improved = lc - ll > 1e-12 * ll.abs().max(1.0);
                    xi = cand;
                    ll = lc;
                    g = gc;
                    h = hc;
                    break;
                }
                scale *= 0.5;
            }
            if !improved || g.amax() < 1e-10 {
                break;
            }
        }
        // separation can push Bernoulli estimates off to infinity
        xi.iter_mut().for_each(|v| *v = v.clamp(-20.0, 20.0));
    }
    let mut sigma = 1.0;
    if spec.family == FamilyKind::Normal {
        let (mut ss, mut n) = (0.0, 0usize);
        for d in designs {
            ss += (&d.y - &d.x * &xi).norm_squared();
            n += d.n();
        }
        if n > 0 && ss > 0.0 {
            sigma = (ss / n as f64).sqrt();
        }
    }
    (xi.as_slice().to_vec(), sigma)
}

/// Compensated summation in slice order.
pub(crate) fn neumaier_sum(v: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn eta_from_kappa(family: FamilyKind, kappa: f64) -> Result<f64> {
    match family {
        FamilyKind::Normal => Ok(kappa),
        _ if !(kappa > 0.0) || !kappa.is_finite() => Err(Error::domain(format!("κ must be positive, got {kappa}"))),
        FamilyKind::Poisson | FamilyKind::Weibull => Ok(kappa.ln()),
        FamilyKind::BernoulliLogit | FamilyKind::BernoulliProbit if kappa > 1.0 => {
            Err(Error::domain(format!("κ must lie in (0, 1] for Bernoulli data, got {kappa}")))
        }
        FamilyKind::BernoulliLogit => Ok(if kappa == 1.0 { f64::INFINITY } else { logit(kappa) }),
        FamilyKind::BernoulliProbit => Ok(std_normal_quantile(kappa)),
    }
}

/// Density of one observation given the normal effects (through `κ`), with
/// an independent conjugate effect integrated out.
pub fn cond_density(spec: &ModelSpec, params: &Params, y: f64, kappa: f64) -> Result<f64> {
    if spec.overdispersion == Overdispersion::SharedConjugate {
        return Err(Error::unsupported("a shared effect couples occasions; use cond_density_shared"));
    }
    if !spec.family.in_support(y) {
        return Err(Error::domain(format!("y = {y} outside the {} support", spec.family.name())));
    }
    let kernel = Kernel::new(spec, &zero_design_params(spec, params))?;
    let eta = eta_from_kappa(spec.family, kappa)?;
    let t = if spec.family == FamilyKind::Weibull { y.powf(params.shape) } else { y };
    Ok((kernel.obs_const(y) + kernel.obs(y, t, eta).0).exp())
}

/// Joint density of a subject's outcomes given `κ_i`, with a single shared
/// conjugate effect integrated out.
pub fn cond_density_shared(spec: &ModelSpec, params: &Params, y: &[f64], kappa: &[f64]) -> Result<f64> {
    if spec.overdispersion != Overdispersion::SharedConjugate {
        return Err(Error::unsupported("cond_density_shared requires a shared conjugate effect"));
    }
    if y.len() != kappa.len() {
        return Err(Error::Dimension { expected: y.len(), got: kappa.len() });
    }
    if let Some(v) = y.iter().find(|&&v| !spec.family.in_support(v)) {
        return Err(Error::domain(format!("y = {v} outside the {} support", spec.family.name())));
    }
    let kernel = Kernel::new(spec, &zero_design_params(spec, params))?;
    let eta: Vec<f64> = kappa.iter().map(|&k| eta_from_kappa(spec.family, k)).collect::<Result<_>>()?;
    let t: Vec<f64> = if spec.family == FamilyKind::Weibull {
        y.iter().map(|v| v.powf(params.shape)).collect()
    } else {
        y.to_vec()
    };
    Ok((shared_constant(&kernel, y) + shared_value(&kernel, y, &t, &eta).0).exp())
}

/// The kernel only needs the family-level parameters; this keeps dimension
/// checks from tripping on callers passing arbitrary `ξ`.
fn zero_design_params(spec: &ModelSpec, params: &Params) -> Params {
    let mut p = params.clone();
    p.xi = vec![0.0; spec.p()];
    if p.q() != spec.q() {
        p.d_chol = DMatrix::zeros(spec.q(), spec.q());
    }
    p
}

/// Log-likelihood contribution of one subject.
pub fn subject_loglik(spec: &ModelSpec, params: &Params, design: &SubjectDesign, quad: QuadratureRule) -> Result<f64> {
    let lik = Likelihood::from_designs(spec, vec![design.clone()], quad)?;
    lik.loglik(params)
}

/// Marginal log-likelihood of a dataset.
pub fn total_loglik(spec: &ModelSpec, params: &Params, data: &Dataset, quad: QuadratureRule) -> Result<f64> {
    Likelihood::new(spec, data, quad)?.loglik(params)
}
