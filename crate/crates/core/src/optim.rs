//! Quasi-Newton minimization with numerical derivatives.

use nalgebra::{DMatrix, DVector};

/// Relative step for central-difference gradients.
pub const GRAD_STEP: f64 = 1e-5;
/// Relative step for central-difference Hessians.
pub const HESS_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence when the largest absolute gradient entry falls below this.
    pub grad_tol: f64,
    /// Largest allowed step (infinity norm) of a single iteration.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-6, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
    /// Objective value after every accepted iteration, starting point first.
    pub history: Vec<f64>,
}

impl BfgsResult {
    pub fn grad_norm(&self) -> f64 {
        inf_norm(&self.grad)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Central-difference gradient with step `h·(1 + |x_i|)`.
pub fn numeric_gradient<F>(f: &F, x: &[f64], h: f64) -> Option<Vec<f64>>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let mut g = Vec::with_capacity(x.len());
    let mut w = x.to_vec();
    for i in 0..x.len() {
        let step = h * (1.0 + x[i].abs());
        w[i] = x[i] + step;
        let fp = f(&w)?;
        w[i] = x[i] - step;
        let fm = f(&w)?;
        w[i] = x[i];
        g.push((fp - fm) / (2.0 * step));
    }
    Some(g)
}

/// Central-difference Hessian with step `h·(1 + |x_i|)`.
pub fn numeric_hessian<F>(f: &F, x: &[f64], h: f64) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let n = x.len();
    let steps: Vec<f64> = x.iter().map(|v| h * (1.0 + v.abs())).collect();
    let f0 = f(x)?;
    let mut hess = DMatrix::zeros(n, n);
    let mut w = x.to_vec();
    for i in 0..n {
        w[i] = x[i] + steps[i];
        let fp = f(&w)?;
        w[i] = x[i] - steps[i];
        let fm = f(&w)?;
        w[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
        for j in 0..i {
            let mut e = |si: f64, sj: f64| {
                w[i] = x[i] + si * steps[i];
                w[j] = x[j] + sj * steps[j];
                let v = f(&w);
                w[i] = x[i];
                w[j] = x[j];
                v
            };
            let v = (e(1.0, 1.0)? - e(1.0, -1.0)? - e(-1.0, 1.0)? + e(-1.0, -1.0)?) / (4.0 * steps[i] * steps[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Some(hess)
}

/// Backtracking line search with quadratic/cubic interpolation enforcing the
/// Armijo condition. Returns the accepted step length and function value.
fn line_search<F>(f: &F, x: &[f64], fx: f64, slope: f64, p: &[f64]) -> Option<(f64, f64)>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    const C1: f64 = 1e-4;
    let eval = |a: f64| {
        let w: Vec<f64> = x.iter().zip(p).map(|(xi, pi)| xi + a * pi).collect();
        f(&w).filter(|v| v.is_finite())
    };
    let mut a = 1.0;
    let mut prev: Option<(f64, f64)> = None;
    for _ in 0..40 {
        match eval(a) {
            Some(fa) if fa <= fx + C1 * a * slope => return Some((a, fa)),
            Some(fa) => {
                let next = match prev {
                    None => -slope * a * a / (2.0 * (fa - fx - slope * a)),
                    Some((a2, f2)) => {
                        let r1 = fa - fx - slope * a;
                        let r2 = f2 - fx - slope * a2;
                        let ca = (r1 / (a * a) - r2 / (a2 * a2)) / (a - a2);
                        let cb = (-a2 * r1 / (a * a) + a * r2 / (a2 * a2)) / (a - a2);
                        if ca == 0.0 {
                            -slope / (2.0 * cb)
                        } else {
                            let disc = cb * cb - 3.0 * ca * slope;
                            if disc < 0.0 {
                                0.5 * a
                            } else {
                                (-cb + disc.sqrt()) / (3.0 * ca)
                            }
                        }
                    }
                };
                prev = Some((a, fa));
                a = if next.is_finite() { next.clamp(0.1 * a, 0.5 * a) } else { 0.5 * a };
            }
            None => {
                prev = None;
                a *= 0.25;
            }
        }
        if a < 1e-16 {
            break;
        }
    }
    None
}

/// Minimize `f` by BFGS with numerical gradients. Accepted iterations never
/// increase `f`.
pub fn minimize<F>(f: &F, x0: &[f64], opts: BfgsOptions) -> BfgsResult
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let fail = |x: Vec<f64>, msg: &str| BfgsResult {
        x,
        f: f64::NAN,
        grad: vec![f64::NAN; n],
        iterations: 0,
        converged: false,
        message: msg.to_string(),
        history: vec![],
    };
    let Some(mut fx) = f(&x).filter(|v| v.is_finite()) else {
        return fail(x, "objective is not finite at the starting point");
    };
    if n == 0 {
        return BfgsResult {
            x,
            f: fx,
            grad: vec![],
            iterations: 0,
            converged: true,
            message: "no parameters".into(),
            history: vec![fx],
        };
    }
    let Some(mut g) = numeric_gradient(f, &x, GRAD_STEP) else {
        return fail(x, "gradient is not finite at the starting point");
    };
    let mut history = vec![fx];
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;
    while iterations < opts.max_iter {
        if inf_norm(&g) < opts.grad_tol {
            converged = true;
            message = "gradient tolerance reached".into();
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut p = -(&hinv * &gv);
        let mut slope = p.dot(&gv);
        if slope >= 0.0 || !slope.is_finite() {
            hinv = DMatrix::identity(n, n);
            fresh = true;
            p = -gv.clone();
            slope = p.dot(&gv);
        }
        let pmax = p.amax();
        if pmax > opts.max_step {
            p *= opts.max_step / pmax;
            slope = p.dot(&gv);
        }
        let found = line_search(f, &x, fx, slope, p.as_slice());
        let Some((a, fa)) = found else {
            if !fresh {
                hinv = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            // no descent along the steepest direction: numerical noise floor
            converged = inf_norm(&g) < 100.0 * opts.grad_tol;
            message = "line search failed".into();
            break;
        };
        let s = &p * a;
        let xn: Vec<f64> = x.iter().zip(s.iter()).map(|(xi, si)| xi + si).collect();
        let Some(gn) = numeric_gradient(f, &xn, GRAD_STEP) else {
            message = "gradient is not finite".into();
            break;
        };
        let yv = DVector::from_column_slice(&gn) - &gv;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if fresh {
                // scale the initial approximation before the first update
                hinv *= sy / yv.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        let df = fx - fa;
        x = xn;
        fx = fa;
        g = gn;
        history.push(fx);
        if df.abs() <= 1e-15 * fx.abs().max(1.0) && inf_norm(&g) < 100.0 * opts.grad_tol {
            converged = true;
            message = "no further decrease".into();
            break;
        }
    }
    BfgsResult { x, f: fx, grad: g, iterations, converged, message, history }
}
