use crate::error::{Error, Result};

pub const GH_MAX_ORDER: usize = 100;

/// Gauss–Hermite rule for the weight function `exp(-x^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Result<Self> {
        let (nodes, weights) = gh_nodes(order)?;
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Nodes (ascending) and weights of the `order`-point Gauss–Hermite rule.
///
/// Roots of the orthonormal Hermite polynomial are refined by Newton's method
/// from the usual asymptotic starting guesses.
pub fn gh_nodes(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 || order > GH_MAX_ORDER {
        return Err(Error::domain(format!(
            "Gauss-Hermite order must be in 1..={GH_MAX_ORDER}, got {order}"
        )));
    }
    let n = order;
    let nf = n as f64;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let (p1, p2) = hermite_orthonormal(n, z, pim4);
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        // recompute derivative at the converged root
        let (_, p2) = hermite_orthonormal(n, z, pim4);
        if p2 != 0.0 {
            pp = (2.0 * nf).sqrt() * p2;
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    x.reverse();
    w.reverse();
    Ok((x, w))
}

/// Returns `(h_n(z), h_{n-1}(z))` for orthonormal Hermite polynomials.
fn hermite_orthonormal(n: usize, z: f64, pim4: f64) -> (f64, f64) {
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}
