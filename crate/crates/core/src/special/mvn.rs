use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{std_normal_cdf, std_normal_quantile};
use crate::error::{Error, Result};

pub const MVN_MAX_DIM: usize = 12;

const SHIFTS: usize = 12;
const MAX_EVALUATIONS: usize = 40_000_000;
const TWO_PI: f64 = std::f64::consts::TAU;

/// Symmetric, unit-diagonal, positive semi-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(DMatrix<f64>);

impl CorrelationMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::domain("correlation matrix must be square"));
        }
        let n = m.nrows();
        for i in 0..n {
            if (m[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!("diagonal entry {i} is {} not 1", m[(i, i)])));
            }
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if !a.is_finite() || (a - b).abs() > 1e-12 || a.abs() > 1.0 + 1e-12 {
                    return Err(Error::domain(format!("invalid off-diagonal entry ({i},{j})")));
                }
            }
        }
        let mut m = m;
        for i in 0..n {
            m[(i, i)] = 1.0;
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        // PSD check happens during the pivoted factorization
        pivoted_cholesky(&m, &vec![f64::INFINITY; n])?;
        Ok(Self(m))
    }

    /// Correlation matrix of a covariance matrix, together with the
    /// standard deviations used for scaling.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<(Self, Vec<f64>)> {
        let n = cov.nrows();
        let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
        if sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::domain("covariance has a non-positive variance"));
        }
        let corr = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                cov[(i, j)] / (sd[i] * sd[j])
            }
        });
        Ok((Self::new(corr)?, sd))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// `P(X <= upper)` for `X ~ N(0, corr)`.
///
/// Returns the probability and an error estimate (three standard errors of
/// the randomized lattice rule; exact routes report 0). One dimension uses
/// `Φ`, two dimensions the Drezner–Wesolowsky/Genz bivariate formula, and
/// higher dimensions Genz's separation of variables with randomly shifted
/// Richtmyer lattices. The random shifts come from `seed`, so the result is
/// deterministic.
pub fn mvn_cdf(upper: &[f64], corr: &CorrelationMatrix, tol: f64, seed: u64) -> Result<(f64, f64)> {
    let n = corr.dim();
    if upper.len() != n {
        return Err(Error::Dimension { expected: n, got: upper.len() });
    }
    if n > MVN_MAX_DIM {
        return Err(Error::unsupported(format!(
            "mvn_cdf supports dimension <= {MVN_MAX_DIM}, got {n}"
        )));
    }
    if upper.iter().any(|u| u.is_nan()) {
        return Err(Error::domain("upper limit is NaN"));
    }
    if !(tol > 0.0) {
        return Err(Error::domain("tolerance must be positive"));
    }
    if upper.iter().any(|&u| u == f64::NEG_INFINITY) {
        return Ok((0.0, 0.0));
    }
    // drop coordinates with an infinite upper limit
    let keep: Vec<usize> = (0..n).filter(|&i| upper[i] < f64::INFINITY).collect();
    let m = &corr.0;
    match keep.len() {
        0 => Ok((1.0, 0.0)),
        1 => Ok((std_normal_cdf(upper[keep[0]]), 0.0)),
        2 => {
            let (i, j) = (keep[0], keep[1]);
            Ok((bvn_cdf(upper[i], upper[j], m[(i, j)]), 0.0))
        }
        k => {
            let sub = DMatrix::from_fn(k, k, |a, b| m[(keep[a], keep[b])]);
            let lim: Vec<f64> = keep.iter().map(|&i| upper[i]).collect();
            if k == 3 {
                if let Some(r) = tvn_cdf(&lim, &sub, tol) {
                    return Ok(r);
                }
            }
            genz_sov(&lim, &sub, tol, seed)
        }
    }
}

/// Bivariate normal CDF `P(X <= h, Y <= k)` with correlation `r`.
pub fn bvn_cdf(h: f64, k: f64, r: f64) -> f64 {
    bvn_upper(-h, -k, r)
}

// Gauss–Legendre abscissae (negative half) and weights for 6, 12 and 20 points.
const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_7),
    (0.467_913_934_572_690_4, -0.238_619_186_083_197),
];
const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];
const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_325_9),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

/// `P(X > h, Y > k)` (Genz's BVND).
fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    let r = r.clamp(-1.0, 1.0);
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for &(w, x) in quad {
            for sign in [-1.0, 1.0] {
                let sn = (asr * (sign * x + 1.0) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (2.0 * TWO_PI);
        bvn += std_normal_cdf(-h) * std_normal_cdf(-k);
        return bvn;
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(bs / as_ + hk) / 2.0).exp()
            * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-hk / 2.0).exp()
                * TWO_PI.sqrt()
                * std_normal_cdf(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in quad {
            for sign in [-1.0, 1.0] {
                let xs = (a * (sign * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(bs / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / TWO_PI;
    }
    if r > 0.0 {
        bvn += std_normal_cdf(-h.max(k));
    } else {
        bvn = -bvn;
        if k > h {
            if h < 0.0 {
                bvn += std_normal_cdf(k) - std_normal_cdf(h);
            } else {
                bvn += std_normal_cdf(-h) - std_normal_cdf(-k);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

// Gauss–Kronrod 7/15 nodes (non-negative half) and weights.
const GK15_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK15_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const GK15_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Adaptive Gauss–Kronrod quadrature of `f` over `[a, b]` to absolute
/// accuracy `tol`; returns the integral and the summed error estimate.
fn gauss_kronrod(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> (f64, f64) {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let (mut kr, mut ga) = (0.0, 0.0);
    for i in 0..8 {
        let x = GK15_X[i];
        let fx = if x == 0.0 { f(c) } else { f(c - h * x) + f(c + h * x) };
        kr += GK15_WK[i] * fx;
        // Gauss nodes are the odd-indexed Kronrod nodes
        if i % 2 == 1 {
            ga += GK15_WG[i / 2] * fx;
        }
    }
    let (kr, ga) = (kr * h, ga * h);
    let err = (kr - ga).abs();
    if err <= tol || depth == 0 {
        return (kr, err);
    }
    let (l, el) = gauss_kronrod(f, a, c, 0.5 * tol, depth - 1);
    let (r, er) = gauss_kronrod(f, c, b, 0.5 * tol, depth - 1);
    (l + r, el + er)
}

/// Trivariate CDF by conditioning on one coordinate: the remaining pair is
/// bivariate normal given `X_i = x`, integrated against `φ(x)`. Conditioning
/// is on the coordinate least correlated with the others; `None` when that
/// still leaves a (near-)degenerate conditional pair.
fn tvn_cdf(upper: &[f64], m: &DMatrix<f64>, tol: f64) -> Option<(f64, f64)> {
    let pick = (0..3)
        .min_by(|&a, &b| {
            let worst = |i: usize| (0..3).filter(|&j| j != i).map(|j| m[(i, j)].abs()).fold(0.0, f64::max);
            worst(a).total_cmp(&worst(b))
        })
        .unwrap();
    let (j, k) = match pick {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (rj, rk) = (m[(pick, j)], m[(pick, k)]);
    let (sj, sk) = ((1.0 - rj * rj).sqrt(), (1.0 - rk * rk).sqrt());
    if !(sj > 1e-4 && sk > 1e-4) {
        return None;
    }
    let rjk = ((m[(j, k)] - rj * rk) / (sj * sk)).clamp(-1.0, 1.0);
    let (a, bj, bk) = (upper[pick], upper[j], upper[k]);
    let lo = -38.0;
    if a <= lo {
        return Some((0.0, 0.0));
    }
    let f = |x: f64| {
        let pdf = (-0.5 * x * x).exp() / TWO_PI.sqrt();
        pdf * bvn_cdf((bj - rj * x) / sj, (bk - rk * x) / sk, rjk)
    };
    // φ is negligible below -9 relative to any tolerance used here
    let start = lo.max(a.min(0.0) - 9.0);
    let (v, e) = gauss_kronrod(&f, start, a, 0.1 * tol, 30);
    Some((v.clamp(0.0, 1.0), e))
}

/// Cholesky factor with Genz–Bretz variable prioritization. Returns the
/// permuted limits and the lower-triangular factor; zero pivots mark
/// linearly dependent coordinates.
fn pivoted_cholesky(m: &DMatrix<f64>, upper: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut b = upper.to_vec();
    let mut c = DMatrix::<f64>::zeros(n, n);
    let eps = 1e-10;
    for i in 0..n {
        // choose the remaining coordinate with smallest conditional probability
        let mut best = i;
        let mut best_p = f64::INFINITY;
        for j in i..n {
            let s: f64 = (0..i).map(|l| c[(j, l)] * c[(j, l)]).sum();
            let var = a[(j, j)] - s;
            if var < -1e-8 {
                return Err(Error::domain("correlation matrix is not positive semi-definite"));
            }
            let p = if var > eps {
                std_normal_cdf(b[j] / var.sqrt())
            } else {
                2.0
            };
            if p < best_p {
                best_p = p;
                best = j;
            }
        }
        if best != i {
            a.swap_rows(i, best);
            a.swap_columns(i, best);
            c.swap_rows(i, best);
            b.swap(i, best);
        }
        let s: f64 = (0..i).map(|l| c[(i, l)] * c[(i, l)]).sum();
        let var = a[(i, i)] - s;
        if var <= eps {
            // remaining coordinates are (numerically) determined by earlier ones;
            // verify the Schur complement vanishes
            for j in i..n {
                let sj: f64 = (0..i).map(|l| c[(j, l)] * c[(j, l)]).sum();
                if (a[(j, j)] - sj).abs() > 1e-8 {
                    return Err(Error::domain("correlation matrix is not positive semi-definite"));
                }
            }
            break;
        }
        let d = var.sqrt();
        c[(i, i)] = d;
        for j in (i + 1)..n {
            let s: f64 = (0..i).map(|l| c[(j, l)] * c[(i, l)]).sum();
            c[(j, i)] = (a[(j, i)] - s) / d;
        }
    }
    Ok((b, c))
}

const RICHTMYER_PRIMES: [f64; 11] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0];

fn genz_sov(upper: &[f64], corr: &DMatrix<f64>, tol: f64, seed: u64) -> Result<(f64, f64)> {
    let n = upper.len();
    let (b, c) = pivoted_cholesky(corr, upper)?;
    let dim = n - 1;
    let gen: Vec<f64> = RICHTMYER_PRIMES[..dim].iter().map(|p| p.sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<Vec<f64>> = (0..SHIFTS)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect();

    let integrand = |w: &[f64], y: &mut [f64]| -> f64 {
        let mut prod = 1.0;
        for i in 0..n {
            let s: f64 = (0..i).map(|j| c[(i, j)] * y[j]).sum();
            let cii = c[(i, i)];
            let e = if cii > 0.0 {
                std_normal_cdf((b[i] - s) / cii)
            } else if b[i] - s >= 0.0 {
                1.0
            } else {
                0.0
            };
            prod *= e;
            if prod == 0.0 {
                return 0.0;
            }
            if i + 1 < n && cii > 0.0 {
                let u = (w[i] * e).clamp(1e-300, 1.0 - 1e-16);
                y[i] = std_normal_quantile(u);
            }
        }
        prod
    };

    let mut sums = [0.0f64; SHIFTS];
    let mut count = 0usize;
    let mut target = 256usize;
    let mut w = vec![0.0; dim];
    let mut wa = vec![0.0; dim];
    let mut y = vec![0.0; n];
    loop {
        for k in (count + 1)..=target {
            let kf = k as f64;
            for (r, shift) in shifts.iter().enumerate() {
                for d in 0..dim {
                    let x = (kf * gen[d] + shift[d]).fract();
                    // tent periodization
                    let t = (2.0 * x - 1.0).abs();
                    w[d] = t;
                    wa[d] = 1.0 - t;
                }
                let v = 0.5 * (integrand(&w, &mut y) + integrand(&wa, &mut y));
                sums[r] += v;
            }
        }
        count = target;
        let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let mean = means.iter().sum::<f64>() / SHIFTS as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (SHIFTS * (SHIFTS - 1)) as f64;
        let err = 3.0 * var.sqrt();
        if err <= tol {
            return Ok((mean.clamp(0.0, 1.0), err));
        }
        if 2 * target * SHIFTS * 2 > MAX_EVALUATIONS {
            return Err(Error::Numeric(format!(
                "mvn_cdf did not reach tolerance {tol:e} (estimate {mean}, error {err:e})"
            )));
        }
        target *= 2;
    }
}
