//! Scalar special functions plus the multivariate normal CDF and
//! Gauss–Hermite rules used throughout the crate.

mod hermite;
mod mvn;

pub use hermite::{gh_nodes, GaussHermite};
pub use mvn::{bvn_cdf, mvn_cdf, CorrelationMatrix, MVN_MAX_DIM};

use crate::error::{Error, Result};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
pub const SQRT_PI: f64 = 1.772_453_850_905_516;

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural logarithm of the gamma function for positive arguments.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::domain(format!("log_gamma requires a finite x > 0, got {x}")));
    }
    Ok(ln_gamma(x))
}

/// Unchecked `ln Γ(x)`; callers guarantee `x > 0`.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // shift up once: ln Γ(x) = ln Γ(x + 1) - ln x
        return ln_gamma_lanczos(x + 1.0) - x.ln();
    }
    if x >= 15.0 {
        return ln_gamma_stirling(x);
    }
    ln_gamma_lanczos(x)
}

fn ln_gamma_lanczos(x: f64) -> f64 {
    let z = x - 1.0;
    let mut a = LANCZOS[0];
    let t = z + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    LN_SQRT_2PI + (z + 0.5) * t.ln() - t + a.ln()
}

fn ln_gamma_stirling(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series, truncation below 1e-17 relative for x >= 15
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))));
    (x - 0.5) * x.ln() - x + LN_SQRT_2PI + series
}

/// `ln B(a, b)`.
pub(crate) fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub(crate) fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

pub const STIRLING_MAX: u32 = 30;

/// Stirling number of the second kind `S(k, l)`, exact for `k <= 30`.
pub fn stirling2(k: u32, l: u32) -> Result<u128> {
    if l > k {
        return Err(Error::domain(format!("stirling2 requires l <= k, got k={k}, l={l}")));
    }
    if k > STIRLING_MAX {
        return Err(Error::Overflow(format!(
            "stirling2 is limited to k <= {STIRLING_MAX}, got {k}"
        )));
    }
    let k = k as usize;
    let l = l as usize;
    let mut row = vec![0u128; k + 1];
    row[0] = 1;
    for n in 1..=k {
        // walk right-to-left so row[j - 1] still holds S(n - 1, j - 1)
        for j in (1..=n).rev() {
            row[j] = j as u128 * row[j] + row[j - 1];
        }
        row[0] = 0;
    }
    Ok(row[l])
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF `Φ(x)`.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)` without cancellation.
pub fn std_normal_sf(x: f64) -> f64 {
    std_normal_cdf(-x)
}

/// `ln Φ(x)`, accurate far into the lower tail.
pub fn ln_std_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_cdf(x).ln();
    }
    // asymptotic Mills-ratio expansion
    let z2 = 1.0 / (x * x);
    -0.5 * x * x - LN_SQRT_2PI - (-x).ln() + (1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2).ln()
}

/// `φ(x) / Φ(x)`.
pub fn normal_mills_ratio(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_pdf(x) / std_normal_cdf(x);
    }
    (-0.5 * x * x - LN_SQRT_2PI - ln_std_normal_cdf(x)).exp()
}

/// Inverse standard normal CDF (Wichura's AS 241, PPND16).
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2_509.080_928_730_122_7 * r + 33_430.575_583_588_13) * r
                + 67_265.770_927_008_7)
                * r
                + 45_921.953_931_549_87)
                * r
                + 13_731.693_765_509_46)
                * r
                + 1_971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5_226.495_278_852_545 * r + 28_729.085_735_721_943) * r
                + 39_307.895_800_092_71)
                * r
                + 21_213.794_301_586_597)
                * r
                + 5_394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
                + 1.519_866_656_361_645_7e-2)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_100_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 1.487_536_129_085_061_5e-2)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1_sf(w: f64) -> f64 {
    if w <= 0.0 {
        return 1.0;
    }
    libm::erfc((0.5 * w).sqrt())
}

/// Regularized upper incomplete gamma function `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let lead = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series for P(a, x)
        let (mut term, mut sum, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        1.0 - sum * lead.exp()
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        lead.exp() * h
    }
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_sf(w: f64, df: f64) -> f64 {
    if w <= 0.0 {
        return 1.0;
    }
    gamma_q(0.5 * df, 0.5 * w)
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
