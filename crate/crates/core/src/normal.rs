//! Standard normal distribution primitives with log-space tails.
//!
//! Everything downstream composes `Φ⁻¹ ∘ F` for arbitrary links, which is
//! unbounded. These routines stay accurate far into both tails by carrying
//! log-probabilities instead of probabilities.

use libm::erfc;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this, `erfc` underflows and the asymptotic series takes over.
const ASYMPTOTIC_CUTOFF: f64 = -37.0;

#[inline]
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn logpdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Φ(x).
#[inline]
pub fn cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// 1 − Φ(x), accurate for large positive x.
#[inline]
pub fn sf(x: f64) -> f64 {
    cdf(-x)
}

/// log Φ(x).
pub fn log_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x > 0.0 {
        return (-cdf(-x)).ln_1p();
    }
    if x > ASYMPTOTIC_CUTOFF {
        return cdf(x).ln();
    }
    // Mills ratio expansion: Φ(x) = φ(x)/|x| · (1 − 1/x² + 3/x⁴ − 15/x⁶ + 105/x⁸ …)
    let x2 = x * x;
    let inv = 1.0 / x2;
    let series = 1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv)));
    logpdf(x) - (-x).ln() + series.ln()
}

/// log(1 − Φ(x)).
#[inline]
pub fn log_sf(x: f64) -> f64 {
    log_cdf(-x)
}

/// log(Φ(b) − Φ(a)) is not needed directly; this returns Φ(b) − Φ(a) without
/// cancellation when both arguments sit in the upper tail.
#[inline]
pub fn interval_prob(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a > 0.0 {
        cdf(-a) - cdf(-b)
    } else {
        cdf(b) - cdf(a)
    }
}

/// Φ⁻¹(p) for p ∈ (0, 1); ±∞ at the endpoints, NaN outside.
pub fn quantile(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        return central(q);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let v = tail_value(r);
    if q < 0.0 {
        -v
    } else {
        v
    }
}

/// Φ⁻¹(exp(logp)), the lower-tail quantile from a log-probability.
pub fn quantile_log(logp: f64) -> f64 {
    if logp.is_nan() || logp > 0.0 {
        return f64::NAN;
    }
    if logp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if logp == 0.0 {
        return f64::INFINITY;
    }
    let p = logp.exp();
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        return central(q);
    }
    if q < 0.0 {
        let x = -tail_value((-logp).sqrt());
        if logp < -700.0 {
            refine_lower(x, logp)
        } else {
            x
        }
    } else {
        // upper tail: 1 − p = −expm1(logp) keeps full relative precision
        let log_upper = (-logp.exp_m1()).ln();
        tail_value((-log_upper).sqrt())
    }
}

/// x such that 1 − Φ(x) = exp(logq).
#[inline]
pub fn quantile_log_sf(logq: f64) -> f64 {
    -quantile_log(logq)
}

fn central(q: f64) -> f64 {
    let r = 0.180625 - q * q;
    q * (((((((r * 2509.0809287301227 + 33430.57558358813) * r + 67265.7709270087)
        * r
        + 45921.95393154987)
        * r
        + 13_731.693_765_509_46)
        * r
        + 1971.5909503065514)
        * r
        + 133.14166789178438)
        * r
        + 3.3871328727963665)
        / (((((((r * 5226.495278852546 + 28729.085735721943) * r + 39307.89580009271)
            * r
            + 21213.794301586597)
            * r
            + 5394.196021424751)
            * r
            + 687.1870074920579)
            * r
            + 42.31333070160091)
            * r
            + 1.0)
}

/// Positive tail quantile given r = sqrt(−log(tail probability)).
fn tail_value(r: f64) -> f64 {
    if r <= 5.0 {
        let r = r - 1.6;
        (((((((r * 7.745450142783414e-4 + 0.022723844989269184) * r
            + 0.2417807251774506)
            * r
            + 1.2704582524523684)
            * r
            + 3.6478483247632045)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((r * 1.050_750_071_644_416_8e-9 + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    }
}

/// Newton steps on log Φ(x) = logp for probabilities below the f64 range.
fn refine_lower(mut x: f64, logp: f64) -> f64 {
    for _ in 0..4 {
        let lc = log_cdf(x);
        // d/dx log Φ(x) = φ(x)/Φ(x) = exp(logpdf − logcdf)
        let slope = (logpdf(x) - lc).exp();
        let step = (lc - logp) / slope;
        x -= step;
        if step.abs() <= 1e-15 * x.abs() {
            break;
        }
    }
    x
}
