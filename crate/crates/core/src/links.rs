//! Inverse-link families `F`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFamily {
    Probit,
    Logit,
    /// Minimum extreme value distribution, `F(x) = 1 − exp(−exp(x))`.
    #[serde(rename = "cloglog")]
    CloglogInv,
}

/// log(1 − exp(a)) for a ≤ 0.
#[inline]
fn log1mexp(a: f64) -> f64 {
    if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

#[inline]
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

impl LinkFamily {
    pub fn name(self) -> &'static str {
        match self {
            LinkFamily::Probit => "probit",
            LinkFamily::Logit => "logit",
            LinkFamily::CloglogInv => "cloglog",
        }
    }

    pub fn cdf(self, x: f64) -> f64 {
        match self {
            LinkFamily::Probit => normal::cdf(x),
            LinkFamily::Logit => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            LinkFamily::CloglogInv => -(-x.exp()).exp_m1(),
        }
    }

    /// 1 − F(x).
    pub fn sf(self, x: f64) -> f64 {
        match self {
            LinkFamily::Probit => normal::sf(x),
            LinkFamily::Logit => LinkFamily::Logit.cdf(-x),
            LinkFamily::CloglogInv => (-x.exp()).exp(),
        }
    }

    pub fn log_cdf(self, x: f64) -> f64 {
        match self {
            LinkFamily::Probit => normal::log_cdf(x),
            LinkFamily::Logit => -softplus(-x),
            LinkFamily::CloglogInv => {
                let u = x.exp();
                if u < 1e-10 {
                    x - 0.5 * u
                } else {
                    log1mexp(-u)
                }
            }
        }
    }

    pub fn log_sf(self, x: f64) -> f64 {
        match self {
            LinkFamily::Probit => normal::log_sf(x),
            LinkFamily::Logit => -softplus(x),
            LinkFamily::CloglogInv => -x.exp(),
        }
    }

    pub fn pdf(self, x: f64) -> f64 {
        self.logpdf(x).exp()
    }

    /// log f(x), evaluated directly in log space.
    pub fn logpdf(self, x: f64) -> f64 {
        match self {
            LinkFamily::Probit => normal::logpdf(x),
            LinkFamily::Logit => -x.abs() - 2.0 * (-x.abs()).exp().ln_1p(),
            LinkFamily::CloglogInv => x - x.exp(),
        }
    }

    /// F⁻¹(p); domain error unless 0 < p < 1.
    pub fn quantile(self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!(
                "{} quantile requires 0 < p < 1, got {p}",
                self.name()
            )));
        }
        Ok(match self {
            LinkFamily::Probit => normal::quantile(p),
            LinkFamily::Logit => (p / (1.0 - p)).ln(),
            LinkFamily::CloglogInv => (-(-p).ln_1p()).ln(),
        })
    }

    /// F⁻¹(exp(logp)).
    pub fn quantile_log(self, logp: f64) -> f64 {
        match self {
            LinkFamily::Probit => normal::quantile_log(logp),
            LinkFamily::Logit => logp - log1mexp(logp),
            LinkFamily::CloglogInv => (-log1mexp(logp)).ln(),
        }
    }

    /// x such that 1 − F(x) = exp(logq).
    pub fn quantile_log_sf(self, logq: f64) -> f64 {
        match self {
            LinkFamily::Probit => normal::quantile_log_sf(logq),
            LinkFamily::Logit => log1mexp(logq) - logq,
            LinkFamily::CloglogInv => (-logq).ln(),
        }
    }

    /// Φ⁻¹(F(x)), routed through whichever tail keeps precision.
    pub fn probit_of(self, x: f64) -> f64 {
        if self == LinkFamily::Probit || x.is_infinite() {
            return x;
        }
        let lc = self.log_cdf(x);
        let ls = self.log_sf(x);
        if lc <= ls {
            normal::quantile_log(lc)
        } else {
            normal::quantile_log_sf(ls)
        }
    }

    /// F⁻¹(Φ(z)), the inverse of [`probit_of`](Self::probit_of).
    pub fn from_probit(self, z: f64) -> f64 {
        if self == LinkFamily::Probit || z.is_infinite() {
            return z;
        }
        if z <= 0.0 {
            self.quantile_log(normal::log_cdf(z))
        } else {
            self.quantile_log_sf(normal::log_sf(z))
        }
    }
}

impl fmt::Display for LinkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "probit" => Ok(LinkFamily::Probit),
            "logit" => Ok(LinkFamily::Logit),
            "cloglog" => Ok(LinkFamily::CloglogInv),
            other => Err(Error::Domain(format!(
                "unknown link '{other}' (expected probit, logit or cloglog)"
            ))),
        }
    }
}
