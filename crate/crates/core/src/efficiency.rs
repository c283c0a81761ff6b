//! Asymptotic relative efficiency of the marginal-weighted estimator to the
//! partial-likelihood estimator under proportional hazards.
//!
//! The design is fixed: unit baseline hazard, a Bernoulli(`p`) covariate and
//! lognormal censoring with log-mean 0. For that design the general
//! `v(beta0, t) s0(beta0, t)` terms collapse to
//!
//! ```text
//! A(b, t) = a c / (a + c),  a = (1-p) e^{-t},  c = p e^b exp(-t e^b)
//! ```
//!
//! and with `G(t) = P(C >= t)`
//!
//! ```text
//! S0 = int A G,   S1 = int A,   S2 = int A / G,   ratio = S1^2 / (S0 S2).
//! ```

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quadrature::integrate;

/// How the second lognormal parameter `t_c` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LognormalScale {
    /// `t_c` is the standard deviation of `log C`.
    #[default]
    LogSd,
    /// `t_c` is the variance of `log C`.
    LogVariance,
}

impl std::str::FromStr for LognormalScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log-sd" | "sd" => Ok(LognormalScale::LogSd),
            "log-variance" | "variance" | "var" => Ok(LognormalScale::LogVariance),
            _ => Err(Error::arg(format!("unknown lognormal scale `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AREConfig {
    pub beta0: f64,
    pub p: f64,
    pub t_c: f64,
    pub tol: f64,
    pub scale: LognormalScale,
}

impl AREConfig {
    pub fn new(beta0: f64, p: f64, t_c: f64) -> Self {
        AREConfig {
            beta0,
            p,
            t_c,
            tol: 1e-8,
            scale: LognormalScale::LogSd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta0.is_finite() {
            return Err(Error::arg("beta0 must be finite"));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::arg(format!("p = {} outside (0, 1)", self.p)));
        }
        if !(self.t_c > 0.0 && self.t_c.is_finite()) {
            return Err(Error::arg(format!("t_c = {} must be positive", self.t_c)));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::arg("quadrature tolerance must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Standard deviation of `log C`.
    pub fn sigma(&self) -> f64 {
        match self.scale {
            LognormalScale::LogSd => self.t_c,
            LognormalScale::LogVariance => self.t_c.sqrt(),
        }
    }

    /// `P(C >= t)`
    pub fn censoring_survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        0.5 * erfc(t.ln() / (self.sigma() * std::f64::consts::SQRT_2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AREResult {
    pub sigma0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub ratio: f64,
    pub censoring_fraction: f64,
}

pub fn a_function(beta: f64, p: f64, t: f64) -> f64 {
    let a = (1.0 - p) * (-t).exp();
    let c = p * (beta - t * beta.exp()).exp();
    if a == 0.0 || c == 0.0 {
        return 0.0;
    }
    1.0 / (1.0 / a + 1.0 / c)
}

/// Finds an upper limit beyond which `f` stays below `1e-14` of its peak.
///
/// `f` is scanned on a doubling grid; the limit is accepted only once `f`
/// is also decreasing over the next doubling, i.e. the exponential decay of
/// `A` has overtaken any growth from the censoring term.
fn truncation_point<F: Fn(f64) -> f64>(f: &F) -> Result<(f64, f64)> {
    let peak = (0..=400)
        .map(|k| f(k as f64 * 0.05))
        .fold(0.0, f64::max);
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Quadrature("integrand has no finite positive peak".into()));
    }
    let mut t = 1.0;
    while t < 1e5 {
        let here = f(t);
        if !here.is_finite() {
            return Err(Error::Quadrature(format!("integrand not finite at t = {t}")));
        }
        if here < 1e-14 * peak && f(2.0 * t) <= here && f(1.5 * t) <= here {
            return Ok((t, peak));
        }
        t *= 2.0;
    }
    Err(Error::Quadrature(
        "integrand tail does not decay: censoring term dominates".into(),
    ))
}

fn improper<F: Fn(f64) -> f64>(f: F, tol: f64) -> Result<f64> {
    let (upper, peak) = truncation_point(&f)?;
    let abs_tol = 1e-16 * peak;
    let head = integrate(&f, 0.0, upper.min(1.0), tol, abs_tol)?.value;
    let tail = if upper > 1.0 {
        integrate(&f, 1.0, upper, tol, abs_tol)?.value
    } else {
        0.0
    };
    Ok(head + tail)
}

pub fn sigma_integrals(config: &AREConfig) -> Result<(f64, f64, f64)> {
    config.validate()?;
    let (b, p) = (config.beta0, config.p);
    let a = |t: f64| a_function(b, p, t);
    let s0 = improper(|t| a(t) * config.censoring_survival(t), config.tol)?;
    let s1 = improper(a, config.tol)?;
    let s2 = improper(
        |t| {
            let v = a(t);
            if v == 0.0 {
                0.0
            } else {
                v / config.censoring_survival(t)
            }
        },
        config.tol,
    )?;
    Ok((s0, s1, s2))
}

/// `P(C < T)` for `T | Z=0 ~ Exp(1)`, `T | Z=1 ~ Exp(e^beta0)`.
pub fn censoring_fraction(config: &AREConfig) -> Result<f64> {
    config.validate()?;
    let mut total = 0.0;
    for (weight, rate) in [(1.0 - config.p, 1.0), (config.p, config.beta0.exp())] {
        let f = |t: f64| rate * (-rate * t).exp() * (1.0 - config.censoring_survival(t));
        let upper = 40.0 / rate;
        total += weight * integrate(f, 0.0, upper, config.tol, 1e-15)?.value;
    }
    Ok(total)
}

pub fn relative_efficiency(config: &AREConfig) -> Result<AREResult> {
    let (sigma0, sigma1, sigma2) = sigma_integrals(config)?;
    Ok(AREResult {
        sigma0,
        sigma1,
        sigma2,
        ratio: sigma1 * sigma1 / (sigma0 * sigma2),
        censoring_fraction: censoring_fraction(config)?,
    })
}

/// The grid of the published efficiency table: `beta0` in {0.5, 1, 2},
/// `t_c` in {1, 0.5}, `p` in {0.25, 0.5, 0.75}, ordered by `t_c`, then
/// `beta0`, then `p`.
pub fn default_grid() -> Vec<AREConfig> {
    let mut grid = Vec::new();
    for t_c in [1.0, 0.5] {
        for beta0 in [0.5, 1.0, 2.0] {
            for p in [0.25, 0.5, 0.75] {
                grid.push(AREConfig::new(beta0, p, t_c));
            }
        }
    }
    grid
}
