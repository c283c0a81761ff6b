//! Marginal survival curves used as estimating-equation weights.
//!
//! A curve is either empirical (Kaplan-Meier), a fitted parametric family,
//! or an external step curve read from disk (for example a population life
//! table). Step curves are always evaluated left-continuously: `S(t)` is
//! the value *before* any jump at `t`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SurvivalDataset;
use crate::error::{Error, Result};

/// Left-continuous, nonincreasing step function with `S(0) = 1`.
///
/// `values[k]` is the survival probability on `(jump_times[k], jump_times[k + 1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvival {
    jump_times: Vec<f64>,
    values: Vec<f64>,
}

impl StepSurvival {
    pub fn new(jump_times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if jump_times.len() != values.len() {
            return Err(Error::data("jump times and values differ in length"));
        }
        if jump_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::data("jump times must be finite and nonnegative"));
        }
        if jump_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::data("jump times must be strictly ascending"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data("survival values must lie in [0, 1]"));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::data("survival values must be nonincreasing"));
        }
        Ok(StepSurvival { jump_times, values })
    }

    /// The constant curve `S = 1`.
    pub fn one() -> Self {
        StepSurvival {
            jump_times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.jump_times.partition_point(|&u| u < t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    /// Writes `time,survival` rows, starting with `(0, 1)` unless the curve
    /// already jumps at zero.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::data(e.to_string());
        w.write_record(["time", "survival"]).map_err(to_err)?;
        if self.jump_times.first() != Some(&0.0) {
            w.write_record(["0", "1"]).map_err(to_err)?;
        }
        for (t, s) in self.jump_times.iter().zip(&self.values) {
            w.write_record([t.to_string(), s.to_string()]).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::data(e.to_string()))
    }

    /// Reads a `time,survival` curve. The first row must be `(0, 1)`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        if header.len() != 2 || &header[0] != "time" || &header[1] != "survival" {
            return Err(Error::Parse {
                line: 1,
                msg: "header must be `time,survival`".into(),
            });
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let num = |k: usize| -> Result<f64> {
                rec[k].parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("malformed value `{}`", &rec[k]),
                })
            };
            let (t, s) = (num(0)?, num(1)?);
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Parse {
                    line,
                    msg: format!("survival {s} outside [0, 1]"),
                });
            }
            if let (Some(&pt), Some(&ps)) = (times.last(), values.last()) {
                if t <= pt {
                    return Err(Error::Parse {
                        line,
                        msg: "times must be strictly ascending".into(),
                    });
                }
                if s > ps {
                    return Err(Error::Parse {
                        line,
                        msg: "survival must be nonincreasing".into(),
                    });
                }
            } else if t != 0.0 || s != 1.0 {
                return Err(Error::Parse {
                    line,
                    msg: "curve must start at (0, 1)".into(),
                });
            }
            times.push(t);
            values.push(s);
        }
        if times.is_empty() {
            return Err(Error::data("curve has no rows"));
        }
        StepSurvival::new(times, values)
    }
}

/// Product-limit estimate of the marginal survival curve.
///
/// Jumps occur at distinct event times; the curve is held constant after
/// the last observation.
pub fn kaplan_meier(data: &SurvivalDataset) -> StepSurvival {
    let n = data.len();
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = data.time(i);
        let at_risk = (n - i) as f64;
        let mut deaths = 0usize;
        let mut j = i;
        while j < n && data.time(j) == t {
            deaths += data.event(j) as usize;
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk;
            times.push(t);
            values.push(s);
        }
        i = j;
    }
    StepSurvival { jump_times: times, values }
}

/// A marginal survival model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MarginalModel {
    Exponential { rate: f64 },
    Weibull { shape: f64, scale: f64 },
    /// Hazard `rates[k]` on `[cuts[k-1], cuts[k])`, with `cuts[-1] = 0` and
    /// the last rate applying from the last cut onwards.
    PiecewiseExponential { cuts: Vec<f64>, rates: Vec<f64> },
    Lognormal { mu: f64, sigma: f64 },
    Empirical { curve: StepSurvival },
    ExternalCurve { curve: StepSurvival },
}

fn lognormal_sf(t: f64, mu: f64, sigma: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    0.5 * statrs::function::erf::erfc((t.ln() - mu) / (sigma * std::f64::consts::SQRT_2))
}

impl MarginalModel {
    pub fn exponential(rate: f64) -> Result<Self> {
        let m = MarginalModel::Exponential { rate };
        m.validate()?;
        Ok(m)
    }

    pub fn weibull(shape: f64, scale: f64) -> Result<Self> {
        let m = MarginalModel::Weibull { shape, scale };
        m.validate()?;
        Ok(m)
    }

    pub fn piecewise_exponential(cuts: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        let m = MarginalModel::PiecewiseExponential { cuts, rates };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64, what: &str| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(Error::arg(format!("{what} must be positive, got {x}")))
            }
        };
        match self {
            MarginalModel::Exponential { rate } => pos(*rate, "rate"),
            MarginalModel::Weibull { shape, scale } => {
                pos(*shape, "shape")?;
                pos(*scale, "scale")
            }
            MarginalModel::PiecewiseExponential { cuts, rates } => {
                validate_cuts(cuts)?;
                if rates.len() != cuts.len() + 1 {
                    return Err(Error::arg("piecewise exponential needs one more rate than cuts"));
                }
                // fitted intervals without events legitimately have rate 0
                if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::arg("piecewise rates must be finite and nonnegative"));
                }
                Ok(())
            }
            MarginalModel::Lognormal { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(Error::arg("mu must be finite"));
                }
                pos(*sigma, "sigma")
            }
            MarginalModel::Empirical { .. } | MarginalModel::ExternalCurve { .. } => Ok(()),
        }
    }

    pub fn survival_at(&self, t: f64) -> f64 {
        match self {
            MarginalModel::Lognormal { mu, sigma } => lognormal_sf(t, *mu, *sigma),
            MarginalModel::Empirical { curve } | MarginalModel::ExternalCurve { curve } => {
                curve.eval(t)
            }
            _ => (-self.cumulative_hazard(t).expect("closed-form family")).exp(),
        }
    }

    /// Closed-form cumulative hazard for the exponential, Weibull and
    /// piecewise-exponential families.
    pub fn cumulative_hazard(&self, t: f64) -> Option<f64> {
        let t = t.max(0.0);
        match self {
            MarginalModel::Exponential { rate } => Some(rate * t),
            MarginalModel::Weibull { shape, scale } => Some((t / scale).powf(*shape)),
            MarginalModel::PiecewiseExponential { cuts, rates } => {
                let mut h = 0.0;
                let mut lo = 0.0;
                for (k, &rate) in rates.iter().enumerate() {
                    let hi = cuts.get(k).copied().unwrap_or(f64::INFINITY);
                    if t <= lo {
                        break;
                    }
                    h += rate * (t.min(hi) - lo);
                    lo = hi;
                }
                Some(h)
            }
            MarginalModel::Lognormal { mu, sigma } => {
                Some(-lognormal_sf(t, *mu, *sigma).ln())
            }
            _ => None,
        }
    }

    /// Smallest `t` with `cumulative_hazard(t) = h`; infinite if the hazard
    /// never accumulates that much.
    pub fn inverse_cumulative_hazard(&self, h: f64) -> Option<f64> {
        match self {
            MarginalModel::Exponential { rate } => Some(h / rate),
            MarginalModel::Weibull { shape, scale } => Some(scale * h.powf(1.0 / shape)),
            MarginalModel::PiecewiseExponential { cuts, rates } => {
                let mut acc = 0.0;
                let mut lo = 0.0;
                for (k, &rate) in rates.iter().enumerate() {
                    let hi = cuts.get(k).copied().unwrap_or(f64::INFINITY);
                    let step = rate * (hi - lo);
                    if h <= acc + step {
                        return Some(if rate > 0.0 { lo + (h - acc) / rate } else { lo });
                    }
                    acc += step;
                    lo = hi;
                }
                Some(f64::INFINITY)
            }
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MarginalModel::Exponential { .. } => "exponential",
            MarginalModel::Weibull { .. } => "weibull",
            MarginalModel::PiecewiseExponential { .. } => "pwexp",
            MarginalModel::Lognormal { .. } => "lognormal",
            MarginalModel::Empirical { .. } => "empirical",
            MarginalModel::ExternalCurve { .. } => "curve",
        }
    }
}

fn validate_cuts(cuts: &[f64]) -> Result<()> {
    if cuts.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(Error::arg("cuts must be finite and positive"));
    }
    if cuts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("cuts must be strictly ascending"));
    }
    Ok(())
}

/// Censored-data MLE of an exponential rate: events over total exposure.
pub fn fit_exponential(data: &SurvivalDataset) -> Result<MarginalModel> {
    let events = data.event_count();
    if events == 0 {
        return Err(Error::data("exponential fit needs at least one event"));
    }
    let exposure = data.exposure();
    if exposure <= 0.0 {
        return Err(Error::data("exponential fit needs positive exposure"));
    }
    Ok(MarginalModel::Exponential {
        rate: events as f64 / exposure,
    })
}

/// Conjugate Gamma(shape, rate) prior on an exponential rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Posterior-mean exponential rate under a Gamma prior:
/// `(shape + events) / (rate + exposure)`.
pub fn map_exponential(data: &SurvivalDataset, prior: GammaPrior) -> Result<MarginalModel> {
    if !(prior.shape > 0.0 && prior.rate > 0.0) {
        return Err(Error::arg("prior shape and rate must be positive"));
    }
    let rate = (prior.shape + data.event_count() as f64) / (prior.rate + data.exposure());
    Ok(MarginalModel::Exponential { rate })
}

/// Interval-wise events over person-time. An empty cut list gives the
/// plain exponential fit.
pub fn fit_piecewise_exponential(data: &SurvivalDataset, cuts: &[f64]) -> Result<MarginalModel> {
    validate_cuts(cuts)?;
    let k = cuts.len() + 1;
    let mut events = vec![0usize; k];
    let mut exposure = vec![0.0; k];
    for s in data.subjects() {
        let mut lo = 0.0;
        for j in 0..k {
            let hi = cuts.get(j).copied().unwrap_or(f64::INFINITY);
            if s.time < lo {
                break;
            }
            exposure[j] += s.time.min(hi) - lo;
            if s.event && s.time < hi {
                events[j] += 1;
            }
            lo = hi;
        }
    }
    if let Some(j) = exposure.iter().position(|&e| e <= 0.0) {
        return Err(Error::data(format!("interval {} has zero exposure", j + 1)));
    }
    if events.iter().all(|&e| e == 0) {
        return Err(Error::data("piecewise exponential fit needs at least one event"));
    }
    let rates = events
        .iter()
        .zip(&exposure)
        .map(|(&e, &x)| e as f64 / x)
        .collect();
    Ok(MarginalModel::PiecewiseExponential {
        cuts: cuts.to_vec(),
        rates,
    })
}

const WEIBULL_MAX_ITER: usize = 100;
const WEIBULL_GRAD_TOL: f64 = 1e-8;

/// Censored Weibull MLE by damped Newton on the shape profile likelihood.
pub fn fit_weibull(data: &SurvivalDataset) -> Result<MarginalModel> {
    let mut event_times: Vec<f64> = data
        .subjects()
        .iter()
        .filter(|s| s.event)
        .map(|s| s.time)
        .collect();
    event_times.dedup();
    if event_times.len() < 2 {
        return Err(Error::data("Weibull fit needs at least two distinct event times"));
    }

    // work on times rescaled to (0, 1] so that y^k stays bounded
    let xmax = data.max_time();
    let ys: Vec<(f64, f64, bool)> = data
        .subjects()
        .iter()
        .filter(|s| s.time > 0.0)
        .map(|s| {
            let y = s.time / xmax;
            (y, y.ln(), s.event)
        })
        .collect();
    let d = data.event_count() as f64;
    let sum_log_events: f64 = ys.iter().filter(|r| r.2).map(|r| r.1).sum();

    let profile = |k: f64| -> (f64, f64, f64, f64) {
        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
        for &(y, ly, _) in &ys {
            let p = y.powf(k);
            a0 += p;
            a1 += p * ly;
            a2 += p * ly * ly;
        }
        let m1 = a1 / a0;
        let loglik = d * k.ln() - d * (a0 / d).ln() + (k - 1.0) * sum_log_events - d;
        let grad = d / k + sum_log_events - d * m1;
        let hess = -d / (k * k) - d * (a2 / a0 - m1 * m1);
        (loglik, grad, hess, a0)
    };

    let mut k = weibull_moment_shape(&event_times);
    let (mut ll, mut g, mut h, mut a0) = profile(k);
    let mut iter = 0;
    while g.abs() >= WEIBULL_GRAD_TOL {
        if iter == WEIBULL_MAX_ITER {
            return Err(Error::NoConvergence {
                what: "Weibull fit",
                iterations: iter,
            });
        }
        iter += 1;
        let mut step = -g / h;
        let mut halvings = 0;
        loop {
            let cand = k + step;
            if cand > 0.0 {
                let next = profile(cand);
                if next.0.is_finite() && next.0 >= ll - 1e-12 * ll.abs() {
                    k = cand;
                    (ll, g, h, a0) = next;
                    break;
                }
            }
            step *= 0.5;
            halvings += 1;
            if halvings > 60 {
                return Err(Error::NoConvergence {
                    what: "Weibull fit",
                    iterations: iter,
                });
            }
        }
    }
    let scale = xmax * (a0 / d).powf(1.0 / k);
    Ok(MarginalModel::Weibull { shape: k, scale })
}

fn weibull_moment_shape(times: &[f64]) -> f64 {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let cv = var.sqrt() / mean;
    cv.powf(-1.086).clamp(0.1, 20.0)
}

/// Reads an external `time,survival` step curve.
pub fn load_external_curve(path: impl AsRef<Path>) -> Result<MarginalModel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(MarginalModel::ExternalCurve {
        curve: StepSurvival::from_reader(file)?,
    })
}

/// Parametric families that can be fitted to data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParametricFamily {
    Exponential,
    Weibull,
    PiecewiseExponential { cuts: Vec<f64> },
}

impl ParametricFamily {
    pub fn fit(&self, data: &SurvivalDataset) -> Result<MarginalModel> {
        match self {
            ParametricFamily::Exponential => fit_exponential(data),
            ParametricFamily::Weibull => fit_weibull(data),
            ParametricFamily::PiecewiseExponential { cuts } => fit_piecewise_exponential(data, cuts),
        }
    }

    /// The family a model belongs to, if it is a fittable one.
    pub fn of(model: &MarginalModel) -> Option<Self> {
        match model {
            MarginalModel::Exponential { .. } => Some(ParametricFamily::Exponential),
            MarginalModel::Weibull { .. } => Some(ParametricFamily::Weibull),
            MarginalModel::PiecewiseExponential { cuts, .. } => {
                Some(ParametricFamily::PiecewiseExponential { cuts: cuts.clone() })
            }
            _ => None,
        }
    }
}

impl FromStr for ParametricFamily {
    type Err = Error;

    /// `exponential`, `weibull` or `pwexp:c1,c2,...`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(ParametricFamily::Exponential),
            "weibull" => Ok(ParametricFamily::Weibull),
            _ => {
                let cuts = s
                    .strip_prefix("pwexp:")
                    .or_else(|| s.strip_prefix("pwexp").filter(|r| r.is_empty()))
                    .ok_or_else(|| Error::arg(format!("unknown family `{s}`")))?;
                let cuts = cuts
                    .split(',')
                    .filter(|c| !c.is_empty())
                    .map(|c| {
                        c.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::arg(format!("bad cut `{c}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                validate_cuts(&cuts)?;
                Ok(ParametricFamily::PiecewiseExponential { cuts })
            }
        }
    }
}

impl fmt::Display for ParametricFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParametricFamily::Exponential => f.write_str("exponential"),
            ParametricFamily::Weibull => f.write_str("weibull"),
            ParametricFamily::PiecewiseExponential { cuts } => {
                let c: Vec<String> = cuts.iter().map(|c| c.to_string()).collect();
                write!(f, "pwexp:{}", c.join(","))
            }
        }
    }
}
