//! Data generation under `lambda(t|Z) = lambda0(t) exp{beta(t) Z}` with a
//! piecewise-constant `beta(t)`, censoring calibration, simulation studies
//! and population-level oracles for the limiting value of the estimators.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Subject, SurvivalDataset};
use crate::error::{Error, Result};
use crate::estimate::{SolveOptions, WeightScheme, WeightedScore};
use crate::marginal::{MarginalModel, ParametricFamily};
use crate::rng::{domain, substream};

/// Piecewise-constant, right-continuous coefficient function:
/// `values[k]` applies on `[changepoints[k-1], changepoints[k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BetaRepr")]
pub struct BetaFunction {
    #[serde(default)]
    changepoints: Vec<f64>,
    values: Vec<f64>,
}

/// A bare number in a config file means a constant coefficient.
#[derive(Deserialize)]
#[serde(untagged)]
enum BetaRepr {
    Constant(f64),
    Piecewise {
        #[serde(default)]
        changepoints: Vec<f64>,
        values: Vec<f64>,
    },
}

impl TryFrom<BetaRepr> for BetaFunction {
    type Error = Error;

    fn try_from(r: BetaRepr) -> Result<Self> {
        match r {
            BetaRepr::Constant(b) => BetaFunction::new(Vec::new(), vec![b]),
            BetaRepr::Piecewise { changepoints, values } => BetaFunction::new(changepoints, values),
        }
    }
}

impl std::fmt::Display for BetaFunction {
    /// `1` for a constant, `1|0.2|0` for a change at 0.2.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.values[0])?;
        for (c, v) in self.changepoints.iter().zip(&self.values[1..]) {
            write!(f, "|{c}|{v}")?;
        }
        Ok(())
    }
}

impl BetaFunction {
    pub fn new(changepoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let f = BetaFunction {
            changepoints,
            values,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn constant(beta: f64) -> Self {
        BetaFunction {
            changepoints: Vec::new(),
            values: vec![beta],
        }
    }

    /// `beta1 I(t < t0) + beta2 I(t >= t0)`
    pub fn change_point(beta1: f64, beta2: f64, t0: f64) -> Self {
        BetaFunction {
            changepoints: vec![t0],
            values: vec![beta1, beta2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.changepoints.len() + 1 {
            return Err(Error::arg("beta function needs one more value than changepoints"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("beta values must be finite"));
        }
        if self.changepoints.iter().any(|c| !(c.is_finite() && *c > 0.0))
            || self.changepoints.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::arg("changepoints must be positive and strictly ascending"));
        }
        Ok(())
    }

    pub fn changepoints(&self) -> &[f64] {
        &self.changepoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, t: f64) -> f64 {
        self.values[self.changepoints.partition_point(|&c| c <= t)]
    }

    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariate {
    Uniform01,
    Bernoulli { p: f64 },
}

impl Covariate {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Covariate::Uniform01 => rng.random::<f64>(),
            Covariate::Bernoulli { p } => (rng.random::<f64>() < p) as u8 as f64,
        }
    }
}

/// Censoring distribution; the scalar is the `t_c` of the design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Censoring {
    None,
    /// `C ~ U(0, upper)`
    Uniform { upper: f64 },
    /// `C ~ Exp(rate)`
    Exponential { rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringFamily {
    None,
    Uniform,
    Exponential,
}

impl std::str::FromStr for CensoringFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CensoringFamily::None),
            "uniform" => Ok(CensoringFamily::Uniform),
            "exponential" => Ok(CensoringFamily::Exponential),
            _ => Err(Error::arg(format!("unknown censoring family `{s}`"))),
        }
    }
}

impl Censoring {
    // C = v * scale with v ~ U(0,1) or Exp(1)
    fn from_scale(family: CensoringFamily, scale: f64) -> Self {
        match family {
            CensoringFamily::None => Censoring::None,
            CensoringFamily::Uniform => Censoring::Uniform { upper: scale },
            CensoringFamily::Exponential => Censoring::Exponential { rate: 1.0 / scale },
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Censoring::None => f64::INFINITY,
            Censoring::Uniform { upper } => upper * rng.random::<f64>(),
            Censoring::Exponential { rate } => {
                let e: f64 = Exp1.sample(rng);
                e / rate
            }
        }
    }

    pub fn parameter(&self) -> Option<f64> {
        match *self {
            Censoring::None => None,
            Censoring::Uniform { upper } => Some(upper),
            Censoring::Exponential { rate } => Some(rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Baseline hazard: exponential, Weibull or piecewise exponential.
    pub baseline: MarginalModel,
    pub beta: BetaFunction,
    pub covariate: Covariate,
    pub censoring: Censoring,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.baseline {
            MarginalModel::Exponential { .. }
            | MarginalModel::Weibull { .. }
            | MarginalModel::PiecewiseExponential { .. } => self.baseline.validate()?,
            other => {
                return Err(Error::arg(format!(
                    "baseline must be exponential, weibull or pwexp, got {}",
                    other.name()
                )))
            }
        }
        if let MarginalModel::PiecewiseExponential { rates, .. } = &self.baseline {
            if rates.iter().any(|r| *r <= 0.0) {
                return Err(Error::arg("baseline rates must be positive"));
            }
        }
        self.beta.validate()?;
        if let Covariate::Bernoulli { p } = self.covariate {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::arg("Bernoulli p must lie in (0, 1)"));
            }
        }
        match self.censoring {
            Censoring::Uniform { upper: x } | Censoring::Exponential { rate: x } if !(x > 0.0 && x.is_finite()) => {
                Err(Error::arg("censoring parameter must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn with_censoring(&self, censoring: Censoring) -> Self {
        GeneratorSpec {
            censoring,
            ..self.clone()
        }
    }

    /// Failure time by inversion of the conditional cumulative hazard.
    pub fn draw_survival_time<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> f64 {
        let target: f64 = Exp1.sample(rng);
        self.invert_hazard(z, target)
    }

    /// Smallest `t` with `Lambda(t | z) = target`.
    pub fn invert_hazard(&self, z: f64, target: f64) -> f64 {
        let base = &self.baseline;
        let cum = |t: f64| base.cumulative_hazard(t).expect("closed-form baseline");
        let cps = self.beta.changepoints();
        let mut acc = 0.0;
        let mut lo = 0.0;
        for (k, &b) in self.beta.values().iter().enumerate() {
            let m = (b * z).exp();
            let h_lo = cum(lo);
            match cps.get(k) {
                Some(&hi) => {
                    let inc = m * (cum(hi) - h_lo);
                    if target < acc + inc {
                        return base
                            .inverse_cumulative_hazard(h_lo + (target - acc) / m)
                            .expect("closed-form baseline")
                            .clamp(lo, hi);
                    }
                    acc += inc;
                    lo = hi;
                }
                None => {
                    return base
                        .inverse_cumulative_hazard(h_lo + (target - acc) / m)
                        .expect("closed-form baseline")
                        .max(lo);
                }
            }
        }
        unreachable!("beta function has a final segment")
    }

    pub fn draw_subject<R: Rng + ?Sized>(&self, rng: &mut R) -> Subject {
        let z = self.covariate.draw(rng);
        let t = self.draw_survival_time(z, rng);
        let c = self.censoring.draw(rng);
        if t <= c {
            Subject::new(t, true, vec![z])
        } else {
            Subject::new(c, false, vec![z])
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SurvivalDataset> {
        SurvivalDataset::new((0..n).map(|_| self.draw_subject(rng)).collect())
    }

    /// `E[beta0(T)]` with `T` distributed as the baseline, i.e.
    /// `sum_k values[k] (S0(c_{k-1}) - S0(c_k))`.
    pub fn expected_beta_baseline(&self) -> f64 {
        let cps = self.beta.changepoints();
        let mut prev = 1.0;
        let mut total = 0.0;
        for (k, &b) in self.beta.values().iter().enumerate() {
            let next = cps.get(k).map_or(0.0, |&c| self.baseline.survival_at(c));
            total += b * (prev - next);
            prev = next;
        }
        total
    }
}

/// Chooses the censoring parameter so that `P(T > C)` hits `target`.
///
/// Uses `n_mc` paired draws `(T, V)` with `C = V * s`, `V` uniform or unit
/// exponential, and bisects on the scale `s`; the same pairs are reused for
/// every candidate.
pub fn calibrate_censoring<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    family: CensoringFamily,
    target: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<Censoring> {
    if target == 0.0 {
        return Ok(Censoring::None);
    }
    if family == CensoringFamily::None {
        return Err(Error::arg("a positive censoring target needs a censoring family"));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::arg(format!("censoring target {target} outside [0, 1)")));
    }
    if n_mc < 1000 {
        return Err(Error::arg("calibration needs at least 1000 draws"));
    }
    let mut ratios: Vec<f64> = (0..n_mc)
        .map(|_| {
            let z = spec.covariate.draw(rng);
            let t = spec.draw_survival_time(z, rng);
            let v: f64 = match family {
                CensoringFamily::Uniform => rng.random(),
                _ => Exp1.sample(rng),
            };
            t / v
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let censored = |s: f64| (n_mc - ratios.partition_point(|&r| r <= s)) as f64 / n_mc as f64;

    // censored fraction decreases in s
    let (mut lo, mut hi) = (1.0, 1.0);
    let mut k = 0;
    while censored(lo) < target {
        lo *= 0.5;
        k += 1;
        if k > 200 {
            return Err(Error::arg("could not bracket the censoring scale from below"));
        }
    }
    while censored(hi) > target {
        hi *= 2.0;
        k += 1;
        if k > 400 {
            return Err(Error::arg("could not bracket the censoring scale from above"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if censored(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let s = if (censored(lo) - target).abs() < (censored(hi) - target).abs() {
        lo
    } else {
        hi
    };
    Ok(Censoring::from_scale(family, s))
}

/// Monte Carlo censored fraction of `spec`.
pub fn censored_fraction<R: Rng + ?Sized>(spec: &GeneratorSpec, n_mc: usize, rng: &mut R) -> f64 {
    let censored = (0..n_mc).filter(|_| !spec.draw_subject(rng).event).count();
    censored as f64 / n_mc as f64
}

/// Monte Carlo `E[beta0(T)]` over uncensored draws from the generator.
pub fn expected_beta<R: Rng + ?Sized>(spec: &GeneratorSpec, n_mc: usize, rng: &mut R) -> f64 {
    let mut sum = Neumaier::default();
    for _ in 0..n_mc {
        let z = spec.covariate.draw(rng);
        sum.add(spec.beta.at(spec.draw_survival_time(z, rng)));
    }
    sum.total() / n_mc as f64
}

/// Scalar limiting estimating equation built from a large sample.
///
/// Observed times are split into cells at the quantiles of the event times
/// (plus the coefficient changepoints); each cell contributes its event
/// mass times `E[Z | event at t] - e(beta, t)`, both evaluated on the risk
/// set at the cell's median event time.
struct LimitingEquation {
    z: Vec<f64>,
    // per cell: (index of first at-risk sample, mass, beta0 at the cell)
    cells: Vec<(usize, f64, f64)>,
    beta0_values: Vec<f64>,
    // E[Z | event at the cell] computed once
    first_term: Vec<f64>,
    v0: Vec<f64>,
}

impl LimitingEquation {
    fn new(mut sample: Vec<(f64, f64, bool)>, beta: &BetaFunction, grid_size: usize) -> Result<Self> {
        sample.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total = sample.len() as f64;
        let event_times: Vec<f64> = sample.iter().filter(|s| s.2).map(|s| s.0).collect();
        if event_times.len() < grid_size.max(2) {
            return Err(Error::arg("too few events for the oracle grid"));
        }
        let mut bounds: Vec<f64> = (1..grid_size)
            .map(|k| event_times[k * event_times.len() / grid_size])
            .chain(beta.changepoints().iter().copied())
            .collect();
        bounds.sort_by(f64::total_cmp);
        bounds.dedup();

        let mut cells = Vec::new();
        let mut start = 0;
        for upper in bounds.iter().copied().chain(std::iter::once(f64::INFINITY)) {
            let end = event_times.partition_point(|&t| t < upper);
            if end > start {
                let mid = event_times[(start + end) / 2];
                let first = sample.partition_point(|s| s.0 < mid);
                cells.push((first, (end - start) as f64 / total, beta.at(mid)));
            }
            start = end;
        }
        let z: Vec<f64> = sample.iter().map(|s| s.1).collect();
        let mut eq = LimitingEquation {
            z,
            cells,
            beta0_values: Vec::new(),
            first_term: Vec::new(),
            v0: Vec::new(),
        };
        let mut distinct: Vec<f64> = beta.values().to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let moments: Vec<Vec<(f64, f64)>> = distinct.iter().map(|&b| eq.cell_moments(b)).collect();
        for (k, cell) in eq.cells.iter().enumerate() {
            let j = distinct.iter().position(|&b| b == cell.2).unwrap();
            eq.first_term.push(moments[j][k].0);
            eq.v0.push(moments[j][k].1);
        }
        eq.beta0_values = distinct;
        Ok(eq)
    }

    /// `(e, v)` of the risk set for every cell at coefficient `b`.
    fn cell_moments(&self, b: f64) -> Vec<(f64, f64)> {
        let n = self.z.len();
        let shift = self.z.iter().map(|z| b * z).fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = vec![0.0; n + 1];
        let mut s1 = vec![0.0; n + 1];
        let mut s2 = vec![0.0; n + 1];
        for j in (0..n).rev() {
            let z = self.z[j];
            let w = (b * z - shift).exp();
            s0[j] = s0[j + 1] + w;
            s1[j] = s1[j + 1] + w * z;
            s2[j] = s2[j + 1] + w * z * z;
        }
        self.cells
            .iter()
            .map(|&(i, _, _)| {
                let e = s1[i] / s0[i];
                (e, s2[i] / s0[i] - e * e)
            })
            .collect()
    }

    fn eval(&self, b: f64) -> (f64, f64) {
        let mut h = 0.0;
        let mut dh = 0.0;
        for ((cell, (e, v)), first) in self.cells.iter().zip(self.cell_moments(b)).zip(&self.first_term) {
            h += cell.1 * (first - e);
            dh -= cell.1 * v;
        }
        (h, dh)
    }

    fn solve(&self) -> Result<f64> {
        // h is nonincreasing in beta
        let (mut lo, mut hi) = (-1.0, 1.0);
        while self.eval(lo).0 < 0.0 {
            lo *= 2.0;
            if lo < -64.0 {
                return Err(Error::arg("oracle root not bracketed"));
            }
        }
        while self.eval(hi).0 > 0.0 {
            hi *= 2.0;
            if hi > 64.0 {
                return Err(Error::arg("oracle root not bracketed"));
            }
        }
        let mut b = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (h, dh) = self.eval(b);
            if h == 0.0 {
                return Ok(b);
            }
            if h > 0.0 {
                lo = b;
            } else {
                hi = b;
            }
            let newton = b - h / dh;
            b = if dh < 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-12 || h.abs() < 1e-15 {
                break;
            }
        }
        Ok(b)
    }

    fn taylor(&self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (cell, v) in self.cells.iter().zip(&self.v0) {
            num += cell.1 * v * cell.2;
            den += cell.1 * v;
        }
        num / den
    }
}

fn uncensored_sample<R: Rng + ?Sized>(spec: &GeneratorSpec, n_mc: usize, rng: &mut R) -> Vec<(f64, f64, bool)> {
    (0..n_mc)
        .map(|_| {
            let z = spec.covariate.draw(rng);
            (spec.draw_survival_time(z, rng), z, true)
        })
        .collect()
}

/// Root of the censoring-free limiting equation
/// `int {E[Z | T = t] - s1(beta, t)/s0(beta, t)} dF(t) = 0`.
///
/// Censoring in `spec` is ignored and never drawn.
pub fn beta_star_oracle<R: Rng + ?Sized>(spec: &GeneratorSpec, n_mc: usize, grid_size: usize, rng: &mut R) -> Result<f64> {
    LimitingEquation::new(uncensored_sample(spec, n_mc, rng), &spec.beta, grid_size)?.solve()
}

/// Limit of the partial-likelihood estimator under the censoring in `spec`:
/// the same equation with risk sets and event mass taken from censored data.
pub fn pl_limit_oracle<R: Rng + ?Sized>(spec: &GeneratorSpec, n_mc: usize, grid_size: usize, rng: &mut R) -> Result<f64> {
    let sample = (0..n_mc)
        .map(|_| {
            let s = spec.draw_subject(rng);
            (s.time, s.covariates[0], s.event)
        })
        .collect();
    LimitingEquation::new(sample, &spec.beta, grid_size)?.solve()
}

/// First-order approximation `int v beta0 dF / int v dF` with
/// `v(t) = Var[Z | T = t]`.
pub fn beta_star_taylor<R: Rng + ?Sized>(spec: &GeneratorSpec, n_mc: usize, grid_size: usize, rng: &mut R) -> Result<f64> {
    Ok(LimitingEquation::new(uncensored_sample(spec, n_mc, rng), &spec.beta, grid_size)?.taylor())
}

/// Runs `f` on a dedicated pool of `jobs` threads, or on the global pool.
pub(crate) fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(j) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::arg(e.to_string()))?
            .install(f)),
        None => Ok(f()),
    }
}

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mut s = Neumaier::default();
    xs.iter().for_each(|&x| s.add(x));
    let mean = s.total() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let mut ss = Neumaier::default();
    xs.iter().for_each(|&x| ss.add((x - mean) * (x - mean)));
    (mean, (ss.total() / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub spec: GeneratorSpec,
    pub n: usize,
    pub reps: usize,
    /// Family fitted for the parametric-marginal estimator; defaults to the
    /// baseline family.
    pub fit_family: Option<ParametricFamily>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyResult {
    pub pl: EstimatorSummary,
    pub km: EstimatorSummary,
    pub parametric: EstimatorSummary,
    /// Baseline-distribution `E[beta0(T)]`.
    pub expected_beta_baseline: f64,
    /// Generator-faithful Monte Carlo `E[beta0(T)]`.
    pub expected_beta_mc: f64,
    pub censored_fraction: f64,
    pub failed: usize,
    pub config: StudyConfig,
    /// Per-replicate estimates `(pl, km, parametric)` of the successful
    /// replicates, in replicate order.
    #[serde(skip)]
    pub draws: Vec<[f64; 3]>,
}

const EXPECTATION_DRAWS: usize = 200_000;

fn replicate(config: &StudyConfig, family: &ParametricFamily, rep: usize) -> Result<([f64; 3], f64)> {
    let mut rng = substream(config.seed, domain::REPLICATE, rep as u64);
    let data = config.spec.generate(config.n, &mut rng)?;
    let opts = SolveOptions::default();
    let fit = |scheme: WeightScheme| -> Result<f64> { Ok(WeightedScore::new(&data, scheme)?.solve_point(&opts)?[0]) };
    let pl = fit(WeightScheme::Constant)?;
    let km = fit(WeightScheme::KaplanMeier)?;
    let par = fit(WeightScheme::Parametric(family.fit(&data)?))?;
    let censored = 1.0 - data.event_count() as f64 / data.len() as f64;
    Ok(([pl, km, par], censored))
}

/// Runs `reps` replicates and summarizes the three estimators.
///
/// Replicate `i` draws from its own substream, so results do not depend on
/// `jobs`. More than 1% failed replicates is an error.
pub fn run_study(config: &StudyConfig, jobs: Option<usize>) -> Result<SimStudyResult> {
    config.spec.validate()?;
    if config.n < 2 || config.reps < 1 {
        return Err(Error::arg("need n >= 2 and reps >= 1"));
    }
    let family = match &config.fit_family {
        Some(f) => f.clone(),
        None => ParametricFamily::of(&config.spec.baseline)
            .ok_or_else(|| Error::arg("baseline family cannot be fitted"))?,
    };
    let work = || -> Vec<Result<([f64; 3], f64)>> {
        (0..config.reps)
            .into_par_iter()
            .map(|rep| replicate(config, &family, rep))
            .collect()
    };
    let outcomes = with_jobs(jobs, work)?;

    let mut draws = Vec::with_capacity(config.reps);
    let mut censored = Vec::with_capacity(config.reps);
    let mut failed = 0;
    let mut last_error = None;
    for o in outcomes {
        match o {
            Ok((d, c)) => {
                draws.push(d);
                censored.push(c);
            }
            Err(e) => {
                failed += 1;
                last_error = Some(e.to_string());
            }
        }
    }
    if failed * 100 > config.reps {
        return Err(Error::TooManyFailures {
            failed,
            total: config.reps,
            last: last_error.unwrap_or_default(),
        });
    }
    let summary = |k: usize| {
        let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        let (mean, sd) = mean_sd(&xs);
        EstimatorSummary {
            mean,
            sd,
            count: xs.len(),
        }
    };
    let mut rng = substream(config.seed, domain::ORACLE, 0);
    Ok(SimStudyResult {
        pl: summary(0),
        km: summary(1),
        parametric: summary(2),
        expected_beta_baseline: config.spec.expected_beta_baseline(),
        expected_beta_mc: expected_beta(&config.spec, EXPECTATION_DRAWS, &mut rng),
        censored_fraction: mean_sd(&censored).0,
        failed,
        config: config.clone(),
        draws,
    })
}

/// A scalar or a list in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(xs) => xs.clone(),
        }
    }
}

fn default_covariate() -> Covariate {
    Covariate::Uniform01
}

fn default_targets() -> OneOrMany<f64> {
    OneOrMany::One(0.0)
}

fn default_calibration_draws() -> usize {
    200_000
}

/// A simulation table: every coefficient function in `beta` crossed with
/// every censoring target, each cell a [`run_study`] with the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPlan {
    #[serde(default)]
    pub name: Option<String>,
    pub baseline: MarginalModel,
    pub beta: OneOrMany<BetaFunction>,
    #[serde(default = "default_covariate")]
    pub covariate: Covariate,
    pub censoring_family: CensoringFamily,
    #[serde(default = "default_targets")]
    pub target_censoring: OneOrMany<f64>,
    pub n: usize,
    pub reps: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Family of the parametric-marginal estimator; the baseline family
    /// when absent.
    #[serde(default)]
    pub families_to_fit: Option<ParametricFamily>,
    #[serde(default = "default_calibration_draws")]
    pub calibration_draws: usize,
}

impl StudyPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: StudyPlan = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let problems = plan.problems();
        if problems.is_empty() {
            Ok(plan)
        } else {
            Err(Error::arg(format!("invalid study config:\n  {}", problems.join("\n  "))))
        }
    }

    /// Every semantic problem with the plan.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let spec = GeneratorSpec {
            baseline: self.baseline.clone(),
            beta: BetaFunction::constant(0.0),
            covariate: self.covariate,
            censoring: Censoring::None,
        };
        if let Err(e) = spec.validate() {
            out.push(e.to_string());
        }
        let betas = self.beta.to_vec();
        if betas.is_empty() {
            out.push("beta: at least one coefficient function is required".into());
        }
        for b in &betas {
            if let Err(e) = b.validate() {
                out.push(format!("beta: {e}"));
            }
        }
        let targets = self.target_censoring.to_vec();
        if targets.is_empty() {
            out.push("target_censoring: at least one target is required".into());
        }
        for t in targets {
            if !(0.0..1.0).contains(&t) {
                out.push(format!("target_censoring: {t} outside [0, 1)"));
            } else if t > 0.0 && self.censoring_family == CensoringFamily::None {
                out.push(format!("target_censoring: {t} needs a censoring family"));
            }
        }
        if self.n < 2 {
            out.push("n: must be at least 2".into());
        }
        if self.reps < 1 {
            out.push("reps: must be at least 1".into());
        }
        if self.calibration_draws < 100_000 {
            out.push("calibration_draws: must be at least 100000".into());
        }
        if self.families_to_fit.is_none() && ParametricFamily::of(&self.baseline).is_none() {
            out.push("families_to_fit: required when the baseline is not fittable".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCell {
    pub beta: BetaFunction,
    pub target_censoring: f64,
    pub censoring: Censoring,
    pub result: SimStudyResult,
}

/// Runs every cell of `plan` with `seed`; calibration for cell `k` draws
/// from its own substream.
pub fn run_plan(plan: &StudyPlan, seed: u64, jobs: Option<usize>) -> Result<Vec<PlanCell>> {
    let problems = plan.problems();
    if !problems.is_empty() {
        return Err(Error::arg(problems.join("; ")));
    }
    let mut cells = Vec::new();
    let mut k = 0u64;
    for beta in plan.beta.to_vec() {
        for target in plan.target_censoring.to_vec() {
            let spec = GeneratorSpec {
                baseline: plan.baseline.clone(),
                beta: beta.clone(),
                covariate: plan.covariate,
                censoring: Censoring::None,
            };
            let mut rng = substream(seed, domain::CALIBRATION, k);
            k += 1;
            let censoring = calibrate_censoring(&spec, plan.censoring_family, target, plan.calibration_draws, &mut rng)?;
            let config = StudyConfig {
                spec: spec.with_censoring(censoring),
                n: plan.n,
                reps: plan.reps,
                fit_family: plan.families_to_fit.clone(),
                seed,
            };
            cells.push(PlanCell {
                beta: beta.clone(),
                target_censoring: target,
                censoring,
                result: run_study(&config, jobs)?,
            });
        }
    }
    Ok(cells)
}

/// One row per cell: coefficient function, censoring, then mean and SD of
/// each estimator and the two `E[beta0(T)]` references.
pub fn write_plan_csv<W: std::io::Write>(cells: &[PlanCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::io("table", e.into());
    w.write_record([
        "beta",
        "target_censoring",
        "realized_censoring",
        "censoring_parameter",
        "pl_mean",
        "pl_sd",
        "km_mean",
        "km_sd",
        "par_mean",
        "par_sd",
        "expected_beta_baseline",
        "expected_beta_mc",
        "reps_ok",
    ])
    .map_err(io)?;
    for c in cells {
        let r = &c.result;
        let f = |x: f64| format!("{x:.6}");
        w.write_record([
            c.beta.to_string(),
            f(c.target_censoring),
            f(r.censored_fraction),
            c.censoring.parameter().map_or(String::new(), f),
            f(r.pl.mean),
            f(r.pl.sd),
            f(r.km.mean),
            f(r.km.sd),
            f(r.parametric.mean),
            f(r.parametric.sd),
            f(r.expected_beta_baseline),
            f(r.expected_beta_mc),
            r.pl.count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("table", e))?;
    Ok(())
}
