//! Random-weight resampling and the nonparametric bootstrap.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::SurvivalDataset;
use crate::error::{Error, Result};
use crate::estimate::{FitResult, SolveOptions, TieMethod, WeightScheme, WeightedScore};
use crate::marginal::ParametricFamily;
use crate::rng::{domain, substream};
use crate::simulate::{mean_sd, with_jobs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    RandomWeight,
    Bootstrap,
}

impl std::str::FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-weight" => Ok(ResampleMethod::RandomWeight),
            "bootstrap" => Ok(ResampleMethod::Bootstrap),
            _ => Err(Error::arg(format!("unknown resampling method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResampleResult {
    pub method: ResampleMethod,
    pub draws: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub point: FitResult,
    pub seed: u64,
    pub failures: usize,
    /// Covariate names, used as the draws CSV header.
    pub names: Vec<String>,
}

impl ResampleResult {
    /// One column per coefficient, one row per draw.
    pub fn write_draws<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::io("draws", e.into());
        w.write_record(&self.names).map_err(io)?;
        for d in &self.draws {
            w.write_record(d.iter().map(|x| format!("{x:?}"))).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io("draws", e))?;
        Ok(())
    }
}

/// Position of each subject among the events, `None` when censored.
fn event_index(data: &SurvivalDataset) -> (Vec<Option<usize>>, usize) {
    let mut count = 0;
    let index = (0..data.len())
        .map(|i| {
            data.event(i).then(|| {
                count += 1;
                count - 1
            })
        })
        .collect();
    (index, count)
}

fn options_from(point: &FitResult) -> SolveOptions {
    SolveOptions {
        init: Some(point.beta.as_slice().to_vec()),
        ..SolveOptions::default()
    }
}

/// Re-solves `equation` with the term of the `k`-th event multiplied by
/// `e_k / sum e`; tied events get separate multipliers.
///
/// The scheme weights of `equation` stay at their original-data values.
pub fn random_weight_fit_with(
    equation: &WeightedScore<'_>,
    multipliers: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<f64>> {
    let data = equation.data();
    let (index, n_events) = event_index(data);
    if multipliers.len() != n_events {
        return Err(Error::Dimension {
            expected: n_events,
            got: multipliers.len(),
        });
    }
    if multipliers.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(Error::arg("multipliers must be finite and nonnegative"));
    }
    let total: f64 = multipliers.iter().sum();
    if !(total > 0.0) {
        return Err(Error::arg("multipliers sum to zero"));
    }
    let per_subject: Vec<f64> = index
        .iter()
        .map(|k| k.map_or(1.0, |k| multipliers[k] / total))
        .collect();
    let perturbed = equation.clone().with_multipliers(&per_subject)?;
    Ok(perturbed.solve_point(opts)?.as_slice().to_vec())
}

/// One random-weight draw with unit-exponential multipliers from `rng`.
pub fn random_weight_fit<R: Rng + ?Sized>(
    equation: &WeightedScore<'_>,
    opts: &SolveOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let e: Vec<f64> = (0..equation.data().event_count()).map(|_| Exp1.sample(rng)).collect();
    random_weight_fit_with(equation, &e, opts)
}

fn summarize(
    method: ResampleMethod,
    outcomes: Vec<Result<Vec<f64>>>,
    point: FitResult,
    seed: u64,
    names: Vec<String>,
    max_failure_rate: f64,
) -> Result<ResampleResult> {
    let total = outcomes.len();
    let mut draws = Vec::with_capacity(total);
    let mut failures = 0;
    let mut last = String::new();
    for o in outcomes {
        match o {
            Ok(d) => draws.push(d),
            Err(e) => {
                failures += 1;
                last = e.to_string();
            }
        }
    }
    if failures as f64 > max_failure_rate * total as f64 || draws.len() < 2 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total,
            last,
        });
    }
    let d = point.beta.len();
    let se = (0..d)
        .map(|k| mean_sd(&draws.iter().map(|x| x[k]).collect::<Vec<_>>()).1)
        .collect();
    Ok(ResampleResult {
        method,
        draws,
        se,
        point,
        seed,
        failures,
        names,
    })
}

/// `b` random-weight draws; draw `i` uses substream `i` of `seed`.
/// More than 5% failed draws is an error.
pub fn resample_distribution(
    data: &SurvivalDataset,
    scheme: &WeightScheme,
    ties: TieMethod,
    b: usize,
    seed: u64,
    jobs: Option<usize>,
) -> Result<ResampleResult> {
    if b < 2 {
        return Err(Error::arg("need at least 2 resampling draws"));
    }
    let equation = WeightedScore::new(data, scheme.clone())?.with_ties(ties);
    let point = equation.solve(&SolveOptions::default())?;
    if !point.converged {
        return Err(Error::NoConvergence {
            what: "score solver",
            iterations: point.iterations,
        });
    }
    let opts = options_from(&point);
    let outcomes = with_jobs(jobs, || {
        (0..b)
            .into_par_iter()
            .map(|i| random_weight_fit(&equation, &opts, &mut substream(seed, domain::RESAMPLE, i as u64)))
            .collect()
    })?;
    summarize(
        ResampleMethod::RandomWeight,
        outcomes,
        point,
        seed,
        data.covariate_names().to_vec(),
        0.05,
    )
}

/// Refits a parametric marginal on a bootstrap sample; fixed curves stay.
fn refit_scheme(scheme: &WeightScheme, sample: &SurvivalDataset) -> Result<WeightScheme> {
    match scheme {
        WeightScheme::Parametric(model) => match ParametricFamily::of(model) {
            Some(family) => Ok(WeightScheme::Parametric(family.fit(sample)?)),
            None => Ok(WeightScheme::Parametric(model.clone())),
        },
        other => Ok(other.clone()),
    }
}

/// Rejects a root where the information has collapsed relative to the
/// starting point: the estimate is running off to infinity (monotone
/// likelihood) and the solver only stopped because the score underflowed.
fn check_finite_root(eq: &WeightedScore<'_>, root: &[f64], start: &[f64]) -> Result<()> {
    let smallest = |b: &[f64]| -> Result<f64> {
        Ok((-eq.jacobian(b)?).symmetric_eigen().eigenvalues.min())
    };
    if smallest(root)? < 1e-6 * smallest(start)?.abs() {
        return Err(Error::Singular("coefficient diverges (monotone likelihood)"));
    }
    Ok(())
}

/// `b` bootstrap replicates resampling subjects with replacement. A
/// parametric marginal is refitted on each replicate; replicates without
/// events or with a diverging coefficient are skipped and counted as
/// failures.
pub fn bootstrap(
    data: &SurvivalDataset,
    scheme: &WeightScheme,
    ties: TieMethod,
    b: usize,
    seed: u64,
    jobs: Option<usize>,
) -> Result<ResampleResult> {
    if b < 2 {
        return Err(Error::arg("need at least 2 bootstrap replicates"));
    }
    let point = WeightedScore::new(data, scheme.clone())?
        .with_ties(ties)
        .solve_allow_singular(&SolveOptions::default())?;
    let opts = options_from(&point);
    let n = data.len();
    let one = |i: usize| -> Result<Vec<f64>> {
        let mut rng = substream(seed, domain::BOOTSTRAP, i as u64);
        let subjects = (0..n)
            .map(|_| data.subjects()[rng.random_range(0..n)].clone())
            .collect();
        let sample = SurvivalDataset::with_names(subjects, data.covariate_names().to_vec())?;
        if sample.event_count() == 0 {
            return Err(Error::data("bootstrap replicate has no events"));
        }
        let scheme = refit_scheme(scheme, &sample)?;
        let eq = WeightedScore::new(&sample, scheme)?.with_ties(ties);
        let root = eq.solve_point(&opts)?;
        check_finite_root(&eq, root.as_slice(), point.beta.as_slice())?;
        Ok(root.as_slice().to_vec())
    };
    let outcomes = with_jobs(jobs, || (0..b).into_par_iter().map(one).collect())?;
    summarize(
        ResampleMethod::Bootstrap,
        outcomes,
        point,
        seed,
        data.covariate_names().to_vec(),
        0.05,
    )
}
