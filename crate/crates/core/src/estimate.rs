//! Weighted score equations and their Newton-Raphson solution.
//!
//! The weighted score is
//!
//! ```text
//! U_W(beta) = sum_i Delta_i W(X_i) { Z_i - E(beta, X_i) }
//! ```
//!
//! with `W = 1` for the partial-likelihood estimator, `W = S_km(t-)/Y(t)` for
//! the Kaplan-Meier estimator and `W = S_model(t)/Y(t)` for a parametric (or
//! external) marginal curve, where `Y(t)` is the number at risk.
//!
//! Weights are stored exactly as defined, including the `1/n` carried by
//! `Y(t) = n S0(0, t)`. The root of `U_W` does not depend on a positive
//! rescaling of `W`, and the sandwich variance `J^-1 K J^-1` with
//! `J = sum Delta W V` and `K = sum Delta W^2 V` is invariant to it as well.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};

use crate::dataset::SurvivalDataset;
use crate::error::{Error, Result};
use crate::marginal::{kaplan_meier, map_exponential, GammaPrior, MarginalModel, ParametricFamily};

/// Handling of tied event times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMethod {
    /// Every tied event sees the full risk set.
    #[default]
    Breslow,
    /// Tied events progressively remove a fraction of the tied set from
    /// the risk set.
    Efron,
}

impl std::str::FromStr for TieMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "breslow" => Ok(TieMethod::Breslow),
            "efron" => Ok(TieMethod::Efron),
            _ => Err(Error::arg(format!("unknown tie method `{s}`"))),
        }
    }
}

/// Rule producing the per-event weight `W(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightScheme {
    Constant,
    KaplanMeier,
    Parametric(MarginalModel),
}

impl WeightScheme {
    /// `W(X_i)` for each subject in dataset order, zero for censored ones.
    pub fn event_weights(&self, data: &SurvivalDataset) -> Result<Vec<f64>> {
        let n = data.len();
        let curve = match self {
            WeightScheme::Constant => {
                return Ok((0..n).map(|i| data.event(i) as u8 as f64).collect());
            }
            WeightScheme::KaplanMeier => MarginalModel::Empirical {
                curve: kaplan_meier(data),
            },
            WeightScheme::Parametric(model) => model.clone(),
        };
        let mut w = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let t = data.time(i);
            let at_risk = (n - i) as f64;
            let value = curve.survival_at(t) / at_risk;
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::data(format!("weight at t = {t} is not a finite nonnegative number")));
            }
            while i < n && data.time(i) == t {
                if data.event(i) {
                    w[i] = value;
                }
                i += 1;
            }
        }
        Ok(w)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, WeightScheme::Constant)
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightScheme::Constant => f.write_str("pl"),
            WeightScheme::KaplanMeier => f.write_str("km"),
            WeightScheme::Parametric(m) => match ParametricFamily::of(m) {
                Some(fam) => write!(f, "par:{fam}"),
                None => write!(f, "par:{}", m.name()),
            },
        }
    }
}

/// Which variance estimator a fit reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// Andersen-Gill for constant weights, sandwich otherwise.
    #[default]
    Auto,
    AndersenGill,
    Sandwich,
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(VarianceMethod::Auto),
            "ag" | "andersen-gill" => Ok(VarianceMethod::AndersenGill),
            "sandwich" => Ok(VarianceMethod::Sandwich),
            _ => Err(Error::arg(format!("unknown variance method `{s}`"))),
        }
    }
}

/// Score and curvature pieces at one `beta`.
#[derive(Debug, Clone)]
pub struct ScoreParts {
    /// `sum Delta w (Z - E)`
    pub score: DVector<f64>,
    /// `-sum Delta w V`
    pub jacobian: DMatrix<f64>,
    /// `sum Delta w^2 V`
    pub meat: DMatrix<f64>,
    /// `sum Delta V`, the unweighted information
    pub information: DMatrix<f64>,
    /// `sum Delta w (beta'Z - log S0)`
    pub log_likelihood: f64,
}

/// A weighted score equation on a fixed dataset.
#[derive(Debug, Clone)]
pub struct WeightedScore<'a> {
    data: &'a SurvivalDataset,
    scheme: WeightScheme,
    weights: Vec<f64>,
    ties: TieMethod,
}

impl<'a> WeightedScore<'a> {
    pub fn new(data: &'a SurvivalDataset, scheme: WeightScheme) -> Result<Self> {
        let weights = scheme.event_weights(data)?;
        Ok(WeightedScore {
            data,
            scheme,
            weights,
            ties: TieMethod::Breslow,
        })
    }

    pub fn with_ties(mut self, ties: TieMethod) -> Self {
        self.ties = ties;
        self
    }

    /// Multiplies each subject's weight by `m[i]`; used for random-weight
    /// resampling.
    pub fn with_multipliers(mut self, m: &[f64]) -> Result<Self> {
        if m.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len(),
                got: m.len(),
            });
        }
        for (w, &f) in self.weights.iter_mut().zip(m) {
            *w *= f;
        }
        Ok(self)
    }

    pub fn data(&self) -> &SurvivalDataset {
        self.data
    }

    pub fn scheme(&self) -> &WeightScheme {
        &self.scheme
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ties(&self) -> TieMethod {
        self.ties
    }

    /// One backward sweep over the sorted data accumulating risk-set sums.
    pub fn evaluate(&self, beta: &[f64]) -> Result<ScoreParts> {
        let data = self.data;
        data.check_beta(beta)?;
        let n = data.len();
        let d = data.dim();
        let log_n = (n as f64).ln();

        let eta: Vec<f64> = (0..n)
            .map(|i| beta.iter().zip(data.covariates(i)).map(|(b, z)| b * z).sum())
            .collect();
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let r: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

        let mut s0 = 0.0;
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d * d];
        let mut score = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        let mut meat = vec![0.0; d * d];
        let mut info = vec![0.0; d * d];
        let mut loglik = 0.0;

        let mut events = Vec::new();
        let mut e = vec![0.0; d];
        let mut v = vec![0.0; d * d];

        let mut hi = n;
        while hi > 0 {
            let t = data.time(hi - 1);
            let mut lo = hi - 1;
            while lo > 0 && data.time(lo - 1) == t {
                lo -= 1;
            }
            events.clear();
            let (mut d0, mut d1, mut d2) = (0.0, vec![0.0; d], vec![0.0; d * d]);
            for j in lo..hi {
                let z = data.covariates(j);
                add_moments(r[j], z, &mut s0, &mut s1, &mut s2);
                if data.event(j) {
                    events.push(j);
                    if self.ties == TieMethod::Efron {
                        add_moments(r[j], z, &mut d0, &mut d1, &mut d2);
                    }
                }
            }
            let m = events.len() as f64;
            for (k, &i) in events.iter().enumerate() {
                let (a0, frac) = match self.ties {
                    TieMethod::Breslow => (s0, 0.0),
                    TieMethod::Efron => {
                        let f = k as f64 / m;
                        (s0 - f * d0, f)
                    }
                };
                if !(a0 > 0.0) {
                    return Err(Error::EmptyRiskSet(t));
                }
                for a in 0..d {
                    e[a] = (s1[a] - frac * d1[a]) / a0;
                }
                for a in 0..d {
                    for b in 0..d {
                        v[a * d + b] = (s2[a * d + b] - frac * d2[a * d + b]) / a0 - e[a] * e[b];
                    }
                }
                let w = self.weights[i];
                let z = data.covariates(i);
                for a in 0..d {
                    score[a] += w * (z[a] - e[a]);
                }
                for ab in 0..d * d {
                    jac[ab] -= w * v[ab];
                    meat[ab] += w * w * v[ab];
                    info[ab] += v[ab];
                }
                loglik += w * (eta[i] - (a0.ln() + shift - log_n));
            }
            hi = lo;
        }

        Ok(ScoreParts {
            score: DVector::from_vec(score),
            jacobian: DMatrix::from_row_slice(d, d, &jac),
            meat: DMatrix::from_row_slice(d, d, &meat),
            information: DMatrix::from_row_slice(d, d, &info),
            log_likelihood: loglik,
        })
    }

    pub fn score(&self, beta: &[f64]) -> Result<DVector<f64>> {
        Ok(self.evaluate(beta)?.score)
    }

    pub fn jacobian(&self, beta: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(beta)?.jacobian)
    }

    /// Newton-Raphson with step halving on `||U||_2`.
    pub fn solve(&self, opts: &SolveOptions) -> Result<FitResult> {
        self.solve_inner(opts, false)
    }

    /// As [`solve`](Self::solve), but a singular variance becomes NaN
    /// instead of an error.
    pub(crate) fn solve_allow_singular(&self, opts: &SolveOptions) -> Result<FitResult> {
        self.solve_inner(opts, true)
    }

    fn solve_inner(&self, opts: &SolveOptions, allow_singular: bool) -> Result<FitResult> {
        let (beta, parts, iterations, converged) = self.newton(opts)?;
        let d = self.data.dim();
        let variance = match self.variance_from_parts(&parts, opts.variance) {
            Ok(v) => v,
            Err(_) if !converged || allow_singular => DMatrix::from_element(d, d, f64::NAN),
            Err(e) => return Err(e),
        };
        Ok(FitResult::new(
            beta,
            variance,
            iterations,
            converged,
            parts.score.amax(),
            self.scheme.to_string(),
            self.ties,
            self.resolve(opts.variance),
        ))
    }

    /// Root of the equation without a variance; errors when the solver does
    /// not converge.
    pub fn solve_point(&self, opts: &SolveOptions) -> Result<DVector<f64>> {
        let (beta, _, iterations, converged) = self.newton(opts)?;
        if !converged {
            return Err(Error::NoConvergence {
                what: "score solver",
                iterations,
            });
        }
        Ok(beta)
    }

    fn newton(&self, opts: &SolveOptions) -> Result<(DVector<f64>, ScoreParts, usize, bool)> {
        if !(opts.tol > 0.0) {
            return Err(Error::arg("tolerance must be positive"));
        }
        if self.data.event_count() == 0 {
            return Err(Error::data("no events"));
        }
        let d = self.data.dim();
        let mut beta = match &opts.init {
            Some(b) => {
                self.data.check_beta(b)?;
                DVector::from_column_slice(b)
            }
            None => DVector::zeros(d),
        };
        let mut parts = self.evaluate(beta.as_slice())?;
        let mut iterations = 0;
        let converged = loop {
            if parts.score.amax() < opts.tol {
                break true;
            }
            if iterations == opts.max_iter {
                break false;
            }
            let neg_jac = -&parts.jacobian;
            let step = solve_spd(&neg_jac, &parts.score)?;
            let base = parts.score.norm();
            let mut scale = 1.0;
            let mut halvings = 0;
            loop {
                let cand = &beta + &step * scale;
                let cand_parts = self.evaluate(cand.as_slice())?;
                let ok = cand_parts.score.iter().all(|u| u.is_finite())
                    && cand_parts.score.norm() <= base;
                if ok || halvings == MAX_HALVINGS {
                    beta = cand;
                    parts = cand_parts;
                    break;
                }
                scale *= 0.5;
                halvings += 1;
            }
            iterations += 1;
        };
        Ok((beta, parts, iterations, converged))
    }

    fn resolve(&self, method: VarianceMethod) -> VarianceMethod {
        match method {
            VarianceMethod::Auto if self.scheme.is_constant() => VarianceMethod::AndersenGill,
            VarianceMethod::Auto => VarianceMethod::Sandwich,
            m => m,
        }
    }

    fn variance_from_parts(&self, parts: &ScoreParts, method: VarianceMethod) -> Result<DMatrix<f64>> {
        match self.resolve(method) {
            VarianceMethod::AndersenGill => invert_spd(&parts.information),
            _ => {
                let bread = invert_spd(&(-&parts.jacobian))?;
                let v = &bread * &parts.meat * &bread;
                Ok((&v + v.transpose()) * 0.5)
            }
        }
    }

    /// `I(beta)^-1 / n` with `I = n^-1 sum Delta V`.
    pub fn variance_andersen_gill(&self, beta: &[f64]) -> Result<DMatrix<f64>> {
        let parts = self.evaluate(beta)?;
        self.variance_from_parts(&parts, VarianceMethod::AndersenGill)
    }

    /// `A^-1 B A^-1 / n` with `A = n^-1 sum Delta W V`, `B = n^-1 sum Delta W^2 V`.
    pub fn variance_sandwich(&self, beta: &[f64]) -> Result<DMatrix<f64>> {
        let parts = self.evaluate(beta)?;
        self.variance_from_parts(&parts, VarianceMethod::Sandwich)
    }
}

const MAX_HALVINGS: usize = 20;

fn add_moments(w: f64, z: &[f64], s0: &mut f64, s1: &mut [f64], s2: &mut [f64]) {
    let d = z.len();
    *s0 += w;
    for a in 0..d {
        s1[a] += w * z[a];
        for b in 0..d {
            s2[a * d + b] += w * z[a] * z[b];
        }
    }
}

fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let max = eig.amax();
    if !(max > 0.0) || eig.min() <= 1e-12 * max {
        return Err(Error::Singular("information matrix is not positive definite"));
    }
    Ok(())
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    check_spd(m)?;
    m.clone()
        .cholesky()
        .map(|c| c.solve(rhs))
        .ok_or(Error::Singular("information matrix is not positive definite"))
}

fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(m)?;
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::Singular("information matrix is not positive definite"))
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub init: Option<Vec<f64>>,
    pub tol: f64,
    pub max_iter: usize,
    pub variance: VarianceMethod,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            init: None,
            tol: 1e-9,
            max_iter: 50,
            variance: VarianceMethod::Auto,
        }
    }
}

/// Result of solving a weighted score equation.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub variance: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_score_norm: f64,
    pub scheme: String,
    pub ties: TieMethod,
    pub variance_method: VarianceMethod,
    /// Marginal model the weights were built from, when it was fitted.
    pub theta_hat: Option<MarginalModel>,
}

impl FitResult {
    #[allow(clippy::too_many_arguments)]
    fn new(
        beta: DVector<f64>,
        variance: DMatrix<f64>,
        iterations: usize,
        converged: bool,
        final_score_norm: f64,
        scheme: String,
        ties: TieMethod,
        variance_method: VarianceMethod,
    ) -> Self {
        let std_errors = variance.diagonal().map(f64::sqrt);
        FitResult {
            beta,
            variance,
            std_errors,
            iterations,
            converged,
            final_score_norm,
            scheme,
            ties,
            variance_method,
            theta_hat: None,
        }
    }
}

impl Serialize for FitResult {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            beta: Vec<f64>,
            std_errors: Vec<f64>,
            variance: Vec<Vec<f64>>,
            iterations: usize,
            converged: bool,
            final_score_norm: f64,
            scheme: &'a str,
            ties: TieMethod,
            variance_method: VarianceMethod,
            #[serde(skip_serializing_if = "Option::is_none")]
            theta_hat: Option<&'a MarginalModel>,
        }
        let variance = (0..self.variance.nrows())
            .map(|r| self.variance.row(r).iter().copied().collect())
            .collect();
        Repr {
            beta: self.beta.iter().copied().collect(),
            std_errors: self.std_errors.iter().copied().collect(),
            variance,
            iterations: self.iterations,
            converged: self.converged,
            final_score_norm: self.final_score_norm,
            scheme: &self.scheme,
            ties: self.ties,
            variance_method: self.variance_method,
            theta_hat: self.theta_hat.as_ref(),
        }
        .serialize(s)
    }
}

/// `U_W(beta)` with Breslow ties.
pub fn weighted_score(data: &SurvivalDataset, scheme: &WeightScheme, beta: &[f64]) -> Result<DVector<f64>> {
    WeightedScore::new(data, scheme.clone())?.score(beta)
}

/// `dU_W/dbeta = -sum Delta W V`.
pub fn score_jacobian(data: &SurvivalDataset, scheme: &WeightScheme, beta: &[f64]) -> Result<DMatrix<f64>> {
    WeightedScore::new(data, scheme.clone())?.jacobian(beta)
}

pub fn solve_score(data: &SurvivalDataset, scheme: &WeightScheme, ties: TieMethod, opts: &SolveOptions) -> Result<FitResult> {
    WeightedScore::new(data, scheme.clone())?.with_ties(ties).solve(opts)
}

/// Breslow log partial likelihood `sum Delta [beta'Z - log S0(beta, X)]`.
pub fn log_partial_likelihood(data: &SurvivalDataset, beta: &[f64]) -> Result<f64> {
    Ok(WeightedScore::new(data, WeightScheme::Constant)?
        .evaluate(beta)?
        .log_likelihood)
}

pub fn variance_andersen_gill(data: &SurvivalDataset, beta: &[f64], ties: TieMethod) -> Result<DMatrix<f64>> {
    WeightedScore::new(data, WeightScheme::Constant)?
        .with_ties(ties)
        .variance_andersen_gill(beta)
}

pub fn variance_sandwich(data: &SurvivalDataset, scheme: &WeightScheme, beta: &[f64]) -> Result<DMatrix<f64>> {
    WeightedScore::new(data, scheme.clone())?.variance_sandwich(beta)
}

/// Fits the marginal family (MLE, or the conjugate posterior mean when a
/// prior is given), then solves the score weighted by the fitted curve.
pub fn iterative_marginal_fit(
    data: &SurvivalDataset,
    family: &ParametricFamily,
    prior: Option<GammaPrior>,
    ties: TieMethod,
    opts: &SolveOptions,
) -> Result<FitResult> {
    let theta = match (family, prior) {
        (_, None) => family.fit(data)?,
        (ParametricFamily::Exponential, Some(p)) => map_exponential(data, p)?,
        (f, Some(_)) => {
            return Err(Error::arg(format!("no conjugate prior for the {f} family")));
        }
    };
    let mut fit = solve_score(data, &WeightScheme::Parametric(theta.clone()), ties, opts)?;
    fit.theta_hat = Some(theta);
    Ok(fit)
}
