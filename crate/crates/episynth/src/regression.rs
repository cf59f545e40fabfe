//! First-stage joint regression of GP consultation counts and virological
//! positivity.
//!
//! Consultations for influenza-like illness mix the pandemic strain with a
//! background of other respiratory illness. The two are disentangled by
//! modelling each component with its own log-linear time polynomial per age
//! group: total consultations are Poisson in the sum of the components, while
//! swab positivity is binomial in the ratio, whose logit is the difference of
//! the two linear predictors. Dividing the influenza component by the
//! probability of consulting a GP given symptoms yields the number
//! symptomatic, summarised per age as a posterior mean and sd on the log
//! scale for use as a plug-in likelihood term downstream.

use crate::error::{Error, Result};
use crate::kernels::{ln_choose, normal_logpdf, poisson_logpmf};
use crate::mcmc::{run_chain, ChainConfig, Posterior, PosteriorSample};
use crate::numeric::sd;
use crate::prior::Support;
use crate::stream::{DataStream, Observation, StreamKind};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Shape of the joint regression: one log-scale polynomial in time per age
/// group for each of the two consultation components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointRegressionSpec {
    /// Degree of the time polynomial fitted per age group.
    pub time_degree: usize,
    /// Spread of the Normal(0, sd) prior on every coefficient.
    pub coef_prior_sd: f64,
}

impl Default for JointRegressionSpec {
    fn default() -> Self {
        Self {
            time_degree: 3,
            coef_prior_sd: 5.0,
        }
    }
}

/// Probability that a symptomatic case consults a GP, per consultation time
/// point. One entry broadcasts across all time points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ConsultProbability {
    /// Known values in (0, 1].
    Fixed(Vec<f64>),
    /// Beta(alpha, beta) hyperparameters; uncertainty propagates into the
    /// log-scale estimates.
    Beta(Vec<(f64, f64)>),
}

struct ConsultCell {
    s: f64,
    age: usize,
    count: u64,
    time_index: usize,
    day: f64,
}

struct PositivityCell {
    s: f64,
    age: usize,
    positive: u64,
    tests: u64,
}

/// The joint model, ready for sampling.
pub struct JointRegressionModel {
    time_degree: usize,
    coef_prior_sd: f64,
    n_ages: usize,
    mid: f64,
    half: f64,
    consult: Vec<ConsultCell>,
    posit: Vec<PositivityCell>,
}

impl JointRegressionModel {
    pub fn new(
        spec: &JointRegressionSpec,
        consultations: &DataStream,
        positivity: &DataStream,
    ) -> Result<Self> {
        if !(spec.coef_prior_sd > 0.0) {
            return Err(Error::Config(format!(
                "coefficient prior sd must be positive, got {}",
                spec.coef_prior_sd
            )));
        }
        if consultations.obs.is_empty() || positivity.obs.is_empty() {
            return Err(Error::Config(
                "joint regression needs observations in both streams".into(),
            ));
        }
        let span = |s: &DataStream| {
            let days: Vec<f64> = s.obs.iter().map(|o| o.day).collect();
            (
                days.iter().cloned().fold(f64::INFINITY, f64::min),
                days.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let (c_lo, c_hi) = span(consultations);
        let (p_lo, p_hi) = span(positivity);
        if c_lo.max(p_lo) > c_hi.min(p_hi) {
            return Err(Error::Config(format!(
                "streams do not overlap in time: consultations cover [{c_lo}, {c_hi}] \
                 but positivity covers [{p_lo}, {p_hi}]"
            )));
        }
        let distinct: BTreeSet<u64> = consultations.obs.iter().map(|o| o.day.to_bits()).collect();
        if distinct.len() < spec.time_degree + 1 {
            return Err(Error::Config(format!(
                "a time basis of degree {} needs at least {} distinct consultation times, got {}",
                spec.time_degree,
                spec.time_degree + 1,
                distinct.len()
            )));
        }
        let lo = c_lo.min(p_lo);
        let hi = c_hi.max(p_hi);
        let mid = 0.5 * (lo + hi);
        let half = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };

        let n_ages = consultations
            .obs
            .iter()
            .chain(&positivity.obs)
            .map(|o| o.age_index)
            .max()
            .unwrap()
            + 1;
        for age in 0..n_ages {
            if !consultations.obs.iter().any(|o| o.age_index == age) {
                return Err(Error::Config(format!(
                    "age group {age} has no consultation data"
                )));
            }
        }

        let consult = consultations
            .obs
            .iter()
            .map(|o| ConsultCell {
                s: (o.day - mid) / half,
                age: o.age_index,
                count: o.value as u64,
                time_index: o.time_index,
                day: o.day,
            })
            .collect();
        let posit = positivity
            .obs
            .iter()
            .map(|o| {
                let tests = o.denominator.ok_or_else(|| {
                    Error::Config("positivity observations need a test denominator".into())
                })?;
                if !(tests > 0.0) {
                    return Err(Error::Config(format!(
                        "positivity denominator must be positive, got {tests}"
                    )));
                }
                if o.value > tests {
                    return Err(Error::Config(format!(
                        "{} positives out of {tests} tests",
                        o.value
                    )));
                }
                Ok(PositivityCell {
                    s: (o.day - mid) / half,
                    age: o.age_index,
                    positive: o.value as u64,
                    tests: tests as u64,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            time_degree: spec.time_degree,
            coef_prior_sd: spec.coef_prior_sd,
            n_ages,
            mid,
            half,
            consult,
            posit,
        })
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    fn idx(&self, component: usize, age: usize, power: usize) -> usize {
        (component * self.n_ages + age) * (self.time_degree + 1) + power
    }

    fn predictor(&self, beta: &[f64], component: usize, age: usize, s: f64) -> f64 {
        let mut acc = 0.0;
        let mut pow = 1.0;
        for j in 0..=self.time_degree {
            acc += beta[self.idx(component, age, j)] * pow;
            pow *= s;
        }
        acc
    }

    /// Influenza and background consultation levels at a raw day, natural
    /// scale.
    pub fn components(&self, beta: &[f64], day: f64, age: usize) -> Result<(f64, f64)> {
        if age >= self.n_ages {
            return Err(Error::Config(format!(
                "age index {age} out of range for {} groups",
                self.n_ages
            )));
        }
        let s = (day - self.mid) / self.half;
        Ok((
            self.predictor(beta, 0, age, s).exp(),
            self.predictor(beta, 1, age, s).exp(),
        ))
    }

    pub fn consultation_loglik(&self, beta: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for cell in &self.consult {
            let mu = self.predictor(beta, 0, cell.age, cell.s).exp()
                + self.predictor(beta, 1, cell.age, cell.s).exp();
            if !mu.is_finite() || mu <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            total += poisson_logpmf(cell.count, mu)?;
        }
        Ok(total)
    }

    pub fn positivity_loglik(&self, beta: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for cell in &self.posit {
            // logit of the positive proportion is the difference of the two
            // linear predictors, so the component scale cancels exactly
            let theta = self.predictor(beta, 0, cell.age, cell.s)
                - self.predictor(beta, 1, cell.age, cell.s);
            let softplus = if theta > 30.0 {
                theta
            } else {
                theta.exp().ln_1p()
            };
            total += ln_choose(cell.tests, cell.positive) + cell.positive as f64 * theta
                - cell.tests as f64 * softplus;
        }
        Ok(total)
    }

    fn log_prior(&self, beta: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for &b in beta {
            total += normal_logpdf(b, 0.0, self.coef_prior_sd)?;
        }
        Ok(total)
    }
}

impl Posterior for JointRegressionModel {
    fn dim(&self) -> usize {
        2 * self.n_ages * (self.time_degree + 1)
    }

    fn supports(&self) -> Vec<Support> {
        vec![Support::Real; self.dim()]
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let prior = self.log_prior(theta)?;
        let consult = self.consultation_loglik(theta)?;
        if consult == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(prior + consult + self.positivity_loglik(theta)?)
    }

    fn initial_draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut beta = vec![0.0; self.dim()];
        for age in 0..self.n_ages {
            let cells: Vec<&ConsultCell> =
                self.consult.iter().filter(|c| c.age == age).collect();
            let mean =
                cells.iter().map(|c| c.count as f64).sum::<f64>() / cells.len().max(1) as f64;
            let level = (0.5 * mean + 0.5).ln();
            beta[self.idx(0, age, 0)] = level;
            beta[self.idx(1, age, 0)] = level;
        }
        for b in &mut beta {
            let z: f64 = StandardNormal.sample(&mut &mut *rng);
            *b += 0.05 * z;
        }
        Ok(beta)
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for (component, tag) in ["g", "b"].iter().enumerate() {
            for age in 0..self.n_ages {
                for j in 0..=self.time_degree {
                    debug_assert_eq!(names.len(), self.idx(component, age, j));
                    names.push(format!("beta_{tag}[{age},{j}]"));
                }
            }
        }
        names
    }
}

/// Log-scale summary of the number symptomatic in one age group.
#[derive(Debug, Clone, Serialize)]
pub struct SymptomaticEstimate {
    pub age_index: usize,
    /// Posterior mean of log N_S.
    pub y_hat: f64,
    /// Posterior sd of log N_S.
    pub sigma_hat: f64,
}

/// Posterior means of the fitted consultation split at one observed cell.
#[derive(Debug, Clone, Serialize)]
pub struct FittedCell {
    pub time_index: usize,
    pub age_index: usize,
    pub day: f64,
    pub observed: f64,
    pub flu: f64,
    pub background: f64,
    pub total: f64,
}

/// Everything the fit produces: the raw sample, per-age symptomatic
/// estimates, the fitted split per cell, and whether positivity was
/// degenerate.
pub struct JointRegressionFit {
    pub sample: PosteriorSample,
    pub estimates: Vec<SymptomaticEstimate>,
    pub cells: Vec<FittedCell>,
    /// Set when positivity is identically zero against positive consultation
    /// counts, leaving the influenza component supported by the prior alone.
    pub background_only: bool,
}

impl JointRegressionFit {
    /// Package the per-age estimates as a point-estimate stream, one
    /// observation per age at the given grid index, for use as a likelihood
    /// term in a downstream model.
    pub fn estimate_stream(&self, grid: crate::grid::TimeGrid, time_index: usize) -> Result<DataStream> {
        let obs = self
            .estimates
            .iter()
            .map(|e| Observation {
                time_index,
                age_index: e.age_index,
                value: e.y_hat,
                denominator: Some(e.sigma_hat),
                day: 0.0,
            })
            .collect();
        DataStream::new(StreamKind::PointEstimateLogScale, grid, obs)
    }
}

fn consult_probability_draws(
    prob: &ConsultProbability,
    times: &[usize],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let expect = |len: usize| -> Result<()> {
        if len != 1 && len != times.len() {
            return Err(Error::Config(format!(
                "consultation probability needs 1 or {} entries, got {len}",
                times.len()
            )));
        }
        Ok(())
    };
    match prob {
        ConsultProbability::Fixed(ps) => {
            expect(ps.len())?;
            for &p in ps {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::Config(format!(
                        "consultation probability must lie in (0, 1], got {p}"
                    )));
                }
            }
            let row: Vec<f64> = (0..times.len())
                .map(|i| ps[if ps.len() == 1 { 0 } else { i }])
                .collect();
            Ok(vec![row; n_draws])
        }
        ConsultProbability::Beta(hyper) => {
            expect(hyper.len())?;
            let dists = (0..times.len())
                .map(|i| {
                    let (a, b) = hyper[if hyper.len() == 1 { 0 } else { i }];
                    rand_distr::Beta::new(a, b).map_err(|_| {
                        Error::Config(format!(
                            "Beta({a}, {b}) is not a valid consultation probability prior"
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1e55);
            Ok((0..n_draws)
                .map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect())
                .collect())
        }
    }
}

/// Fit the joint regression and summarise the number symptomatic per age.
///
/// The consultation probability has no likelihood term of its own, so its
/// posterior is its prior; it is therefore drawn per kept MCMC draw when the
/// influenza consultations are divided through, which propagates its
/// uncertainty exactly.
pub fn fit_joint_regression(
    spec: &JointRegressionSpec,
    consultations: &DataStream,
    positivity: &DataStream,
    consult_prob: &ConsultProbability,
    config: &ChainConfig,
) -> Result<JointRegressionFit> {
    let model = JointRegressionModel::new(spec, consultations, positivity)?;

    let times: Vec<usize> = model
        .consult
        .iter()
        .map(|c| c.time_index)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let consult_total: f64 = model.consult.iter().map(|c| c.count as f64).sum();
    let positive_total: u64 = model.posit.iter().map(|c| c.positive).sum();
    let background_only = positive_total == 0 && consult_total > 0.0;
    if background_only {
        log::warn!(
            "positivity is identically zero against {consult_total} consultations; \
             the influenza component rests on its prior alone"
        );
    }

    let sample = run_chain(&model, config)?;
    let n_draws = sample.n_draws();
    let p_draws = consult_probability_draws(consult_prob, &times, n_draws, config.seed)?;

    let mut log_ns = vec![Vec::with_capacity(n_draws); model.n_ages];
    let mut cells: Vec<FittedCell> = model
        .consult
        .iter()
        .map(|c| FittedCell {
            time_index: c.time_index,
            age_index: c.age,
            day: c.day,
            observed: c.count as f64,
            flu: 0.0,
            background: 0.0,
            total: 0.0,
        })
        .collect();

    for (draw, ps) in sample.draws.iter().zip(&p_draws) {
        let mut n_s = vec![0.0; model.n_ages];
        for (cell, fitted) in model.consult.iter().zip(&mut cells) {
            let flu = model.predictor(draw, 0, cell.age, cell.s).exp();
            let background = model.predictor(draw, 1, cell.age, cell.s).exp();
            fitted.flu += flu / n_draws as f64;
            fitted.background += background / n_draws as f64;
            fitted.total += (flu + background) / n_draws as f64;
            let slot = times.binary_search(&cell.time_index).unwrap();
            n_s[cell.age] += flu / ps[slot];
        }
        for (age, total) in n_s.into_iter().enumerate() {
            log_ns[age].push(total.max(1e-300).ln());
        }
    }

    let estimates = log_ns
        .iter()
        .enumerate()
        .map(|(age_index, draws)| SymptomaticEstimate {
            age_index,
            y_hat: draws.iter().sum::<f64>() / draws.len() as f64,
            sigma_hat: sd(draws),
        })
        .collect();

    Ok(JointRegressionFit {
        sample,
        estimates,
        cells,
        background_only,
    })
}
