//! Sequential Monte Carlo over data batches: reweighting, systematic
//! resampling, MCMC jittering, and data tempering.
//!
//! An ensemble tracks the posterior given all observation windows absorbed so
//! far. Each new batch multiplies particle weights by its likelihood; when
//! the effective sample size collapses, particles are resampled to equal
//! weights and rejuvenated with a few Metropolis moves targeting the current
//! posterior. A batch that contradicts the ensemble (an observational shock)
//! can be brought in through a tempering ladder that raises its likelihood to
//! full power in fractional steps, resampling and jittering along the way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ObsWindow};
use crate::mcmc::ParamSummary;
use crate::numeric::{self, cholesky, log_sum_exp, tril_mul};

/// Tuning knobs for the sequential sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub seed: u64,
    /// Resample when ESS drops below this fraction of the particle count.
    pub ess_fraction: f64,
    /// Metropolis moves per particle after each resampling.
    pub jitter_moves: usize,
    /// Tempering sub-steps for [`ParticleEnsemble::absorb_batch`]; 1 means a
    /// plain reweight.
    pub temper_steps: usize,
    /// Choose tempering exponents adaptively so each sub-step keeps the
    /// conditional ESS near `cess_target`, instead of the fixed ladder.
    pub adaptive_ladder: bool,
    /// Conditional-ESS fraction the adaptive ladder aims for.
    pub cess_target: f64,
    /// Cap on adaptive ladder length.
    pub max_ladder_steps: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            seed: 0,
            ess_fraction: 0.5,
            jitter_moves: 5,
            temper_steps: 1,
            adaptive_ladder: false,
            cess_target: 0.9,
            max_ladder_steps: 100,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config("need at least two particles".into()));
        }
        if !(0.0..=1.0).contains(&self.ess_fraction) {
            return Err(Error::Config(format!(
                "ESS fraction {} must lie in [0, 1]",
                self.ess_fraction
            )));
        }
        if self.temper_steps == 0 {
            return Err(Error::Config("tempering needs at least one step".into()));
        }
        if !(self.cess_target > 0.0 && self.cess_target < 1.0) {
            return Err(Error::Config(format!(
                "conditional ESS target {} must lie in (0, 1)",
                self.cess_target
            )));
        }
        if self.max_ladder_steps == 0 {
            return Err(Error::Config("adaptive ladder needs room for at least one step".into()));
        }
        Ok(())
    }
}

/// Weighted particles approximating the posterior of data absorbed so far.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    /// Particle parameter vectors on the natural scale.
    pub particles: Vec<Vec<f64>>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Cached log-likelihood of all absorbed data, per particle.
    pub log_lik: Vec<f64>,
    /// Number of batches absorbed.
    pub batch_index: usize,
    /// Upper day bound of the absorbed data.
    pub frontier: f64,
    seed: u64,
    rng_counter: u64,
}

/// Diagnostics from one tempering sub-step.
#[derive(Debug, Clone, Serialize)]
pub struct SubStep {
    pub gamma: f64,
    /// ESS right after the sub-step's reweight, before any resampling.
    pub ess: f64,
    pub resampled: bool,
    pub jitter_accept: Option<f64>,
}

/// Diagnostics from absorbing one batch.
#[derive(Debug, Clone, Serialize)]
pub struct BatchReport {
    pub substeps: Vec<SubStep>,
}

impl BatchReport {
    /// Smallest ESS seen across sub-steps.
    pub fn min_ess(&self) -> f64 {
        self.substeps.iter().map(|s| s.ess).fold(f64::INFINITY, f64::min)
    }
}

/// Equal-width day windows starting at `start`, for batch-by-batch replay.
pub fn day_batches(start: f64, width: f64, count: usize) -> Result<Vec<ObsWindow>> {
    if !(width > 0.0) {
        return Err(Error::Config(format!("batch width {width} must be positive")));
    }
    Ok((0..count)
        .map(|i| ObsWindow {
            lo: start + width * i as f64,
            hi: start + width * (i + 1) as f64,
        })
        .collect())
}

impl ParticleEnsemble {
    /// Draw an equally weighted ensemble from the prior.
    pub fn from_prior(graph: &ModelGraph, config: &SmcConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_particles;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let particles: Vec<Vec<f64>> = (0..n).map(|_| graph.sample_prior(&mut rng)).collect();
        Ok(Self {
            particles,
            weights: vec![1.0 / n as f64; n],
            log_lik: vec![0.0; n],
            batch_index: 0,
            frontier: f64::NEG_INFINITY,
            seed: config.seed,
            rng_counter: 1,
        })
    }

    /// Build an ensemble from explicit particles and weights.
    pub fn from_particles(
        particles: Vec<Vec<f64>>,
        weights: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if particles.len() < 2 || particles.len() != weights.len() {
            return Err(Error::Config(
                "need matching particle and weight lists, at least two long".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || !(total > 0.0) || !total.is_finite() {
            return Err(Error::Config("weights must be non-negative with a positive sum".into()));
        }
        let n = particles.len();
        Ok(Self {
            particles,
            weights: weights.iter().map(|w| w / total).collect(),
            log_lik: vec![0.0; n],
            batch_index: 0,
            frontier: f64::NEG_INFINITY,
            seed,
            rng_counter: 1,
        })
    }

    pub fn n(&self) -> usize {
        self.particles.len()
    }

    /// Effective sample size 1 / Σ w².
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn posterior_mean(&self) -> Vec<f64> {
        let dim = self.particles[0].len();
        let mut mean = vec![0.0; dim];
        for (p, &w) in self.particles.iter().zip(&self.weights) {
            for (m, &x) in mean.iter_mut().zip(p) {
                *m += w * x;
            }
        }
        mean
    }

    fn column(&self, j: usize) -> Vec<f64> {
        self.particles.iter().map(|p| p[j]).collect()
    }

    /// Weighted mean, quantiles, and a Monte Carlo error based on the ESS.
    pub fn summaries(&self, names: &[String]) -> Result<Vec<ParamSummary>> {
        let dim = self.particles[0].len();
        if names.len() != dim {
            return Err(Error::Config(format!(
                "{} names for {dim} parameters",
                names.len()
            )));
        }
        let ess = self.ess();
        Ok((0..dim)
            .map(|j| {
                let col = self.column(j);
                let mean = numeric::weighted_mean(&col, &self.weights);
                let var = self
                    .weights
                    .iter()
                    .zip(&col)
                    .map(|(w, x)| w * (x - mean) * (x - mean))
                    .sum::<f64>();
                let sd = var.sqrt();
                ParamSummary {
                    name: names[j].clone(),
                    mean,
                    sd,
                    median: numeric::weighted_quantile(&col, &self.weights, 0.5),
                    lo95: numeric::weighted_quantile(&col, &self.weights, 0.025),
                    hi95: numeric::weighted_quantile(&col, &self.weights, 0.975),
                    mcse: sd / ess.sqrt(),
                }
            })
            .collect())
    }

    fn next_streams(&mut self, count: usize) -> u64 {
        let base = self.rng_counter;
        self.rng_counter += count as u64;
        base
    }

    fn stream_rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn check_batch(&self, batch: &ObsWindow) -> Result<()> {
        if !(batch.hi > batch.lo) {
            return Err(Error::Config(format!(
                "batch window ({}, {}] is empty",
                batch.lo, batch.hi
            )));
        }
        if self.frontier.is_finite() && batch.lo < self.frontier - 1e-9 {
            return Err(Error::Config(format!(
                "batch starting at day {} overlaps data already absorbed up to day {}",
                batch.lo, self.frontier
            )));
        }
        Ok(())
    }

    /// Multiply weights into the new normalization, erroring out when every
    /// particle underflowed.
    fn apply_log_weights(&mut self, log_increment: &[f64]) -> Result<()> {
        let logw: Vec<f64> = self
            .weights
            .iter()
            .zip(log_increment)
            .map(|(w, l)| w.ln() + l)
            .collect();
        let norm = log_sum_exp(&logw);
        if norm == f64::NEG_INFINITY || norm.is_nan() {
            return Err(Error::DegenerateEnsemble);
        }
        for (w, l) in self.weights.iter_mut().zip(&logw) {
            *w = (l - norm).exp();
        }
        let total: f64 = self.weights.iter().sum();
        for w in self.weights.iter_mut() {
            *w /= total;
        }
        Ok(())
    }

    fn batch_logliks(&self, graph: &ModelGraph, batch: &ObsWindow) -> Result<Vec<f64>> {
        self.particles
            .par_iter()
            .map(|theta| graph.log_likelihood_windowed(theta, batch))
            .collect()
    }

    /// Absorb a new batch by multiplying its likelihood into the weights.
    ///
    /// Returns the effective sample size after reweighting. The batch must
    /// start at or after the current data frontier.
    pub fn reweight(&mut self, graph: &ModelGraph, batch: &ObsWindow) -> Result<f64> {
        self.check_batch(batch)?;
        let lw = self.batch_logliks(graph, batch)?;
        self.apply_log_weights(&lw)?;
        for (ll, l) in self.log_lik.iter_mut().zip(&lw) {
            *ll += l;
        }
        self.frontier = batch.hi;
        self.batch_index += 1;
        let ess = self.ess();
        log::info!(
            "batch {}: reweighted to ESS {:.1} of {}",
            self.batch_index,
            ess,
            self.n()
        );
        Ok(ess)
    }

    /// Resample to equal weights and rejuvenate when the ESS has collapsed.
    ///
    /// A no-op returning `None` while ESS ≥ `ess_fraction·n`. Otherwise
    /// systematic resampling followed by `jitter_moves` Metropolis moves per
    /// particle targeting the posterior of all absorbed data; returns the
    /// jitter acceptance rate.
    pub fn resample_and_jitter(
        &mut self,
        graph: &ModelGraph,
        config: &SmcConfig,
    ) -> Result<Option<f64>> {
        config.validate()?;
        if self.ess() >= config.ess_fraction * self.n() as f64 {
            return Ok(None);
        }
        self.resample();
        let absorbed = ObsWindow::upto(self.frontier);
        let mut caches = vec![std::mem::take(&mut self.log_lik)];
        let accept = self.jitter(graph, &[absorbed], &[1.0], &mut caches, config.jitter_moves)?;
        self.log_lik = caches.pop().expect("one cache");
        Ok(Some(accept))
    }

    /// Absorb a batch through a tempering ladder: raise the batch likelihood
    /// to exponents 0 < γ_1 < ... < γ_S = 1, resampling and jittering at any
    /// sub-step whose ESS collapses. One step reduces to plain
    /// reweight-then-resample.
    pub fn temper_batch(
        &mut self,
        graph: &ModelGraph,
        batch: &ObsWindow,
        steps: usize,
        config: &SmcConfig,
    ) -> Result<BatchReport> {
        config.validate()?;
        if steps == 0 {
            return Err(Error::Config("tempering needs at least one step".into()));
        }
        if steps == 1 && !config.adaptive_ladder {
            let ess = self.reweight(graph, batch)?;
            let jitter_accept = self.resample_and_jitter(graph, config)?;
            return Ok(BatchReport {
                substeps: vec![SubStep {
                    gamma: 1.0,
                    ess,
                    resampled: jitter_accept.is_some(),
                    jitter_accept,
                }],
            });
        }
        self.check_batch(batch)?;

        let prev = ObsWindow::upto(self.frontier);
        let mut l_batch = self.batch_logliks(graph, batch)?;
        let mut substeps = Vec::new();
        let mut gamma = 0.0;
        let mut step = 0;
        while gamma < 1.0 {
            step += 1;
            let next_gamma = if config.adaptive_ladder {
                if step >= config.max_ladder_steps {
                    1.0
                } else {
                    self.next_adaptive_gamma(gamma, &l_batch, config.cess_target)
                }
            } else {
                (step as f64 / steps as f64).min(1.0)
            };
            let delta = next_gamma - gamma;
            gamma = next_gamma;
            let increment: Vec<f64> = l_batch.iter().map(|l| delta * l).collect();
            self.apply_log_weights(&increment)?;
            let ess = self.ess();
            let mut resampled = false;
            let mut jitter_accept = None;
            if ess < config.ess_fraction * self.n() as f64 {
                resampled = true;
                self.resample_with(&mut l_batch);
                let mut caches =
                    vec![std::mem::take(&mut self.log_lik), std::mem::take(&mut l_batch)];
                let accept = self.jitter(
                    graph,
                    &[prev, *batch],
                    &[1.0, gamma],
                    &mut caches,
                    config.jitter_moves,
                )?;
                l_batch = caches.pop().expect("batch cache");
                self.log_lik = caches.pop().expect("prev cache");
                jitter_accept = Some(accept);
            }
            substeps.push(SubStep {
                gamma,
                ess,
                resampled,
                jitter_accept,
            });
            log::info!(
                "batch {} tempering: gamma {:.3}, ESS {:.1}{}",
                self.batch_index + 1,
                gamma,
                ess,
                if resampled { ", resampled" } else { "" }
            );
        }
        for (ll, l) in self.log_lik.iter_mut().zip(&l_batch) {
            *ll += l;
        }
        self.frontier = batch.hi;
        self.batch_index += 1;
        Ok(BatchReport { substeps })
    }

    /// Absorb a batch using the configuration's tempering depth.
    pub fn absorb_batch(
        &mut self,
        graph: &ModelGraph,
        batch: &ObsWindow,
        config: &SmcConfig,
    ) -> Result<BatchReport> {
        self.temper_batch(graph, batch, config.temper_steps, config)
    }

    /// Largest next exponent whose conditional ESS stays at or above the
    /// target fraction, found by bisection.
    fn next_adaptive_gamma(&self, gamma: f64, l_batch: &[f64], target: f64) -> f64 {
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let log_cess_frac = |delta: f64| {
            let a: Vec<f64> = log_w
                .iter()
                .zip(l_batch)
                .map(|(lw, l)| lw + delta * l)
                .collect();
            let b: Vec<f64> = log_w
                .iter()
                .zip(l_batch)
                .map(|(lw, l)| lw + 2.0 * delta * l)
                .collect();
            2.0 * log_sum_exp(&a) - log_sum_exp(&b)
        };
        let remaining = 1.0 - gamma;
        let target_log = target.ln();
        if log_cess_frac(remaining) >= target_log {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0, remaining);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if log_cess_frac(mid) >= target_log {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let delta = lo.max(remaining * 1e-4);
        gamma + delta
    }

    fn resample(&mut self) {
        let mut none: [Vec<f64>; 0] = [];
        self.resample_into(&mut none);
    }

    fn resample_with(&mut self, extra: &mut Vec<f64>) {
        let mut extras = [std::mem::take(extra)];
        self.resample_into(&mut extras);
        *extra = std::mem::take(&mut extras[0]);
    }

    /// Systematic resampling; any extra per-particle caches are gathered with
    /// the same ancestry.
    fn resample_into(&mut self, extras: &mut [Vec<f64>]) {
        let n = self.n();
        let stream = self.next_streams(1);
        let u: f64 = self.stream_rng(stream).random();
        let mut indices = Vec::with_capacity(n);
        let mut cum = self.weights[0];
        let mut j = 0usize;
        for i in 0..n {
            let target = (i as f64 + u) / n as f64;
            while cum < target && j + 1 < n {
                j += 1;
                cum += self.weights[j];
            }
            indices.push(j);
        }
        self.particles = indices.iter().map(|&k| self.particles[k].clone()).collect();
        self.log_lik = indices.iter().map(|&k| self.log_lik[k]).collect();
        for cache in extras.iter_mut() {
            *cache = indices.iter().map(|&k| cache[k]).collect();
        }
        self.weights = vec![1.0 / n as f64; n];
    }

    /// Metropolis rejuvenation targeting
    /// prior × Π_w likelihood(window_w)^γ_w, using the ensemble covariance on
    /// the unconstrained scale as the proposal shape. `caches[w][j]` holds
    /// each particle's cached window log-likelihoods and is updated in place.
    fn jitter(
        &mut self,
        graph: &ModelGraph,
        windows: &[ObsWindow],
        gammas: &[f64],
        caches: &mut [Vec<f64>],
        moves: usize,
    ) -> Result<f64> {
        if moves == 0 {
            return Ok(0.0);
        }
        let n = self.n();
        let supports = graph.supports();
        let dim = supports.len();

        let z_particles: Vec<Vec<f64>> = self
            .particles
            .iter()
            .map(|p| {
                supports
                    .iter()
                    .zip(p)
                    .map(|(s, &x)| s.to_unconstrained(x))
                    .collect()
            })
            .collect();
        let mut mean = vec![0.0; dim];
        for z in &z_particles {
            for (m, &v) in mean.iter_mut().zip(z) {
                *m += v / n as f64;
            }
        }
        let mut cov = vec![0.0; dim * dim];
        for z in &z_particles {
            for i in 0..dim {
                for k in 0..dim {
                    cov[i * dim + k] += (z[i] - mean[i]) * (z[k] - mean[k]) / (n - 1) as f64;
                }
            }
        }
        for i in 0..dim {
            cov[i * dim + i] = cov[i * dim + i].max(1e-4) + 1e-9;
        }
        let chol = cholesky(&cov, dim)?;
        let scale = 2.38 / (dim as f64).sqrt();

        let base_stream = self.next_streams(n);
        let seed = self.seed;
        let gammas = gammas.to_vec();
        let windows = windows.to_vec();

        struct PState {
            z: Vec<f64>,
            ls: Vec<f64>,
            accepted: usize,
        }
        let mut states: Vec<PState> = z_particles
            .into_iter()
            .enumerate()
            .map(|(j, z)| PState {
                z,
                ls: caches.iter().map(|c| c[j]).collect(),
                accepted: 0,
            })
            .collect();

        let results: Result<Vec<()>> = states
            .par_iter_mut()
            .enumerate()
            .map(|(j, state)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(base_stream + j as u64);
                let theta_of = |z: &[f64]| -> Vec<f64> {
                    supports
                        .iter()
                        .zip(z)
                        .map(|(s, &v)| s.from_unconstrained(v))
                        .collect()
                };
                let jac = |z: &[f64]| -> f64 {
                    supports
                        .iter()
                        .zip(z)
                        .map(|(s, &v)| s.log_jacobian(v))
                        .sum()
                };
                let target_of = |ls: &[f64], z: &[f64], lp: f64| {
                    lp + jac(z) + gammas.iter().zip(ls).map(|(g, l)| g * l).sum::<f64>()
                };
                let theta = theta_of(&state.z);
                let mut current = target_of(&state.ls, &state.z, graph.log_prior(&theta));
                for _ in 0..moves {
                    let xi: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let step = tril_mul(&chol, &xi, dim);
                    let z_new: Vec<f64> = state
                        .z
                        .iter()
                        .zip(&step)
                        .map(|(zv, sv)| zv + scale * sv)
                        .collect();
                    let theta_new = theta_of(&z_new);
                    let lp_new = graph.log_prior(&theta_new);
                    if lp_new == f64::NEG_INFINITY {
                        continue;
                    }
                    let ls_new = graph.log_likelihood_windows(&theta_new, &windows)?;
                    let cand = target_of(&ls_new, &z_new, lp_new);
                    if cand > f64::NEG_INFINITY && rng.random::<f64>().ln() < cand - current {
                        state.z = z_new;
                        state.ls = ls_new;
                        current = cand;
                        state.accepted += 1;
                    }
                }
                Ok(())
            })
            .collect();
        results?;

        let mut accepted = 0usize;
        for (j, state) in states.iter().enumerate() {
            self.particles[j] = supports
                .iter()
                .zip(&state.z)
                .map(|(s, &v)| s.from_unconstrained(v))
                .collect();
            for (cache, &l) in caches.iter_mut().zip(&state.ls) {
                cache[j] = l;
            }
            accepted += state.accepted;
        }
        let rate = accepted as f64 / (n * moves) as f64;
        if rate < 0.02 {
            log::warn!(
                "jitter acceptance {:.3} is near zero; proposal scale {:.3} with covariance floor may be mismatched",
                rate,
                scale
            );
        }
        Ok(rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ObsModel};
    use crate::grid::TimeGrid;
    use crate::mcmc::{run_chain, ChainConfig};
    use crate::prior::PriorSpec;
    use crate::stream::{DataStream, Observation, StreamKind};
    use approx::assert_relative_eq;

    fn obs(t: usize, value: f64, denom: Option<f64>) -> Observation {
        Observation {
            time_index: t,
            age_index: 0,
            value,
            denominator: denom,
            day: 0.0,
        }
    }

    fn bernoulli_graph(y: f64) -> ModelGraph {
        let mut b = GraphBuilder::new();
        let p = b
            .param("p", PriorSpec::Uniform { lo: 0.0, hi: 1.0 })
            .unwrap();
        let psi = b
            .functional("psi", vec![p], move |ctx| Ok(vec![ctx.param(p)?]))
            .unwrap();
        let grid = TimeGrid::new(1.0, 1.0, 2).unwrap();
        let stream =
            DataStream::new(StreamKind::SeroPrevalence, grid, vec![obs(0, y, Some(1.0))]).unwrap();
        b.data("y", psi, ObsModel::BinomialProb, stream).unwrap();
        b.build().unwrap()
    }

    fn beta_binomial_graph() -> ModelGraph {
        let mut b = GraphBuilder::new();
        let p = b
            .param("p", PriorSpec::Uniform { lo: 0.0, hi: 1.0 })
            .unwrap();
        let psi = b
            .functional("psi", vec![p], move |ctx| Ok(vec![ctx.param(p)?]))
            .unwrap();
        let grid = TimeGrid::new(1.0, 1.0, 2).unwrap();
        let stream = DataStream::new(
            StreamKind::SeroPrevalence,
            grid,
            vec![obs(0, 7.0, Some(10.0))],
        )
        .unwrap();
        b.data("y", psi, ObsModel::BinomialProb, stream).unwrap();
        b.build().unwrap()
    }

    fn normal_mean_graph(ys: &[f64], sd: f64) -> ModelGraph {
        let mut b = GraphBuilder::new();
        let mu = b
            .param("mu", PriorSpec::Normal { mean: 0.0, sd: 10.0 })
            .unwrap();
        let n = ys.len();
        let psi = b
            .functional("mean", vec![mu], move |ctx| {
                let m = ctx.param(mu)?;
                Ok(vec![m; n])
            })
            .unwrap();
        let grid = TimeGrid::new(1.0, 1.0, ys.len()).unwrap();
        let stream = DataStream::new(
            StreamKind::PointEstimateLogScale,
            grid,
            ys.iter()
                .enumerate()
                .map(|(t, &y)| obs(t, y, Some(sd)))
                .collect(),
        )
        .unwrap();
        b.data("y", psi, ObsModel::Normal, stream).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn equal_weights_have_full_ess() {
        let graph = beta_binomial_graph();
        let config = SmcConfig {
            n_particles: 128,
            ..Default::default()
        };
        let ensemble = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        assert_relative_eq!(ensemble.ess(), 128.0, epsilon = 1e-9);
        assert_relative_eq!(ensemble.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_particle_weights_follow_likelihood() {
        let graph = bernoulli_graph(1.0);
        let mut ensemble =
            ParticleEnsemble::from_particles(vec![vec![0.2], vec![0.8]], vec![0.5, 0.5], 1)
                .unwrap();
        ensemble.reweight(&graph, &ObsWindow::all()).unwrap();
        assert_relative_eq!(ensemble.weights[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(ensemble.weights[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn identical_particles_keep_equal_weights() {
        let graph = beta_binomial_graph();
        let mut ensemble = ParticleEnsemble::from_particles(
            vec![vec![0.42]; 4],
            vec![0.25; 4],
            1,
        )
        .unwrap();
        ensemble.reweight(&graph, &ObsWindow::all()).unwrap();
        for w in &ensemble.weights {
            assert_relative_eq!(*w, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn sequential_batches_match_single_shot() {
        let ys = [0.4, -0.2, 0.9, 0.1, 0.6, -0.5, 0.3, 0.2, 0.8, 0.0];
        let graph = normal_mean_graph(&ys, 1.0);
        let config = SmcConfig {
            n_particles: 64,
            seed: 3,
            ess_fraction: 0.0,
            ..Default::default()
        };
        let mut sequential = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        let mut single = sequential.clone();
        for batch in day_batches(0.0, 2.0, 5).unwrap() {
            sequential.reweight(&graph, &batch).unwrap();
        }
        single.reweight(&graph, &ObsWindow::upto(10.0)).unwrap();
        for (s, f) in sequential.log_lik.iter().zip(&single.log_lik) {
            assert_relative_eq!(s, f, epsilon = 1e-10);
        }
        for (s, f) in sequential.weights.iter().zip(&single.weights) {
            assert_relative_eq!(s, f, epsilon = 1e-12);
        }
        assert_eq!(sequential.batch_index, 5);
    }

    #[test]
    fn stale_batch_is_rejected() {
        let graph = beta_binomial_graph();
        let config = SmcConfig {
            n_particles: 16,
            ..Default::default()
        };
        let mut ensemble = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        ensemble
            .reweight(&graph, &ObsWindow { lo: 0.0, hi: 5.0 })
            .unwrap();
        let err = ensemble
            .reweight(&graph, &ObsWindow { lo: 2.0, hi: 8.0 })
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn total_underflow_demands_tempering() {
        let graph = bernoulli_graph(1.0);
        let mut ensemble =
            ParticleEnsemble::from_particles(vec![vec![0.0], vec![0.0]], vec![0.5, 0.5], 1)
                .unwrap();
        let err = ensemble.reweight(&graph, &ObsWindow::all()).unwrap_err();
        assert!(matches!(err, Error::DegenerateEnsemble));
    }

    #[test]
    fn collapse_resamples_and_jitter_restores_diversity() {
        let graph = beta_binomial_graph();
        for seed in 0..20 {
            let particles: Vec<Vec<f64>> = (1..=8).map(|i| vec![i as f64 / 10.0]).collect();
            let mut weights = vec![0.0; 8];
            weights[3] = 1.0;
            let mut ensemble = ParticleEnsemble::from_particles(particles, weights, seed).unwrap();
            ensemble.frontier = 1.0;
            ensemble.log_lik = ensemble
                .particles
                .iter()
                .map(|p| graph.log_likelihood_product(p).unwrap())
                .collect();
            let config = SmcConfig {
                n_particles: 8,
                seed,
                ..Default::default()
            };
            let accept = ensemble.resample_and_jitter(&graph, &config).unwrap();
            assert!(accept.is_some(), "ESS of 1 must trigger resampling");
            let distinct: std::collections::BTreeSet<u64> = ensemble
                .particles
                .iter()
                .map(|p| p[0].to_bits())
                .collect();
            assert!(distinct.len() > 1, "seed {seed}: jitter left clones");
            assert_relative_eq!(ensemble.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn healthy_ess_skips_resampling() {
        let graph = beta_binomial_graph();
        let config = SmcConfig {
            n_particles: 32,
            seed: 9,
            ..Default::default()
        };
        let mut ensemble = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        let before = ensemble.particles.clone();
        let out = ensemble.resample_and_jitter(&graph, &config).unwrap();
        assert!(out.is_none());
        assert_eq!(ensemble.particles, before);
    }

    #[test]
    fn one_step_tempering_equals_reweight_then_resample() {
        let graph = beta_binomial_graph();
        let config = SmcConfig {
            n_particles: 64,
            seed: 5,
            ..Default::default()
        };
        let batch = ObsWindow { lo: 0.0, hi: 1.0 };
        let mut a = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        let mut b = a.clone();
        a.temper_batch(&graph, &batch, 1, &config).unwrap();
        b.reweight(&graph, &batch).unwrap();
        b.resample_and_jitter(&graph, &config).unwrap();
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.batch_index, b.batch_index);
    }

    #[test]
    fn ladder_telescopes_to_full_likelihood() {
        let ys = [0.4, -0.2, 0.9, 0.1];
        let graph = normal_mean_graph(&ys, 1.0);
        let config = SmcConfig {
            n_particles: 64,
            seed: 7,
            ess_fraction: 0.0,
            ..Default::default()
        };
        let batch = ObsWindow { lo: 0.0, hi: 4.0 };
        let mut tempered = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        let mut plain = tempered.clone();
        let report = tempered.temper_batch(&graph, &batch, 4, &config).unwrap();
        assert_eq!(report.substeps.len(), 4);
        assert_relative_eq!(report.substeps.last().unwrap().gamma, 1.0);
        plain.reweight(&graph, &batch).unwrap();
        for (t, p) in tempered.log_lik.iter().zip(&plain.log_lik) {
            assert_relative_eq!(t, p, epsilon = 1e-10);
        }
        for (t, p) in tempered.weights.iter().zip(&plain.weights) {
            assert_relative_eq!(t, p, epsilon = 1e-10);
        }
    }

    #[test]
    fn smc_matches_conjugate_posterior() {
        let graph = beta_binomial_graph();
        let config = SmcConfig {
            n_particles: 4000,
            seed: 11,
            ess_fraction: 0.0,
            ..Default::default()
        };
        let mut ensemble = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        ensemble.absorb_batch(&graph, &ObsWindow::all(), &config).unwrap();
        let summary = &ensemble.summaries(&["p".into()]).unwrap()[0];
        let exact = 8.0 / 12.0;
        assert!(
            (summary.mean - exact).abs() <= 3.0 * summary.mcse,
            "mean {} vs {exact} (mcse {})",
            summary.mean,
            summary.mcse
        );
    }

    #[test]
    fn smc_and_mcmc_agree_on_the_same_posterior() {
        let ys = [0.4, -0.2, 0.9, 0.1, 0.6, -0.5];
        let graph = normal_mean_graph(&ys, 1.0);
        let smc_config = SmcConfig {
            n_particles: 4000,
            seed: 21,
            temper_steps: 2,
            ..Default::default()
        };
        let mut ensemble = ParticleEnsemble::from_prior(&graph, &smc_config).unwrap();
        for batch in day_batches(0.0, 3.0, 2).unwrap() {
            ensemble.absorb_batch(&graph, &batch, &smc_config).unwrap();
        }
        let smc = &ensemble.summaries(&["mu".into()]).unwrap()[0];
        let chain_config = ChainConfig {
            iterations: 20_000,
            burn_in: 4_000,
            seed: 22,
            ..Default::default()
        };
        let sample = run_chain(&graph, &chain_config).unwrap();
        let mcmc_mean = sample.mean(0);
        let mcmc_mcse = sample.mcse(0).unwrap();
        let combined = (smc.mcse.powi(2) + mcmc_mcse.powi(2)).sqrt();
        assert!(
            (smc.mean - mcmc_mean).abs() <= 3.0 * combined,
            "SMC {} vs MCMC {mcmc_mean} (combined mcse {combined})",
            smc.mean
        );
    }

    #[test]
    fn tempering_survives_a_shock_where_plain_reweight_collapses() {
        let mut ys = vec![0.0; 20];
        ys.extend(vec![0.26; 20]);
        let graph = normal_mean_graph(&ys, 0.2);
        let config = SmcConfig {
            n_particles: 1000,
            seed: 31,
            ..Default::default()
        };
        let first = ObsWindow { lo: 0.0, hi: 20.0 };
        let shock = ObsWindow { lo: 20.0, hi: 40.0 };

        let mut base = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        base.absorb_batch(&graph, &first, &config).unwrap();

        let mut plain = base.clone();
        let plain_ess = plain.reweight(&graph, &shock).unwrap();
        assert!(
            plain_ess < 0.01 * 1000.0,
            "plain reweight kept ESS {plain_ess}"
        );

        let mut tempered = base;
        let report = tempered.temper_batch(&graph, &shock, 5, &config).unwrap();
        let min_ess = report.min_ess();
        assert!(
            min_ess >= 0.1 * 1000.0,
            "tempered minimum ESS {min_ess} of 1000"
        );
    }

    #[test]
    fn adaptive_ladder_reaches_full_power() {
        let ys = [1.2, 0.8, 1.1, 0.9, 1.3, 0.7];
        let graph = normal_mean_graph(&ys, 0.3);
        let config = SmcConfig {
            n_particles: 500,
            seed: 41,
            adaptive_ladder: true,
            cess_target: 0.9,
            ..Default::default()
        };
        let mut ensemble = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        let report = ensemble
            .temper_batch(&graph, &ObsWindow { lo: 0.0, hi: 6.0 }, 10, &config)
            .unwrap();
        let last = report.substeps.last().unwrap();
        assert_relative_eq!(last.gamma, 1.0);
        let gammas: Vec<f64> = report.substeps.iter().map(|s| s.gamma).collect();
        for pair in gammas.windows(2) {
            assert!(pair[1] > pair[0], "ladder must increase: {gammas:?}");
        }
        assert!(ensemble.batch_index == 1);
    }

    #[test]
    fn fixed_seed_reproduces_the_whole_trajectory() {
        let ys = [0.4, -0.2, 0.9, 0.1, 0.6, -0.5];
        let graph = normal_mean_graph(&ys, 0.5);
        let run = |seed: u64| {
            let config = SmcConfig {
                n_particles: 256,
                seed,
                temper_steps: 3,
                ..Default::default()
            };
            let mut ensemble = ParticleEnsemble::from_prior(&graph, &config).unwrap();
            for batch in day_batches(0.0, 2.0, 3).unwrap() {
                ensemble.absorb_batch(&graph, &batch, &config).unwrap();
            }
            ensemble
        };
        let a = run(2);
        let b = run(2);
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log_lik, b.log_lik);
        let c = run(3);
        assert_ne!(a.particles, c.particles);
    }

    #[test]
    fn ess_stays_within_bounds() {
        let graph = beta_binomial_graph();
        let config = SmcConfig {
            n_particles: 100,
            seed: 51,
            ..Default::default()
        };
        let mut ensemble = ParticleEnsemble::from_prior(&graph, &config).unwrap();
        ensemble.reweight(&graph, &ObsWindow::all()).unwrap();
        let ess = ensemble.ess();
        assert!((1.0..=100.0 + 1e-9).contains(&ess), "ESS {ess}");
    }
}
