//! Adaptive random-walk Metropolis sampling with deviance accounting.
//!
//! Parameters are proposed on unconstrained transforms of their supports
//! (logit for bounded, log for positive) with the matching Jacobian terms, so
//! the walker never wastes proposals outside the prior's domain. The
//! covariance of past draws shapes the proposal and a Robbins-Monro update
//! steers the global scale toward a target acceptance rate; both adaptations
//! freeze at the end of burn-in, after which the kernel is a fixed
//! Metropolis-Hastings transition.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::numeric::{self, cholesky, tril_mul};
use crate::prior::Support;

/// A sampling target: a log-density over a fixed-dimension parameter vector
/// whose components carry their own supports.
pub trait Posterior: Sync {
    fn dim(&self) -> usize;

    fn supports(&self) -> Vec<Support>;

    /// Unnormalized log-density at `theta` on the natural scale. Impossible
    /// points return negative infinity; structural problems are hard errors.
    fn log_density(&self, theta: &[f64]) -> Result<f64>;

    /// A candidate starting point, usually a prior draw.
    fn initial_draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta[{i}]")).collect()
    }

    /// Names of per-observation-node deviance entries, if the target has any.
    fn node_names(&self) -> Vec<String> {
        Vec::new()
    }

    /// Per-node deviance (-2 log-likelihood) at `theta`, if the target has
    /// data nodes.
    fn node_deviance(&self, _theta: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

impl Posterior for ModelGraph {
    fn dim(&self) -> usize {
        ModelGraph::dim(self)
    }

    fn supports(&self) -> Vec<Support> {
        ModelGraph::supports(self)
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        self.log_posterior(theta)
    }

    fn initial_draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut rng = rng;
        Ok(self.sample_prior(&mut rng))
    }

    fn param_names(&self) -> Vec<String> {
        ModelGraph::param_names(self)
    }

    fn node_names(&self) -> Vec<String> {
        self.data_nodes().iter().map(|n| n.name.clone()).collect()
    }

    fn node_deviance(&self, theta: &[f64]) -> Result<Option<Vec<f64>>> {
        self.deviance_by_node(theta).map(Some)
    }
}

/// Tuning knobs for one chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Total iterations, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
    pub seed: u64,
    /// Refresh the proposal covariance from past draws every this many
    /// burn-in iterations.
    pub adapt_window: usize,
    pub target_accept: f64,
    /// Multiplier on the initial identity proposal.
    pub initial_scale: f64,
    /// Attempts at finding a finite-density starting point.
    pub init_tries: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 5_000,
            thin: 1,
            seed: 0,
            adapt_window: 50,
            target_accept: 0.234,
            initial_scale: 1.0,
            init_tries: 100,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Config(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thinning interval must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target acceptance rate {} must lie in (0, 1)",
                self.target_accept
            )));
        }
        if !(self.initial_scale > 0.0) {
            return Err(Error::Config("initial proposal scale must be positive".into()));
        }
        if self.adapt_window == 0 {
            return Err(Error::Config("adaptation window must be at least 1".into()));
        }
        if self.init_tries == 0 {
            return Err(Error::Config("need at least one initialization attempt".into()));
        }
        Ok(())
    }
}

/// Post-burn-in draws from one chain, on the natural scale.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub names: Vec<String>,
    /// Draw-major matrix; columns follow `names`.
    pub draws: Vec<Vec<f64>>,
    /// Log-density (natural scale, no Jacobian terms) of each kept draw.
    pub log_posterior: Vec<f64>,
    pub node_names: Vec<String>,
    /// Per-node deviance at each kept draw (draw-major); empty when the
    /// target has no data nodes.
    pub node_deviance: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate.
    pub accept_rate: f64,
}

impl PosteriorSample {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    pub fn mean(&self, j: usize) -> f64 {
        numeric::mean(&self.column(j))
    }

    /// Monte Carlo standard error of the mean of column `j`, by batch means.
    pub fn mcse(&self, j: usize) -> Result<f64> {
        mcse_batch_means(&self.column(j))
    }

    /// Mean, quantiles, and MCSE for every parameter.
    pub fn summaries(&self) -> Result<Vec<ParamSummary>> {
        (0..self.dim())
            .map(|j| {
                let col = self.column(j);
                Ok(ParamSummary {
                    name: self.names[j].clone(),
                    mean: numeric::mean(&col),
                    sd: numeric::sd(&col),
                    median: numeric::quantile(&col, 0.5),
                    lo95: numeric::quantile(&col, 0.025),
                    hi95: numeric::quantile(&col, 0.975),
                    mcse: mcse_batch_means(&col)?,
                })
            })
            .collect()
    }
}

/// Location and spread of one marginal posterior.
#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub mcse: f64,
}

struct RunningCov {
    n: usize,
    mean: Vec<f64>,
    /// Row-major accumulated outer products.
    m2: Vec<f64>,
}

impl RunningCov {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let dim = x.len();
        self.n += 1;
        let w = 1.0 / self.n as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, mi)| xi - mi).collect();
        for (mi, di) in self.mean.iter_mut().zip(&delta) {
            *mi += w * di;
        }
        for i in 0..dim {
            let d2i = x[i] - self.mean[i];
            for j in 0..dim {
                self.m2[i * dim + j] += delta[j] * d2i;
            }
        }
    }

    fn covariance(&self) -> Option<Vec<f64>> {
        if self.n < 2 {
            return None;
        }
        let denom = (self.n - 1) as f64;
        Some(self.m2.iter().map(|v| v / denom).collect())
    }
}

fn to_z(supports: &[Support], theta: &[f64]) -> Vec<f64> {
    supports
        .iter()
        .zip(theta)
        .map(|(s, &x)| s.to_unconstrained(x))
        .collect()
}

fn to_theta(supports: &[Support], z: &[f64]) -> Vec<f64> {
    supports
        .iter()
        .zip(z)
        .map(|(s, &zi)| s.from_unconstrained(zi))
        .collect()
}

fn log_jacobian_sum(supports: &[Support], z: &[f64]) -> f64 {
    supports
        .iter()
        .zip(z)
        .map(|(s, &zi)| s.log_jacobian(zi))
        .sum()
}

/// Run one adaptive Metropolis chain.
///
/// The chain's RNG stream is derived from `config.seed`, so the same
/// configuration reproduces the same draws exactly.
pub fn run_chain<P: Posterior>(posterior: &P, config: &ChainConfig) -> Result<PosteriorSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_chain_on(posterior, config, &mut rng)
}

/// Run independent chains in parallel, one RNG substream per chain.
pub fn run_chains<P: Posterior>(
    posterior: &P,
    config: &ChainConfig,
    n_chains: usize,
) -> Result<Vec<PosteriorSample>> {
    if n_chains == 0 {
        return Err(Error::Config("need at least one chain".into()));
    }
    (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64);
            run_chain_on(posterior, config, &mut rng)
        })
        .collect()
}

fn run_chain_on<P: Posterior>(
    posterior: &P,
    config: &ChainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PosteriorSample> {
    config.validate()?;
    let dim = posterior.dim();
    if dim == 0 {
        return Err(Error::Config("cannot sample a zero-dimensional posterior".into()));
    }
    let supports = posterior.supports();

    let mut z = None;
    for _ in 0..config.init_tries {
        let theta = posterior.initial_draw(rng)?;
        if posterior.log_density(&theta)? > f64::NEG_INFINITY {
            let cand = to_z(&supports, &theta);
            if cand.iter().all(|v| v.is_finite()) {
                z = Some(cand);
                break;
            }
        }
    }
    let mut z = z.ok_or(Error::InitFailure {
        tries: config.init_tries,
    })?;

    let z_density = |zv: &[f64]| -> Result<(f64, f64)> {
        let theta = to_theta(&supports, zv);
        let natural = posterior.log_density(&theta)?;
        if natural == f64::NEG_INFINITY {
            return Ok((f64::NEG_INFINITY, f64::NEG_INFINITY));
        }
        Ok((natural + log_jacobian_sum(&supports, zv), natural))
    };
    let (mut lp_z, mut lp_natural) = z_density(&z)?;

    let sd_factor = (2.38 * 2.38 / dim as f64).sqrt();
    let mut log_scale = config.initial_scale.ln();
    let mut chol = vec![0.0; dim * dim];
    for i in 0..dim {
        chol[i * dim + i] = 1.0;
    }
    let mut history = RunningCov::new(dim);

    let kept_cap = (config.iterations - config.burn_in).div_ceil(config.thin);
    let mut draws = Vec::with_capacity(kept_cap);
    let mut log_posterior = Vec::with_capacity(kept_cap);
    let mut node_deviance = Vec::new();
    let mut accepted_post = 0usize;

    let mut xi = vec![0.0; dim];
    for t in 0..config.iterations {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let step = tril_mul(&chol, &xi, dim);
        let scale = sd_factor * log_scale.exp();
        let proposal: Vec<f64> = z.iter().zip(&step).map(|(zi, si)| zi + scale * si).collect();
        let (cand_lp_z, cand_lp_nat) = z_density(&proposal)?;
        let accept = cand_lp_z > f64::NEG_INFINITY
            && rng.random::<f64>().ln() < cand_lp_z - lp_z;
        if accept {
            z = proposal;
            lp_z = cand_lp_z;
            lp_natural = cand_lp_nat;
        }

        if t < config.burn_in {
            let gamma = (t as f64 + 1.0).powf(-0.6);
            let alpha = if accept { 1.0 } else { 0.0 };
            log_scale += gamma * (alpha - config.target_accept);
            history.push(&z);
            if (t + 1) % config.adapt_window == 0 && history.n >= 2 * dim.max(5) {
                if let Some(mut cov) = history.covariance() {
                    for i in 0..dim {
                        cov[i * dim + i] += 1e-6;
                    }
                    if let Ok(l) = cholesky(&cov, dim) {
                        chol = l;
                    }
                }
            }
        } else {
            if accept {
                accepted_post += 1;
            }
            if (t - config.burn_in) % config.thin == 0 {
                let theta = to_theta(&supports, &z);
                if let Some(dev) = posterior.node_deviance(&theta)? {
                    node_deviance.push(dev);
                }
                draws.push(theta);
                log_posterior.push(lp_natural);
            }
        }
    }

    let accept_rate = accepted_post as f64 / (config.iterations - config.burn_in) as f64;
    log::info!(
        "chain finished: {} kept draws, post-burn-in acceptance {:.3}",
        draws.len(),
        accept_rate
    );
    Ok(PosteriorSample {
        names: posterior.param_names(),
        draws,
        log_posterior,
        node_names: posterior.node_names(),
        node_deviance,
        accept_rate,
    })
}

/// Monte Carlo standard error of the mean by non-overlapping batch means.
pub fn mcse_batch_means(x: &[f64]) -> Result<f64> {
    if x.len() < 16 {
        return Err(Error::Config(format!(
            "{} draws is too few for a batch-means error estimate",
            x.len()
        )));
    }
    let n_batches = (x.len() as f64).sqrt().floor() as usize;
    let batch = x.len() / n_batches;
    let means: Vec<f64> = (0..n_batches)
        .map(|b| numeric::mean(&x[b * batch..(b + 1) * batch]))
        .collect();
    Ok(numeric::sd(&means) / (n_batches as f64).sqrt())
}

/// Split-chain potential scale reduction: each chain is halved and the usual
/// between/within variance ratio is computed over the halves, so a single
/// drifting chain is caught even when chains agree with each other.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.is_empty() {
        return Err(Error::Config("no chains to diagnose".into()));
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        if c.len() < 4 {
            return Err(Error::Config(format!(
                "chain of length {} is too short to split",
                c.len()
            )));
        }
        let half = c.len() / 2;
        halves.push(&c[..half]);
        halves.push(&c[half..2 * half]);
    }
    let n = halves[0].len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| numeric::mean(h)).collect();
    let within = numeric::mean(&halves.iter().map(|h| numeric::variance(h)).collect::<Vec<_>>());
    let between = n * numeric::variance(&means);
    if within <= 0.0 {
        return Ok(if between <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    Ok((var_plus / within).sqrt())
}

/// One row of a deviance table.
#[derive(Debug, Clone, Serialize)]
pub struct DevianceRow {
    pub node: String,
    /// Posterior mean deviance.
    pub mean_deviance: f64,
    /// Deviance at the posterior mean (taken on the unconstrained scale).
    pub plugin_deviance: f64,
    /// Effective number of parameters.
    pub p_d: f64,
    pub dic: f64,
}

impl DevianceRow {
    pub fn new(node: impl Into<String>, mean_deviance: f64, plugin_deviance: f64) -> Self {
        let p_d = mean_deviance - plugin_deviance;
        Self {
            node: node.into(),
            mean_deviance,
            plugin_deviance,
            p_d,
            dic: mean_deviance + p_d,
        }
    }
}

/// Per-node deviance table plus the all-node total.
#[derive(Debug, Clone, Serialize)]
pub struct DevianceSummary {
    pub rows: Vec<DevianceRow>,
    pub total: DevianceRow,
}

/// Deviance table for a sampled graph posterior: per-node posterior mean
/// deviance, plug-in deviance at the posterior mean (computed on the
/// unconstrained scale so constrained parameters keep valid means), effective
/// parameter count, and DIC.
pub fn deviance_summary(graph: &ModelGraph, sample: &PosteriorSample) -> Result<DevianceSummary> {
    if sample.draws.is_empty() {
        return Err(Error::Config("empty sample has no deviance summary".into()));
    }
    let node_names = Posterior::node_names(graph);
    let n_nodes = node_names.len();
    if n_nodes == 0 {
        return Err(Error::Config("graph has no data nodes to summarize".into()));
    }
    let stored = sample.node_deviance.len() == sample.draws.len()
        && sample.node_deviance.iter().all(|d| d.len() == n_nodes);
    let mut mean_dev = vec![0.0; n_nodes];
    for (i, draw) in sample.draws.iter().enumerate() {
        let dev = if stored {
            sample.node_deviance[i].clone()
        } else {
            graph.deviance_by_node(draw)?
        };
        for (m, d) in mean_dev.iter_mut().zip(&dev) {
            *m += d;
        }
    }
    for m in mean_dev.iter_mut() {
        *m /= sample.draws.len() as f64;
    }

    let supports = ModelGraph::supports(graph);
    let dim = sample.names.len();
    let mut z_mean = vec![0.0; dim];
    for draw in &sample.draws {
        for (zm, (s, &x)) in z_mean.iter_mut().zip(supports.iter().zip(draw)) {
            *zm += s.to_unconstrained(x);
        }
    }
    for zm in z_mean.iter_mut() {
        *zm /= sample.draws.len() as f64;
    }
    let plug = to_theta(&supports, &z_mean);
    let plug_dev = graph.deviance_by_node(&plug)?;

    let rows: Vec<DevianceRow> = node_names
        .iter()
        .zip(mean_dev.iter().zip(&plug_dev))
        .map(|(name, (&m, &p))| DevianceRow::new(name.clone(), m, p))
        .collect();
    let total = DevianceRow::new(
        "total",
        mean_dev.iter().sum::<f64>(),
        plug_dev.iter().sum::<f64>(),
    );
    Ok(DevianceSummary { rows, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ObsModel};
    use crate::grid::TimeGrid;
    use crate::prior::PriorSpec;
    use crate::stream::{DataStream, Observation, StreamKind};
    use approx::assert_relative_eq;

    struct StdNormal;

    impl Posterior for StdNormal {
        fn dim(&self) -> usize {
            1
        }

        fn supports(&self) -> Vec<Support> {
            vec![Support::Real]
        }

        fn log_density(&self, theta: &[f64]) -> Result<f64> {
            Ok(-0.5 * theta[0] * theta[0])
        }

        fn initial_draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
            let z: f64 = StandardNormal.sample(&mut &mut *rng);
            Ok(vec![3.0 * z])
        }
    }

    fn obs(t: usize, value: f64, denom: Option<f64>) -> Observation {
        Observation {
            time_index: t,
            age_index: 0,
            value,
            denominator: denom,
            day: 0.0,
        }
    }

    fn beta_binomial_graph() -> ModelGraph {
        let mut b = GraphBuilder::new();
        let p = b
            .param("p", PriorSpec::Uniform { lo: 0.0, hi: 1.0 })
            .unwrap();
        let psi = b
            .functional("psi", vec![p], move |ctx| Ok(vec![ctx.param(p)?]))
            .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let stream = DataStream::new(
            StreamKind::SeroPrevalence,
            grid,
            vec![obs(0, 7.0, Some(10.0))],
        )
        .unwrap();
        b.data("y", psi, ObsModel::BinomialProb, stream).unwrap();
        b.build().unwrap()
    }

    fn normal_mean_graph(ys: &[f64]) -> ModelGraph {
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
        let grid = TimeGrid::new(0.0, 1.0, ys.len()).unwrap();
        let stream = DataStream::new(
            StreamKind::PointEstimateLogScale,
            grid,
            ys.iter()
                .enumerate()
                .map(|(t, &y)| obs(t, y, Some(1.0)))
                .collect(),
        )
        .unwrap();
        b.data("y", psi, ObsModel::Normal, stream).unwrap();
        b.build().unwrap()
    }

    fn quick_config(seed: u64) -> ChainConfig {
        ChainConfig {
            iterations: 12_000,
            burn_in: 2_000,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn standard_normal_target_is_recovered() {
        let config = ChainConfig {
            iterations: 60_000,
            burn_in: 10_000,
            seed: 1,
            ..Default::default()
        };
        let sample = run_chain(&StdNormal, &config).unwrap();
        let mean = sample.mean(0);
        let mcse = sample.mcse(0).unwrap();
        assert!(mean.abs() <= 3.0 * mcse, "mean {mean} (mcse {mcse})");
        let var = numeric::variance(&sample.column(0));
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn beta_binomial_posterior_mean_is_conjugate() {
        let graph = beta_binomial_graph();
        let sample = run_chain(&graph, &quick_config(2)).unwrap();
        let mean = sample.mean(0);
        let mcse = sample.mcse(0).unwrap();
        let exact = 8.0 / 12.0;
        assert!(
            (mean - exact).abs() <= 3.0 * mcse,
            "mean {mean} vs {exact} (mcse {mcse})"
        );
        assert!(sample.log_posterior.iter().all(|lp| lp.is_finite()));
        assert_eq!(sample.node_names, vec!["y".to_string()]);
        assert_eq!(sample.node_deviance.len(), sample.n_draws());
    }

    #[test]
    fn chains_are_deterministic_and_streams_differ() {
        let graph = beta_binomial_graph();
        let a = run_chain(&graph, &quick_config(5)).unwrap();
        let b = run_chain(&graph, &quick_config(5)).unwrap();
        assert_eq!(a.draws, b.draws);
        let pair = run_chains(&graph, &quick_config(5), 2).unwrap();
        assert_eq!(pair[0].draws, a.draws);
        assert_ne!(pair[1].draws, a.draws);
    }

    #[test]
    fn acceptance_rate_lands_near_target() {
        let graph = beta_binomial_graph();
        let sample = run_chain(&graph, &quick_config(3)).unwrap();
        assert!(
            sample.accept_rate >= 0.1 && sample.accept_rate <= 0.5,
            "acceptance {}",
            sample.accept_rate
        );
    }

    #[test]
    fn initialization_failure_is_reported() {
        struct Impossible;
        impl Posterior for Impossible {
            fn dim(&self) -> usize {
                1
            }
            fn supports(&self) -> Vec<Support> {
                vec![Support::Real]
            }
            fn log_density(&self, _: &[f64]) -> Result<f64> {
                Ok(f64::NEG_INFINITY)
            }
            fn initial_draw(&self, _: &mut dyn RngCore) -> Result<Vec<f64>> {
                Ok(vec![0.0])
            }
        }
        match run_chain(&Impossible, &ChainConfig::default()) {
            Err(Error::InitFailure { tries }) => assert_eq!(tries, 100),
            other => panic!("expected initialization failure, got {other:?}"),
        }
    }

    #[test]
    fn mcse_shrinks_like_root_n() {
        let graph = beta_binomial_graph();
        let short = ChainConfig {
            iterations: 7_000,
            burn_in: 2_000,
            seed: 11,
            ..Default::default()
        };
        let long = ChainConfig {
            iterations: 22_000,
            burn_in: 2_000,
            seed: 11,
            ..Default::default()
        };
        let a = run_chain(&graph, &short).unwrap();
        let b = run_chain(&graph, &long).unwrap();
        let ratio = b.mcse(0).unwrap() / a.mcse(0).unwrap();
        assert!(
            (0.35..=0.65).contains(&ratio),
            "mcse ratio {ratio} not consistent with 1/sqrt(n)"
        );
    }

    #[test]
    fn split_halves_agree_after_freezing() {
        let graph = beta_binomial_graph();
        let sample = run_chain(&graph, &quick_config(7)).unwrap();
        let col = sample.column(0);
        let half = col.len() / 2;
        let (first, second) = (&col[..half], &col[half..]);
        let m1 = numeric::mean(first);
        let m2 = numeric::mean(second);
        let se = (mcse_batch_means(first).unwrap().powi(2)
            + mcse_batch_means(second).unwrap().powi(2))
        .sqrt();
        assert!((m1 - m2).abs() <= 3.0 * se, "halves {m1} vs {m2} (se {se})");
    }

    #[test]
    fn split_rhat_flags_disagreeing_chains() {
        let graph = beta_binomial_graph();
        let chains = run_chains(&graph, &quick_config(13), 2).unwrap();
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(0)).collect();
        let rhat = split_rhat(&cols).unwrap();
        assert!(rhat < 1.05, "rhat {rhat}");
        let shifted: Vec<Vec<f64>> = vec![
            cols[0].clone(),
            cols[1].iter().map(|v| v + 0.3).collect(),
        ];
        assert!(split_rhat(&shifted).unwrap() > 1.2);
    }

    #[test]
    fn degenerate_sample_has_zero_effective_parameters() {
        let graph = beta_binomial_graph();
        let draw = vec![0.4];
        let dev = graph.deviance_by_node(&draw).unwrap();
        let sample = PosteriorSample {
            names: ModelGraph::param_names(&graph),
            draws: vec![draw.clone(), draw.clone(), draw],
            log_posterior: vec![0.0; 3],
            node_names: Posterior::node_names(&graph),
            node_deviance: vec![dev.clone(), dev.clone(), dev],
            accept_rate: 0.0,
        };
        let summary = deviance_summary(&graph, &sample).unwrap();
        assert_relative_eq!(summary.total.p_d, 0.0, epsilon = 1e-10);
        assert_relative_eq!(summary.total.dic, summary.total.mean_deviance, epsilon = 1e-10);
    }

    #[test]
    fn deviance_row_arithmetic_matches_published_table() {
        let row = DevianceRow::new("sero", 1.32, 0.32);
        assert!((row.p_d - 1.01).abs() <= 0.02);
        assert!((row.dic - 2.33).abs() <= 0.02);
    }

    #[test]
    fn normal_mean_model_has_one_effective_parameter() {
        let ys = [0.3, -0.5, 1.2, 0.8, -0.1];
        let graph = normal_mean_graph(&ys);
        let config = ChainConfig {
            iterations: 30_000,
            burn_in: 5_000,
            seed: 23,
            ..Default::default()
        };
        let sample = run_chain(&graph, &config).unwrap();
        let summary = deviance_summary(&graph, &sample).unwrap();
        let n = ys.len() as f64;
        let exact_p_d = n / (n + 1.0 / 100.0);
        assert!(
            (summary.total.p_d - exact_p_d).abs() <= 0.1 * exact_p_d,
            "p_d {} vs {exact_p_d}",
            summary.total.p_d
        );
    }

    #[test]
    fn summaries_cover_the_conjugate_interval() {
        let graph = beta_binomial_graph();
        let sample = run_chain(&graph, &quick_config(17)).unwrap();
        let summary = &sample.summaries().unwrap()[0];
        assert_eq!(summary.name, "p");
        assert!(summary.lo95 < 8.0 / 12.0 && 8.0 / 12.0 < summary.hi95);
        assert!(summary.sd > 0.0 && summary.mcse < summary.sd);
        assert!(summary.lo95 < summary.median && summary.median < summary.hi95);
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let bad = ChainConfig {
            iterations: 10,
            burn_in: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ChainConfig {
            thin: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ChainConfig {
            target_accept: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
