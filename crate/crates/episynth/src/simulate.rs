//! Synthetic-data generation and brute-force stochastic oracles.
//!
//! [`simulate_node_values`] forward-samples every data node of a model graph
//! at a known parameter vector, drawing from exactly the distribution the
//! graph scores, so a fit to simulated data is a self-consistency check of
//! the whole pipeline. [`simulate_severity`] and [`simulate_transmission`]
//! wrap this for the two case studies and emit a ground-truth record next to
//! the streams. [`brute_force_immigration_death`] runs the ICU occupancy
//! process event by event as an independent check on its analytic mean path
//! and likelihood.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ObsModel};
use crate::severity::SeverityModel;
use crate::stream::{DataStream, Observation, StreamSet};
use crate::transmission::{
    simulate_trajectory, ObservationParams, TransmissionModel, TransmissionParams,
};

fn draw_binomial<R: Rng>(n: u64, p: f64, rng: &mut R) -> Result<u64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "binomial probability {p} outside [0, 1]"
        )));
    }
    if n == 0 || p == 0.0 {
        return Ok(0);
    }
    if p == 1.0 {
        return Ok(n);
    }
    let dist = Binomial::new(n, p).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.sample(rng))
}

fn draw_poisson<R: Rng>(rate: f64, rng: &mut R) -> Result<u64> {
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::Domain(format!(
            "Poisson rate {rate} must be finite and non-negative"
        )));
    }
    if rate == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(rate).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.sample(rng) as u64)
}

fn draw_negbin<R: Rng>(mean: f64, size: f64, rng: &mut R) -> Result<u64> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(Error::Domain(format!(
            "negative binomial mean {mean} must be finite and non-negative"
        )));
    }
    if !(size > 0.0) || !size.is_finite() {
        return Err(Error::Domain(format!(
            "negative binomial size {size} must be finite and positive"
        )));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let gamma = Gamma::new(size, mean / size).map_err(|e| Error::Domain(e.to_string()))?;
    draw_poisson(gamma.sample(rng), rng)
}

fn draw_normal<R: Rng>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    let dist = Normal::new(mean, sd).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// One forward draw of every data node in the graph at `theta`, keyed by node
/// name, values in each node's observation order.
///
/// Each observation is sampled from the same distribution the graph's
/// likelihood assigns to it. Conditions the likelihood treats as impossible
/// (zero density) are hard errors here: an impossible configuration cannot be
/// simulated from.
pub fn simulate_node_values<R: Rng>(
    graph: &ModelGraph,
    theta: &[f64],
    rng: &mut R,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let psis = graph.psi_by_node(theta)?;
    let mut out = BTreeMap::new();
    for (node, psi) in graph.data_nodes().iter().zip(psis) {
        let per_obs = match node.obs_model {
            ObsModel::BinomialSizeProb | ObsModel::NegBinMeanSizePairs => 2,
            _ => 1,
        };
        if psi.len() != per_obs * node.stream.len() {
            return Err(Error::Config(format!(
                "node '{}': parent produced {} values for {} observations",
                node.name,
                psi.len(),
                node.stream.len()
            )));
        }
        let mut values = Vec::with_capacity(node.stream.len());
        for (i, obs) in node.stream.obs.iter().enumerate() {
            let y = match &node.obs_model {
                ObsModel::BinomialProb => {
                    let n = obs.denominator.expect("validated by DataStream") as u64;
                    draw_binomial(n, psi[i], rng)? as f64
                }
                ObsModel::BinomialSizeProb => {
                    let size = psi[2 * i];
                    let p = psi[2 * i + 1];
                    if !size.is_finite() || size < 0.0 {
                        return Err(Error::Domain(format!(
                            "node '{}': binomial size {size} is not a valid count",
                            node.name
                        )));
                    }
                    draw_binomial(size.floor() as u64, p, rng)? as f64
                }
                ObsModel::NegBin { eta } => {
                    let size = graph.resolve_eta(*eta, theta)?;
                    draw_negbin(psi[i], size, rng)? as f64
                }
                ObsModel::NegBinMeanSizePairs => {
                    draw_negbin(psi[2 * i], psi[2 * i + 1], rng)? as f64
                }
                ObsModel::Poisson => draw_poisson(psi[i], rng)? as f64,
                ObsModel::Normal => {
                    let sd = obs.denominator.expect("validated by DataStream");
                    draw_normal(psi[i], sd, rng)?
                }
                ObsModel::NormalLogPoint => {
                    let sigma = obs.denominator.expect("validated by DataStream");
                    if !(psi[i] > 0.0) {
                        return Err(Error::Domain(format!(
                            "node '{}': cannot take a log-scale point estimate of {}",
                            node.name, psi[i]
                        )));
                    }
                    draw_normal(psi[i].ln(), sigma, rng)?
                }
            };
            values.push(y);
        }
        out.insert(node.name.clone(), values);
    }
    Ok(out)
}

/// Assemble a parameter vector from values keyed by parameter name.
///
/// Every free parameter must be present and every key must name a free
/// parameter, so a typo in a truth file fails loudly instead of silently
/// simulating from a different model.
pub fn theta_from_named(graph: &ModelGraph, values: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    for name in values.keys() {
        if graph.param_index(name).is_none() {
            return Err(Error::Config(format!(
                "'{name}' is not a free parameter of the graph"
            )));
        }
    }
    graph
        .param_names()
        .iter()
        .map(|n| {
            values.get(n).copied().ok_or_else(|| {
                Error::Config(format!("missing truth value for parameter '{n}'"))
            })
        })
        .collect()
}

fn stream_with_values(stream: &DataStream, obs: Vec<Observation>) -> Result<DataStream> {
    DataStream::new(stream.kind, stream.grid, obs)
}

/// The generating parameters and latent counts behind a severity simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeverityTruth {
    /// Free parameter values keyed by graph parameter name.
    pub params: BTreeMap<String, f64>,
    /// Latent counts [infected, symptomatic, hospitalized, ICU, died] keyed
    /// by the per-wave, per-age functional that produced them.
    pub counts: BTreeMap<String, Vec<f64>>,
}

/// Simulated severity data: one stream set per wave plus the truth record.
#[derive(Debug, Clone)]
pub struct SeveritySimulation {
    pub waves: Vec<StreamSet>,
    pub truth: SeverityTruth,
}

/// Forward-simulate a built severity model at known parameter values.
///
/// The input stream sets act as templates: the layout, denominators, and
/// grids are kept and only the observed values are replaced by draws. The
/// same templates can then be fed back into a fit.
pub fn simulate_severity<R: Rng>(
    model: &SeverityModel,
    templates: &[StreamSet],
    truth: &BTreeMap<String, f64>,
    rng: &mut R,
) -> Result<SeveritySimulation> {
    let theta = theta_from_named(&model.graph, truth)?;
    let sims = simulate_node_values(&model.graph, &theta, rng)?;

    let mut waves = Vec::with_capacity(templates.len());
    for (wave_idx, templates) in templates.iter().enumerate() {
        let w = wave_idx + 1;
        let mut set = StreamSet::default();
        for (role, stream) in templates.iter() {
            let mut obs = Vec::with_capacity(stream.len());
            let wave_node = format!("w{w}.{role}");
            if let Some(values) = sims.get(&wave_node) {
                for (o, &v) in stream.obs.iter().zip(values) {
                    obs.push(Observation { value: v, ..o.clone() });
                }
            } else {
                let mut ages: Vec<usize> = stream.obs.iter().map(|o| o.age_index).collect();
                ages.sort_unstable();
                ages.dedup();
                for a in ages {
                    let node = format!("w{w}.{role}[{}]", model.ages.label(a));
                    let values = sims.get(&node).ok_or_else(|| {
                        Error::Config(format!(
                            "no data node matches stream '{role}' in wave {w}"
                        ))
                    })?;
                    let sub = stream.filter_age(a);
                    for (o, &v) in sub.obs.iter().zip(values) {
                        obs.push(Observation { value: v, ..o.clone() });
                    }
                }
            }
            set.insert(role, stream_with_values(stream, obs)?)?;
        }
        waves.push(set);
    }

    let mut counts = BTreeMap::new();
    for w in 1..=templates.len() {
        for label in model.ages.labels() {
            let name = format!("w{w}.counts[{label}]");
            counts.insert(name.clone(), model.graph.functional_values(&theta, &name)?);
        }
    }
    let params = model
        .graph
        .param_names()
        .into_iter()
        .zip(theta.iter().copied())
        .collect();
    Ok(SeveritySimulation {
        waves,
        truth: SeverityTruth { params, counts },
    })
}

/// The generating configuration behind a transmission simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransmissionTruth {
    /// Free parameter values keyed by graph parameter name.
    pub theta: BTreeMap<String, f64>,
    pub params: TransmissionParams,
    pub obs_params: ObservationParams,
    pub r0: f64,
    pub attack_rate: f64,
}

/// Simulated surveillance data plus the truth record.
#[derive(Debug, Clone)]
pub struct TransmissionSimulation {
    pub streams: StreamSet,
    pub truth: TransmissionTruth,
}

fn transmission_role(node_name: &str) -> Option<&'static str> {
    use crate::transmission::roles;
    [
        ("conf[", roles::CONFIRMED),
        ("gp[", roles::GP_CONSULTATIONS),
        ("pos[", roles::POSITIVITY),
        ("sero[", roles::SERO),
    ]
    .into_iter()
    .find_map(|(prefix, role)| node_name.starts_with(prefix).then_some(role))
}

/// Forward-simulate a built transmission model at known parameter values.
///
/// The model's own streams act as templates; per-age and per-phase nodes are
/// reassembled into one stream per surveillance role, matching the layout the
/// model was built from.
pub fn simulate_transmission<R: Rng>(
    model: &TransmissionModel,
    params: &TransmissionParams,
    obs_params: &ObservationParams,
    rng: &mut R,
) -> Result<TransmissionSimulation> {
    let theta = model.theta_from_params(params, obs_params)?;
    let sims = simulate_node_values(&model.graph, &theta, rng)?;

    let mut by_role: BTreeMap<&str, Vec<Observation>> = BTreeMap::new();
    let mut shapes: BTreeMap<&str, &DataStream> = BTreeMap::new();
    for node in model.graph.data_nodes() {
        let role = transmission_role(&node.name).ok_or_else(|| {
            Error::Config(format!("data node '{}' has no surveillance role", node.name))
        })?;
        let values = &sims[&node.name];
        by_role
            .entry(role)
            .or_default()
            .extend(node.stream.obs.iter().zip(values).map(|(o, &v)| Observation {
                value: v,
                ..o.clone()
            }));
        shapes.entry(role).or_insert(&node.stream);
    }
    let mut streams = StreamSet::default();
    for (role, obs) in by_role {
        streams.insert(role, stream_with_values(shapes[role], obs)?)?;
    }

    let scenario = &model.scenario;
    let trajectory = simulate_trajectory(
        params,
        &scenario.schedule,
        &scenario.populations,
        &scenario.equilibrium_weights,
        scenario.n_steps,
        scenario.dt,
        scenario.placement,
    )?;
    let truth = TransmissionTruth {
        theta: model
            .graph
            .param_names()
            .into_iter()
            .zip(theta.iter().copied())
            .collect(),
        params: params.clone(),
        obs_params: obs_params.clone(),
        r0: params.r0()?,
        attack_rate: trajectory.attack_rate(&scenario.populations),
    };
    Ok(TransmissionSimulation { streams, truth })
}

/// Exact event-driven replicates of an immigration-death process.
///
/// Admissions arrive at the piecewise-constant rate `lambda[k]` on day
/// interval [k, k+1) and each occupant leaves independently at rate `mu`.
/// Occupancy is recorded at each integer day 0..=lambda.len().
#[derive(Debug, Clone)]
pub struct PrevalencePaths {
    /// counts[r][d] is replicate r's occupancy at the start of day d.
    pub counts: Vec<Vec<u32>>,
}

impl PrevalencePaths {
    /// Occupancy of every replicate at one day.
    pub fn at_day(&self, day: usize) -> Vec<u32> {
        self.counts.iter().map(|c| c[day]).collect()
    }

    /// Mean occupancy at one day.
    pub fn mean_at_day(&self, day: usize) -> f64 {
        let total: f64 = self.counts.iter().map(|c| f64::from(c[day])).sum();
        total / self.counts.len() as f64
    }
}

/// Simulate the immigration-death process event by event.
///
/// This is the brute-force counterpart of the analytic occupancy mean and its
/// Poisson likelihood: no discretization, every admission and discharge drawn
/// individually. Replicates run in parallel on independent RNG streams, so
/// results are reproducible for a given seed regardless of thread count.
/// Demands at least 10,000 replicates; below that the empirical distribution
/// is too noisy to check anything against.
pub fn brute_force_immigration_death(
    lambda: &[f64],
    mu: f64,
    nu0: u32,
    replicates: usize,
    seed: u64,
) -> Result<PrevalencePaths> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Domain(format!("exit rate {mu} must be positive")));
    }
    if let Some(l) = lambda.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::Domain(format!(
            "admission rate {l} must be finite and non-negative"
        )));
    }
    if replicates < 10_000 {
        return Err(Error::Config(format!(
            "{replicates} replicates is too few for a brute-force check; use at least 10000"
        )));
    }
    let counts = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let mut x = nu0;
            let mut path = Vec::with_capacity(lambda.len() + 1);
            path.push(x);
            for (day, &lam) in lambda.iter().enumerate() {
                let mut t = day as f64;
                let end = (day + 1) as f64;
                loop {
                    let total = lam + mu * f64::from(x);
                    if total <= 0.0 {
                        break;
                    }
                    t += Exp::new(total).expect("total > 0").sample(&mut rng);
                    if t >= end {
                        break;
                    }
                    if rng.random::<f64>() * total < lam {
                        x += 1;
                    } else {
                        x -= 1;
                    }
                }
                path.push(x);
            }
            path
        })
        .collect();
    Ok(PrevalencePaths { counts })
}

/// Time until a pure death process starting at `start` occupants hits zero,
/// one draw per replicate.
///
/// Each occupant's lifetime is exponential with rate `mu`, so the extinction
/// time is distributed as the maximum of `start` such lifetimes.
pub fn extinction_times(mu: f64, start: u32, replicates: usize, seed: u64) -> Result<Vec<f64>> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::Domain(format!("exit rate {mu} must be positive")));
    }
    if start == 0 {
        return Ok(vec![0.0; replicates]);
    }
    Ok((0..replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let mut t = 0.0;
            let mut x = start;
            while x > 0 {
                t += Exp::new(mu * f64::from(x)).expect("rate > 0").sample(&mut rng);
                x -= 1;
            }
            t
        })
        .collect())
}
