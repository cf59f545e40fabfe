//! Node-splitting diagnostics for evidence conflict.
//!
//! A node split severs the evidence flowing through one separator node into
//! disjoint partitions and fits each partition on its own, so the partitions
//! produce rival posteriors for the same quantity. Agreement is scored by a
//! two-sided conflict p-value on the difference of paired posterior draws,
//! and the calibration of the whole procedure can be checked by repeating it
//! on data simulated from the prior, where the p-values should look uniform.

use crate::error::{Error, Result};
use crate::graph::{CutSpec, ModelGraph, NodeRef};
use crate::mcmc::{run_chain, ChainConfig, PosteriorSample};
use crate::melding::{Density, KdeDensity};
use crate::numeric::ks_uniform;
use crate::prior::PriorSpec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

/// Scale on which the partition posteriors of the separator are compared.
///
/// Differences are taken after mapping the draws, so a log10 scale compares
/// orders of magnitude of counts and a logit scale compares probabilities
/// free of the boundary squeeze near 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonScale {
    Identity,
    Log10,
    Logit,
}

impl ComparisonScale {
    pub fn apply(self, x: f64) -> Result<f64> {
        let y = match self {
            ComparisonScale::Identity => x,
            ComparisonScale::Log10 => {
                if x <= 0.0 {
                    return Err(Error::Domain(format!(
                        "log10 comparison needs positive draws, got {x}"
                    )));
                }
                x.log10()
            }
            ComparisonScale::Logit => {
                if x <= 0.0 || x >= 1.0 {
                    return Err(Error::Domain(format!(
                        "logit comparison needs draws strictly inside (0, 1), got {x}"
                    )));
                }
                (x / (1.0 - x)).ln()
            }
        };
        if !y.is_finite() {
            return Err(Error::Domain(format!(
                "comparison scale produced a non-finite value from {x}"
            )));
        }
        Ok(y)
    }
}

/// One side of a node split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    /// Data nodes whose evidence this side keeps.
    pub data_nodes: Vec<String>,
    /// Prior for the severed separator copy on this side. Exactly one
    /// partition leaves this out and keeps the separator's own generative
    /// definition instead; every other side sees the separator only through
    /// this reference prior, which should be vague relative to the
    /// likelihood so the side speaks for its own data.
    pub separator_prior: Option<PriorSpec>,
}

/// A separator node together with a disjoint, exhaustive assignment of the
/// evidence touching it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSplit {
    pub separator: String,
    pub scale: ComparisonScale,
    pub partitions: Vec<Partition>,
}

/// Posterior for one partition, with the separator draws pulled out.
#[derive(Debug, Clone)]
pub struct PartitionFit {
    pub name: String,
    pub sample: PosteriorSample,
    /// Posterior draws of the separator under this partition's evidence.
    pub phi: Vec<f64>,
}

/// True when the node `from` depends on `target` through the functional
/// graph, with conflict cuts treated as walls.
fn depends_on(
    graph: &ModelGraph,
    from: NodeRef,
    target: NodeRef,
    seen: &mut HashSet<usize>,
) -> bool {
    if from == target {
        return true;
    }
    let NodeRef::Functional(f) = from else {
        return false;
    };
    if !seen.insert(f) {
        return false;
    }
    graph
        .effective_deps(f)
        .iter()
        .any(|dep| depends_on(graph, *dep, target, seen))
}

/// Data nodes whose likelihood depends on the named node.
pub fn data_touching(graph: &ModelGraph, node: &str) -> Result<Vec<String>> {
    let target = graph
        .find(node)
        .ok_or_else(|| Error::SplitDesign(format!("no node named '{node}' to split at")))?;
    let mut out = Vec::new();
    for d in graph.data_nodes() {
        let mut seen = HashSet::new();
        if depends_on(graph, NodeRef::Functional(d.parent), target, &mut seen) {
            out.push(d.name.clone());
        }
    }
    Ok(out)
}

fn validate_split(graph: &ModelGraph, split: &NodeSplit) -> Result<()> {
    if split.partitions.len() < 2 {
        return Err(Error::SplitDesign(format!(
            "a node split needs at least two partitions, got {}",
            split.partitions.len()
        )));
    }
    let touching = data_touching(graph, &split.separator)?;
    let known: HashSet<&str> = graph.data_nodes().iter().map(|d| d.name.as_str()).collect();
    let mut assigned: HashMap<&str, &str> = HashMap::new();
    for part in &split.partitions {
        if part.data_nodes.is_empty() {
            return Err(Error::SplitDesign(format!(
                "partition '{}' has no data nodes",
                part.name
            )));
        }
        for dn in &part.data_nodes {
            if !known.contains(dn.as_str()) {
                return Err(Error::SplitDesign(format!(
                    "partition '{}' names unknown data node '{dn}'",
                    part.name
                )));
            }
            if let Some(prev) = assigned.insert(dn, &part.name) {
                return Err(Error::SplitDesign(format!(
                    "data node '{dn}' appears in partitions '{prev}' and '{}'",
                    part.name
                )));
            }
        }
    }
    let missing: Vec<&str> = touching
        .iter()
        .map(String::as_str)
        .filter(|dn| !assigned.contains_key(dn))
        .collect();
    if !missing.is_empty() {
        return Err(Error::SplitDesign(format!(
            "evidence touching '{}' is left out of every partition: {}",
            split.separator,
            missing.join(", ")
        )));
    }
    let open = split
        .partitions
        .iter()
        .filter(|p| p.separator_prior.is_none())
        .count();
    if open != 1 {
        return Err(Error::SplitDesign(format!(
            "exactly one partition must keep the separator's generative definition, found {open}"
        )));
    }
    for part in &split.partitions {
        if part.separator_prior.is_some()
            && !part.data_nodes.iter().any(|dn| touching.contains(dn))
        {
            return Err(Error::SplitDesign(format!(
                "partition '{}' has no evidence informing '{}'; assign it a data node that \
                 depends on the separator",
                part.name, split.separator
            )));
        }
    }
    Ok(())
}

/// Fit every partition of a node split independently.
///
/// Each partition becomes a restricted graph holding only its own data nodes
/// and their ancestry; sides with a reference prior get the separator severed
/// there. Fits run in parallel with seeds offset by partition index, so a
/// partition's draws depend only on its own evidence and position, never on
/// what the other sides contain.
pub fn split_and_fit(
    graph: &ModelGraph,
    split: &NodeSplit,
    config: &ChainConfig,
) -> Result<Vec<PartitionFit>> {
    validate_split(graph, split)?;
    split
        .partitions
        .par_iter()
        .enumerate()
        .map(|(m, part)| {
            let sub = match &part.separator_prior {
                None => graph.restricted(&part.data_nodes, None)?,
                Some(prior) => graph.restricted(
                    &part.data_nodes,
                    Some(CutSpec {
                        node: split.separator.clone(),
                        prior: prior.clone(),
                        name: split.separator.clone(),
                    }),
                )?,
            };
            let cfg = ChainConfig {
                seed: config.seed.wrapping_add(m as u64),
                ..config.clone()
            };
            let sample = run_chain(&sub, &cfg)?;
            let phi = sample
                .draws
                .iter()
                .map(|theta| sub.node_scalar(theta, &split.separator))
                .collect::<Result<Vec<f64>>>()?;
            Ok(PartitionFit {
                name: part.name.clone(),
                sample,
                phi,
            })
        })
        .collect()
}

/// Paired differences of the separator between two partitions, on the
/// split's comparison scale.
#[derive(Debug, Clone, Serialize)]
pub struct DifferenceSample {
    /// Partition names; the difference is `a` minus `b`.
    pub a: String,
    pub b: String,
    pub delta: Vec<f64>,
}

impl DifferenceSample {
    /// Wrap precomputed differences. Every value must be finite.
    pub fn from_delta(delta: Vec<f64>) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::Config("difference sample is empty".into()));
        }
        if let Some(&bad) = delta.iter().find(|d| !d.is_finite()) {
            return Err(Error::Domain(format!(
                "difference sample contains a non-finite value {bad}"
            )));
        }
        Ok(Self {
            a: "a".into(),
            b: "b".into(),
            delta,
        })
    }

    /// Pair two sets of posterior draws and difference them on `scale`.
    ///
    /// Both sides are thinned to a common length, then one side is permuted
    /// with its own seeded generator, so the pairing injects no correlation
    /// between independently fitted chains.
    pub fn paired(
        a: &str,
        phi_a: &[f64],
        b: &str,
        phi_b: &[f64],
        scale: ComparisonScale,
        seed: u64,
    ) -> Result<Self> {
        if phi_a.is_empty() || phi_b.is_empty() {
            return Err(Error::Config(
                "difference sample needs draws on both sides".into(),
            ));
        }
        let n = phi_a.len().min(phi_b.len());
        let thin = |xs: &[f64]| -> Result<Vec<f64>> {
            (0..n).map(|i| scale.apply(xs[i * xs.len() / n])).collect()
        };
        let ha = thin(phi_a)?;
        let mut hb = thin(phi_b)?;
        hb.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let delta = ha.iter().zip(&hb).map(|(x, y)| x - y).collect();
        Ok(Self {
            a: a.into(),
            b: b.into(),
            delta,
        })
    }
}

/// All pairwise difference samples between fitted partitions, in the order
/// (0,1), (0,2), ..., (1,2), ... For a two-partition split this is the single
/// parent-minus-child sample.
pub fn differences(
    fits: &[PartitionFit],
    scale: ComparisonScale,
    seed: u64,
) -> Result<Vec<DifferenceSample>> {
    if fits.len() < 2 {
        return Err(Error::Config(format!(
            "pairwise differences need at least two fitted partitions, got {}",
            fits.len()
        )));
    }
    let mut out = Vec::new();
    for i in 0..fits.len() {
        for j in i + 1..fits.len() {
            out.push(DifferenceSample::paired(
                &fits[i].name,
                &fits[i].phi,
                &fits[j].name,
                &fits[j].phi,
                scale,
                seed.wrapping_add(out.len() as u64),
            )?);
        }
    }
    Ok(out)
}

/// How the conflict p-value reads the difference sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PvalueMethod {
    /// Two-sided tail rank of zero: c = 2 min(P(d < 0), P(d > 0)), with ties
    /// at zero split evenly between the tails.
    Quantile,
    /// Density ordering: the fraction of draws whose estimated density is at
    /// most the estimated density at zero.
    Density,
}

/// Conflict p-value of a difference sample. Small values mean the partitions
/// disagree about the separator.
pub fn conflict_pvalue(diff: &DifferenceSample, method: PvalueMethod) -> Result<f64> {
    let n = diff.delta.len();
    if n < 1000 {
        return Err(Error::Config(format!(
            "conflict p-values need at least 1000 paired draws, got {n}"
        )));
    }
    let lo = diff.delta.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = diff.delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::UndefinedPValue(format!(
            "all {n} paired differences equal {lo}; the difference sample is degenerate"
        )));
    }
    match method {
        PvalueMethod::Quantile => {
            let below = diff.delta.iter().filter(|&&d| d < 0.0).count() as f64;
            let above = diff.delta.iter().filter(|&&d| d > 0.0).count() as f64;
            let ties = n as f64 - below - above;
            let left = (below + 0.5 * ties) / n as f64;
            let right = (above + 0.5 * ties) / n as f64;
            Ok((2.0 * left.min(right)).min(1.0))
        }
        PvalueMethod::Density => {
            let kde = KdeDensity::from_samples(&diff.delta)?;
            let at_zero = kde.log_density(0.0);
            let low = diff
                .delta
                .iter()
                .filter(|&&d| kde.log_density(d) <= at_zero)
                .count();
            Ok(low as f64 / n as f64)
        }
    }
}

/// Conflict p-values collected over replicate splits, with a
/// Kolmogorov-Smirnov comparison against Uniform(0, 1).
#[derive(Debug, Clone, Serialize)]
pub struct UniformityReport {
    pub pvalues: Vec<f64>,
    pub ks_distance: f64,
    pub ks_pvalue: f64,
}

impl UniformityReport {
    /// Empirical CDF of the p-values as sorted (value, height) steps.
    pub fn ecdf(&self) -> Vec<(f64, f64)> {
        let mut sorted = self.pvalues.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        sorted
            .into_iter()
            .enumerate()
            .map(|(i, x)| (x, (i as f64 + 1.0) / n))
            .collect()
    }
}

/// Calibration check for a split: fit it on `replicates` graphs produced by
/// `generate` (which should simulate data from the model's own prior), score
/// each with the quantile conflict p-value between the first two partitions,
/// and test the collection against Uniform(0, 1).
pub fn uniformity_check<F>(
    generate: F,
    split: &NodeSplit,
    config: &ChainConfig,
    replicates: usize,
) -> Result<UniformityReport>
where
    F: Fn(u64) -> Result<ModelGraph> + Sync,
{
    if replicates == 0 {
        return Err(Error::Config(
            "a uniformity check needs at least one replicate".into(),
        ));
    }
    let pvalues = (0..replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let graph = generate(rep)?;
            let cfg = ChainConfig {
                seed: config.seed.wrapping_add(104_729 * (rep + 1)),
                ..config.clone()
            };
            let fits = split_and_fit(&graph, split, &cfg)?;
            let diff = differences(&fits, split.scale, cfg.seed ^ 0x9e37_79b9)?;
            conflict_pvalue(&diff[0], PvalueMethod::Quantile)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (ks_distance, ks_pvalue) = ks_uniform(&pvalues)?;
    Ok(UniformityReport {
        pvalues,
        ks_distance,
        ks_pvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, ObsModel};
    use crate::grid::TimeGrid;
    use crate::stream::{DataStream, Observation, StreamKind};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn obs(t: usize, value: f64, denom: Option<f64>) -> Observation {
        Observation {
            time_index: t,
            age_index: 0,
            value,
            denominator: denom,
            day: 0.0,
        }
    }

    /// One shared scalar "effect" observed by several independent normal
    /// data nodes, one observation each.
    fn shared_effect_graph(ys: &[(&str, f64, f64)]) -> ModelGraph {
        let mut b = GraphBuilder::new();
        let mu = b
            .param("mu", PriorSpec::Normal { mean: 0.0, sd: 2.0 })
            .unwrap();
        let effect = b
            .functional("effect", vec![mu], move |ctx| Ok(vec![ctx.param(mu)?]))
            .unwrap();
        for &(name, y, sd) in ys {
            let grid = TimeGrid::new(1.0, 1.0, 1).unwrap();
            let stream = DataStream::new(
                StreamKind::PointEstimateLogScale,
                grid,
                vec![obs(0, y, Some(sd))],
            )
            .unwrap();
            b.data(name, effect, ObsModel::Normal, stream).unwrap();
        }
        b.build().unwrap()
    }

    /// The shared-effect graph plus one data node on an unrelated parameter.
    fn graph_with_bystander() -> ModelGraph {
        let mut b = GraphBuilder::new();
        let mu = b
            .param("mu", PriorSpec::Normal { mean: 0.0, sd: 2.0 })
            .unwrap();
        let nu = b
            .param("nu", PriorSpec::Normal { mean: 0.0, sd: 2.0 })
            .unwrap();
        let effect = b
            .functional("effect", vec![mu], move |ctx| Ok(vec![ctx.param(mu)?]))
            .unwrap();
        let drift = b
            .functional("drift", vec![nu], move |ctx| Ok(vec![ctx.param(nu)?]))
            .unwrap();
        for (name, parent, y, sd) in [
            ("y_a", effect, 1.2, 0.5),
            ("y_b", effect, 0.4, 0.8),
            ("y_n", drift, -0.2, 0.3),
        ] {
            let grid = TimeGrid::new(1.0, 1.0, 1).unwrap();
            let stream =
                DataStream::new(StreamKind::PointEstimateLogScale, grid, vec![obs(0, y, Some(sd))])
                    .unwrap();
            b.data(name, parent, ObsModel::Normal, stream).unwrap();
        }
        b.build().unwrap()
    }

    fn vague() -> PriorSpec {
        PriorSpec::Normal {
            mean: 0.0,
            sd: 100.0,
        }
    }

    fn part(name: &str, data: &[&str], prior: Option<PriorSpec>) -> Partition {
        Partition {
            name: name.into(),
            data_nodes: data.iter().map(|s| s.to_string()).collect(),
            separator_prior: prior,
        }
    }

    fn two_way_split() -> NodeSplit {
        NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![
                part("parent", &["y_a"], None),
                part("child", &["y_b"], Some(vague())),
            ],
        }
    }

    /// Mean and sd of a normal posterior from a normal prior and one normal
    /// observation.
    fn conjugate_post(prior_mean: f64, prior_sd: f64, y: f64, sd: f64) -> (f64, f64) {
        let prec = 1.0 / (prior_sd * prior_sd) + 1.0 / (sd * sd);
        let var = 1.0 / prec;
        let mean = var * (prior_mean / (prior_sd * prior_sd) + y / (sd * sd));
        (mean, var.sqrt())
    }

    fn normal_draws(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + sd * z
            })
            .collect()
    }

    fn mean_of(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn data_touching_follows_the_dependency_graph() {
        let graph = graph_with_bystander();
        assert_eq!(data_touching(&graph, "effect").unwrap(), vec!["y_a", "y_b"]);
        assert_eq!(data_touching(&graph, "mu").unwrap(), vec!["y_a", "y_b"]);
        assert_eq!(data_touching(&graph, "drift").unwrap(), vec!["y_n"]);
        assert!(matches!(
            data_touching(&graph, "ghost"),
            Err(Error::SplitDesign(_))
        ));
    }

    #[test]
    fn each_side_matches_its_single_observation_posterior() {
        let graph = shared_effect_graph(&[("y_a", 1.2, 0.5), ("y_b", 0.4, 0.8)]);
        let config = ChainConfig {
            iterations: 20_000,
            burn_in: 5_000,
            seed: 11,
            ..ChainConfig::default()
        };
        let fits = split_and_fit(&graph, &two_way_split(), &config).unwrap();
        assert_eq!(fits.len(), 2);
        assert_eq!(fits[0].name, "parent");
        assert_eq!(fits[1].name, "child");

        let (m_a, s_a) = conjugate_post(0.0, 2.0, 1.2, 0.5);
        let (m_b, s_b) = conjugate_post(0.0, 100.0, 0.4, 0.8);
        for (fit, m, s) in [(&fits[0], m_a, s_a), (&fits[1], m_b, s_b)] {
            let mcse = fit.sample.mcse(0).unwrap();
            assert!(
                (mean_of(&fit.phi) - m).abs() < 4.0 * mcse,
                "{}: mean {} vs {m}, mcse {mcse}",
                fit.name,
                mean_of(&fit.phi)
            );
            assert_relative_eq!(crate::numeric::sd(&fit.phi), s, max_relative = 0.1);
        }
    }

    #[test]
    fn a_partition_sees_only_its_own_data() {
        let graph = shared_effect_graph(&[("y1", 1.0, 0.5), ("y2", -0.3, 0.7), ("y3", 0.9, 0.6)]);
        let config = ChainConfig {
            iterations: 6_000,
            burn_in: 1_000,
            seed: 5,
            ..ChainConfig::default()
        };
        let split_a = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![
                part("parent", &["y1", "y2"], None),
                part("child", &["y3"], Some(vague())),
            ],
        };
        let split_b = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![
                part("parent", &["y1"], None),
                part("child", &["y2", "y3"], Some(vague())),
            ],
        };
        let fits_a = split_and_fit(&graph, &split_a, &config).unwrap();
        let fits_b = split_and_fit(&graph, &split_b, &config).unwrap();

        // the child draws in split A are exactly what a standalone fit of the
        // same restricted graph produces: nothing leaks from the parent side
        let standalone = graph
            .restricted(
                &["y3".into()],
                Some(CutSpec {
                    node: "effect".into(),
                    prior: vague(),
                    name: "effect".into(),
                }),
            )
            .unwrap();
        let cfg1 = ChainConfig {
            seed: config.seed.wrapping_add(1),
            ..config.clone()
        };
        let alone = run_chain(&standalone, &cfg1).unwrap();
        assert_eq!(fits_a[1].sample.draws, alone.draws);

        // moving y2 across the cut changes both reassigned sides
        assert_ne!(fits_a[0].sample.draws, fits_b[0].sample.draws);
        assert_ne!(fits_a[1].sample.draws, fits_b[1].sample.draws);

        // and the receiving side lands on its own conjugate posterior
        let prec = 1.0 / (100.0f64 * 100.0) + 1.0 / (0.7f64 * 0.7) + 1.0 / (0.6f64 * 0.6);
        let mean = (-0.3 / (0.7 * 0.7) + 0.9 / (0.6 * 0.6)) / prec;
        let mcse = fits_b[1].sample.mcse(0).unwrap();
        assert!((mean_of(&fits_b[1].phi) - mean).abs() < 4.0 * mcse);
    }

    #[test]
    fn three_partitions_bracket_the_full_posterior() {
        let graph =
            shared_effect_graph(&[("y_a", 1.0, 0.5), ("y_b", 0.3, 0.8), ("y_c", -0.5, 0.6)]);
        let split = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![
                part("sero", &["y_a"], None),
                part("hosp", &["y_b"], Some(vague())),
                part("mort", &["y_c"], Some(vague())),
            ],
        };
        let config = ChainConfig {
            iterations: 20_000,
            burn_in: 5_000,
            seed: 19,
            ..ChainConfig::default()
        };
        let fits = split_and_fit(&graph, &split, &config).unwrap();
        assert_eq!(fits.len(), 3);

        let expected = [
            conjugate_post(0.0, 2.0, 1.0, 0.5),
            conjugate_post(0.0, 100.0, 0.3, 0.8),
            conjugate_post(0.0, 100.0, -0.5, 0.6),
        ];
        for (fit, (m, _)) in fits.iter().zip(expected) {
            let mcse = fit.sample.mcse(0).unwrap();
            assert!(
                (mean_of(&fit.phi) - m).abs() < 4.0 * mcse,
                "{}: {} vs {m}",
                fit.name,
                mean_of(&fit.phi)
            );
        }

        let medians: Vec<f64> = fits.iter().map(|f| crate::numeric::median(&f.phi)).collect();
        let lo = medians.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = medians.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let full = run_chain(&graph, &config).unwrap();
        let full_median = crate::numeric::median(&full.draws.iter().map(|d| d[0]).collect::<Vec<_>>());
        assert!(
            full_median > lo - 0.02 && full_median < hi + 0.02,
            "full {full_median} outside [{lo}, {hi}]"
        );

        let diffs = differences(&fits, split.scale, 99).unwrap();
        assert_eq!(diffs.len(), 3);
        assert_eq!((diffs[0].a.as_str(), diffs[0].b.as_str()), ("sero", "hosp"));
        assert_eq!((diffs[2].a.as_str(), diffs[2].b.as_str()), ("hosp", "mort"));
    }

    #[test]
    fn paired_chains_stay_uncorrelated() {
        let graph = shared_effect_graph(&[("y_a", 1.2, 0.5), ("y_b", 0.4, 0.8)]);
        let config = ChainConfig {
            iterations: 5_000,
            burn_in: 1_000,
            seed: 23,
            ..ChainConfig::default()
        };
        let fits = split_and_fit(&graph, &two_way_split(), &config).unwrap();
        let n = fits[0].phi.len().min(fits[1].phi.len());
        let a = &fits[0].phi[..n];
        let b = &fits[1].phi[..n];
        let (ma, mb) = (mean_of(a), mean_of(b));
        let cov: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n as f64;
        let r = cov / (crate::numeric::sd(a) * crate::numeric::sd(b));
        assert!(r.abs() < 3.0 / (n as f64).sqrt(), "r = {r}, n = {n}");
    }

    #[test]
    fn misassembled_splits_are_rejected() {
        let graph = graph_with_bystander();
        let config = ChainConfig::default();
        let fit = |split: &NodeSplit| split_and_fit(&graph, split, &config);

        let no_sep = NodeSplit {
            separator: "ghost".into(),
            ..two_way_split()
        };
        assert!(matches!(fit(&no_sep), Err(Error::SplitDesign(_))));

        let lone = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![part("all", &["y_a", "y_b"], None)],
        };
        assert!(matches!(fit(&lone), Err(Error::SplitDesign(_))));

        let overlap = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![
                part("parent", &["y_a", "y_b"], None),
                part("child", &["y_b"], Some(vague())),
            ],
        };
        let msg = match fit(&overlap) {
            Err(Error::SplitDesign(m)) => m,
            other => panic!("expected split-design error, got {other:?}"),
        };
        assert!(msg.contains("y_b"), "{msg}");

        let leaky = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![
                part("parent", &["y_a"], None),
                part("child", &["y_n"], Some(vague())),
            ],
        };
        let msg = match fit(&leaky) {
            Err(Error::SplitDesign(m)) => m,
            other => panic!("expected split-design error, got {other:?}"),
        };
        assert!(msg.contains("y_b"), "{msg}");

        let blind = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![
                part("parent", &["y_a", "y_b"], None),
                part("child", &["y_n"], Some(vague())),
            ],
        };
        let msg = match fit(&blind) {
            Err(Error::SplitDesign(m)) => m,
            other => panic!("expected split-design error, got {other:?}"),
        };
        assert!(msg.contains("no evidence informing"), "{msg}");

        let two_open = NodeSplit {
            separator: "effect".into(),
            scale: ComparisonScale::Identity,
            partitions: vec![part("parent", &["y_a"], None), part("child", &["y_b"], None)],
        };
        let msg = match fit(&two_open) {
            Err(Error::SplitDesign(m)) => m,
            other => panic!("expected split-design error, got {other:?}"),
        };
        assert!(msg.contains("exactly one partition"), "{msg}");
    }

    #[test]
    fn centered_sample_scores_no_conflict() {
        let diff = DifferenceSample::from_delta(normal_draws(0.0, 1.0, 100_000, 1)).unwrap();
        let c = conflict_pvalue(&diff, PvalueMethod::Quantile).unwrap();
        assert!((c - 1.0).abs() < 0.05, "c = {c}");
        let c = conflict_pvalue(&diff, PvalueMethod::Density).unwrap();
        assert!((c - 1.0).abs() < 0.05, "c = {c}");
    }

    #[test]
    fn one_sided_sample_scores_maximal_conflict() {
        let delta: Vec<f64> = normal_draws(0.0, 1.0, 2_000, 2)
            .into_iter()
            .map(|z| z.abs() + 0.5)
            .collect();
        let n = delta.len();
        let diff = DifferenceSample::from_delta(delta).unwrap();
        let c = conflict_pvalue(&diff, PvalueMethod::Quantile).unwrap();
        assert!(c <= 2.0 / n as f64, "c = {c}");
    }

    #[test]
    fn three_sigma_shift_matches_the_normal_tail() {
        let diff = DifferenceSample::from_delta(normal_draws(3.0, 1.0, 100_000, 3)).unwrap();
        // two-sided tail of a three-sigma shift: 2 Phi(-3) = erfc(3 / sqrt 2)
        let expected = statrs::function::erf::erfc(3.0 / std::f64::consts::SQRT_2);
        let c = conflict_pvalue(&diff, PvalueMethod::Quantile).unwrap();
        assert!((c - expected).abs() < 0.001, "c = {c}, expected {expected}");
        let c = conflict_pvalue(&diff, PvalueMethod::Density).unwrap();
        assert!((c - expected).abs() < 0.002, "density c = {c}");
    }

    #[test]
    fn ties_split_between_the_tails() {
        let mut delta = vec![-1.0; 250];
        delta.extend(vec![0.0; 500]);
        delta.extend(vec![1.0; 250]);
        let diff = DifferenceSample::from_delta(delta).unwrap();
        // P(d < 0) + P(d = 0)/2 = 0.5 on both sides
        assert_relative_eq!(
            conflict_pvalue(&diff, PvalueMethod::Quantile).unwrap(),
            1.0
        );

        let mut delta = vec![0.0; 750];
        delta.extend(vec![1.0; 250]);
        let diff = DifferenceSample::from_delta(delta).unwrap();
        // left tail 0.375, right tail 0.625
        assert_relative_eq!(
            conflict_pvalue(&diff, PvalueMethod::Quantile).unwrap(),
            0.75
        );
    }

    #[test]
    fn degenerate_differences_have_no_pvalue() {
        let diff = DifferenceSample::from_delta(vec![0.7; 2_000]).unwrap();
        for method in [PvalueMethod::Quantile, PvalueMethod::Density] {
            assert!(matches!(
                conflict_pvalue(&diff, method),
                Err(Error::UndefinedPValue(_))
            ));
        }
        let short = DifferenceSample::from_delta(vec![0.1, -0.2, 0.3]).unwrap();
        assert!(matches!(
            conflict_pvalue(&short, PvalueMethod::Quantile),
            Err(Error::Config(_))
        ));
        assert!(DifferenceSample::from_delta(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn quantile_pvalue_ignores_monotone_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..3_000).map(|_| rng.random::<f64>() + 0.5).collect();
        let b: Vec<f64> = (0..2_400).map(|_| rng.random::<f64>() + 0.6).collect();
        let plain =
            DifferenceSample::paired("a", &a, "b", &b, ComparisonScale::Identity, 4).unwrap();
        let logged =
            DifferenceSample::paired("a", &a, "b", &b, ComparisonScale::Log10, 4).unwrap();
        assert_eq!(
            conflict_pvalue(&plain, PvalueMethod::Quantile).unwrap(),
            conflict_pvalue(&logged, PvalueMethod::Quantile).unwrap()
        );
    }

    #[test]
    fn comparison_scales_guard_their_domains() {
        assert!(ComparisonScale::Log10.apply(-1.0).is_err());
        assert!(ComparisonScale::Logit.apply(1.0).is_err());
        assert!(ComparisonScale::Identity.apply(f64::INFINITY).is_err());
        assert_relative_eq!(ComparisonScale::Log10.apply(100.0).unwrap(), 2.0);
        assert_relative_eq!(ComparisonScale::Logit.apply(0.5).unwrap(), 0.0);
    }

    fn null_generator(rep: u64) -> Result<ModelGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + rep);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let mu = 2.0 * z();
        let y_a = mu + 0.5 * z();
        let y_b = mu + 0.8 * z();
        Ok(shared_effect_graph(&[("y_a", y_a, 0.5), ("y_b", y_b, 0.8)]))
    }

    #[test]
    fn null_replicates_yield_uniform_pvalues() {
        let config = ChainConfig {
            iterations: 2_600,
            burn_in: 600,
            seed: 31,
            ..ChainConfig::default()
        };
        let report = uniformity_check(null_generator, &two_way_split(), &config, 60).unwrap();
        assert_eq!(report.pvalues.len(), 60);
        assert!(
            report.ks_pvalue > 0.01,
            "KS p = {}, D = {}",
            report.ks_pvalue,
            report.ks_distance
        );
    }

    #[test]
    fn a_degenerate_generator_fails_uniformity() {
        let config = ChainConfig {
            iterations: 2_600,
            burn_in: 600,
            seed: 43,
            ..ChainConfig::default()
        };
        let fixed =
            |_rep: u64| Ok(shared_effect_graph(&[("y_a", 1.2, 0.5), ("y_b", 0.4, 0.8)]));
        let report = uniformity_check(fixed, &two_way_split(), &config, 40).unwrap();
        assert!(
            report.ks_pvalue < 1e-6,
            "KS p = {}, D = {}",
            report.ks_pvalue,
            report.ks_distance
        );
    }

    #[test]
    fn a_single_replicate_gives_a_step_ecdf() {
        let config = ChainConfig {
            iterations: 2_600,
            burn_in: 600,
            seed: 47,
            ..ChainConfig::default()
        };
        let report = uniformity_check(null_generator, &two_way_split(), &config, 1).unwrap();
        assert_eq!(report.pvalues.len(), 1);
        let ecdf = report.ecdf();
        assert_eq!(ecdf.len(), 1);
        assert_relative_eq!(ecdf[0].1, 1.0);
        let c = report.pvalues[0];
        assert_relative_eq!(report.ks_distance, c.max(1.0 - c), epsilon = 1e-12);
    }
}
