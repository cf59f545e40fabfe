//! Cross-sectional severity-pyramid models.
//!
//! Infections cascade down a pyramid: infected, symptomatic, hospitalised,
//! then ICU or death, with conditional probabilities between adjacent levels.
//! Counts use the mean parameterisation `N_l = floor(p_{l|m} N_m)`. Each level
//! is observed through a detection probability, so a count observation is
//! binomial with a model-driven size, and symptomatic totals arrive as
//! log-scale point estimates with a standard error. A third wave adds an
//! ICU immigration-death process whose cumulative admissions bound the total
//! ICU count from below.

use crate::age::AgeStructure;
use crate::error::{Error, Result};
use crate::graph::{EvalCtx, GraphBuilder, ModelGraph, NodeRef, ObsModel};
use crate::kernels::{binomial_logpmf, normal_logpdf, poisson_logpmf};
use crate::prior::{logit, PriorConfig, PriorSpec, Support};
use crate::stream::{DataStream, StreamFileEntry, StreamSet};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Conditional probabilities along the pyramid: infection given population,
/// symptoms given infection, hospitalisation given symptoms, ICU given
/// hospitalisation, death given hospitalisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainProbs {
    pub p_inf: f64,
    pub p_sym: f64,
    pub p_hosp: f64,
    pub p_icu: f64,
    pub p_death: f64,
}

impl ChainProbs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_inf", self.p_inf),
            ("p_sym", self.p_sym),
            ("p_hosp", self.p_hosp),
            ("p_icu", self.p_icu),
            ("p_death", self.p_death),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Counts at each severity level for one age band and wave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeverityCounts {
    pub n_pop: u64,
    pub n_inf: u64,
    pub n_sym: u64,
    pub n_hosp: u64,
    pub n_icu: u64,
    pub n_death: u64,
}

fn chain_level(p: f64, upstream: f64) -> f64 {
    (p * upstream).floor()
}

/// [N_I, N_S, N_H, N_ICU, N_D] as floats, the form graph closures consume.
fn pyramid_chain(probs: &ChainProbs, n_pop: f64) -> [f64; 5] {
    let n_inf = chain_level(probs.p_inf, n_pop);
    let n_sym = chain_level(probs.p_sym, n_inf);
    let n_hosp = chain_level(probs.p_hosp, n_sym);
    let n_icu = chain_level(probs.p_icu, n_hosp);
    let n_death = chain_level(probs.p_death, n_hosp);
    [n_inf, n_sym, n_hosp, n_icu, n_death]
}

pub fn pyramid_counts(probs: &ChainProbs, n_pop: u64) -> Result<SeverityCounts> {
    probs.validate()?;
    let c = pyramid_chain(probs, n_pop as f64);
    Ok(SeverityCounts {
        n_pop,
        n_inf: c[0] as u64,
        n_sym: c[1] as u64,
        n_hosp: c[2] as u64,
        n_icu: c[3] as u64,
        n_death: c[4] as u64,
    })
}

/// Pyramid counts drawn from the nested binomial chain instead of the floored
/// means, for small-count simulation studies.
pub fn nested_binomial_pyramid<R: Rng>(
    probs: &ChainProbs,
    n_pop: u64,
    rng: &mut R,
) -> Result<SeverityCounts> {
    probs.validate()?;
    let draw = |n: u64, p: f64, rng: &mut R| -> u64 {
        if n == 0 || p == 0.0 {
            return 0;
        }
        if p == 1.0 {
            return n;
        }
        rng.sample(rand_distr::Binomial::new(n, p).expect("validated"))
    };
    let n_inf = draw(n_pop, probs.p_inf, rng);
    let n_sym = draw(n_inf, probs.p_sym, rng);
    let n_hosp = draw(n_sym, probs.p_hosp, rng);
    let n_icu = draw(n_hosp, probs.p_icu, rng);
    let n_death = draw(n_hosp, probs.p_death, rng);
    Ok(SeverityCounts { n_pop, n_inf, n_sym, n_hosp, n_icu, n_death })
}

/// Severity summaries: case-hospitalisation, case-ICU, and case-fatality risks
/// per symptomatic infection, plus the fatality risk among symptomatic cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseSeverityRisks {
    pub chr: f64,
    pub cir: f64,
    pub cfr: f64,
    pub scfr: f64,
}

pub fn case_severity_risks(probs: &ChainProbs) -> Result<CaseSeverityRisks> {
    probs.validate()?;
    let chr = probs.p_hosp * probs.p_sym;
    Ok(CaseSeverityRisks {
        chr,
        cir: probs.p_icu * chr,
        cfr: probs.p_death * chr,
        scfr: probs.p_death * probs.p_hosp,
    })
}

/// Log density of a log-scale point estimate `y_hat` with standard error
/// `sigma_hat` against a modelled count `n`: `y_hat ~ Normal(ln n, sigma_hat)`.
/// A zero count makes any estimate impossible.
pub fn lognormal_point_estimate_term(n: u64, y_hat: f64, sigma_hat: f64) -> Result<f64> {
    if !(sigma_hat > 0.0) {
        return Err(Error::Domain(format!("point-estimate sd {sigma_hat} must be > 0")));
    }
    if n == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    normal_logpdf(y_hat, (n as f64).ln(), sigma_hat)
}

/// Dynamical parameters of the ICU immigration-death process: daily admission
/// rates, a common exit rate, and the occupancy at the start of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct IcuProcessParams {
    pub lambda: Vec<f64>,
    pub mu: f64,
    pub nu0: f64,
}

impl IcuProcessParams {
    pub fn new(lambda: Vec<f64>, mu: f64, nu0: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::Domain(format!("ICU exit rate {mu} must be > 0")));
        }
        if let Some(l) = lambda.iter().find(|l| !(**l >= 0.0)) {
            return Err(Error::Domain(format!("ICU admission rate {l} must be >= 0")));
        }
        if !(nu0 >= 0.0) {
            return Err(Error::Domain(format!("initial ICU occupancy {nu0} must be >= 0")));
        }
        Ok(Self { lambda, mu, nu0 })
    }

    /// Expected admissions over the whole window (rates are per day on a
    /// daily grid).
    pub fn cumulative_admissions(&self) -> f64 {
        self.lambda.iter().sum()
    }
}

/// Expected occupancy nu at the start of each day 0..=T for daily admission
/// rates `lambda[k]` active over day k. The mean of the linear
/// immigration-death process solves d(nu)/dt = lambda_t - mu nu, which over a
/// day of constant rate gives nu(t+1) = nu e^{-mu} + (lambda/mu)(1 - e^{-mu}).
pub fn icu_mean_path(params: &IcuProcessParams) -> Vec<f64> {
    let decay = (-params.mu).exp();
    let mut path = Vec::with_capacity(params.lambda.len() + 1);
    let mut nu = params.nu0;
    path.push(nu);
    for &lam in &params.lambda {
        nu = nu * decay + lam / params.mu * (1.0 - decay);
        path.push(nu);
    }
    path
}

/// Log likelihood of prevalent ICU counts: the process mean follows
/// [`icu_mean_path`] and each observed census is Poisson around it, which is
/// exact when the occupancy starts at a Poisson (or empty) state.
pub fn icu_immigration_death_loglik(
    params: &IcuProcessParams,
    prevalence: &DataStream,
) -> Result<f64> {
    if (prevalence.grid.step - 1.0).abs() > 1e-12 {
        return Err(Error::Config("ICU prevalence must be on a daily grid".into()));
    }
    let path = icu_mean_path(params);
    let mut total = 0.0;
    for obs in &prevalence.obs {
        if obs.time_index >= path.len() {
            return Err(Error::Config(format!(
                "ICU census at day {} is beyond the {}-day admission series",
                obs.time_index,
                params.lambda.len()
            )));
        }
        let term = poisson_logpmf(obs.value as u64, path[obs.time_index])?;
        if term == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        total += term;
    }
    Ok(total)
}

/// Binomial link between the confirmed ICU admissions total and the full ICU
/// count of the wave: `n_star ~ Binomial(n_icu, d_icu)`. A confirmed total
/// exceeding the full count is impossible, not an error.
pub fn icu_lower_bound_term(n_icu: u64, n_star: u64, d_icu: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&d_icu) {
        return Err(Error::Domain(format!("ICU detection {d_icu} outside [0, 1]")));
    }
    if n_star > n_icu {
        return Ok(f64::NEG_INFINITY);
    }
    binomial_logpmf(n_star, n_icu, d_icu)
}

/// Hierarchical shrinkage of a third-wave probability toward its second-wave
/// counterpart: Normal on the logit scale. Returns the log density of
/// logit(p_wave3) at mean logit(p_wave2); boundary probabilities are
/// impossible on the logit scale.
pub fn wave3_hierarchical_prior(p_wave3: f64, p_wave2: f64, sd: f64) -> f64 {
    if !(p_wave3 > 0.0 && p_wave3 < 1.0 && p_wave2 > 0.0 && p_wave2 < 1.0) {
        return f64::NEG_INFINITY;
    }
    normal_logpdf(logit(p_wave3), logit(p_wave2), sd).expect("positive sd")
}

/// Detection probabilities for the count streams of one wave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionProbs {
    pub d_sym: f64,
    pub d_hosp: f64,
    pub d_death: f64,
    pub d_icu: f64,
}

/// Stream roles understood by the wave graph builders.
pub mod roles {
    pub const SERO_BASELINE: &str = "sero_baseline";
    pub const SERO_POST: &str = "sero_post";
    pub const SYM_POINT: &str = "sym_point";
    pub const HOSP: &str = "hosp";
    pub const DEATHS: &str = "deaths";
    pub const ICU_GIVEN_HOSP: &str = "icu_given_hosp";
    pub const DEATH_GIVEN_HOSP: &str = "death_given_hosp";
    pub const ICU_POINT: &str = "icu_point";
    pub const ICU_LOWER_BOUND: &str = "icu_lower_bound";
    pub const ICU_PREVALENCE: &str = "icu_prevalence";

    pub fn kind(role: &str) -> Option<crate::stream::StreamKind> {
        use crate::stream::StreamKind::*;
        Some(match role {
            SERO_BASELINE | SERO_POST => SeroPrevalence,
            SYM_POINT | ICU_POINT => PointEstimateLogScale,
            HOSP | ICU_GIVEN_HOSP => HospAdmissions,
            DEATHS | DEATH_GIVEN_HOSP => Deaths,
            ICU_LOWER_BOUND | ICU_PREVALENCE => IcuPrevalence,
            _ => return None,
        })
    }
}

/// Direct evaluation of one age band's wave log likelihood, summing the same
/// terms the graph assembles: sero baseline and post-wave binomials, the
/// symptomatic point estimate through its detection probability, count streams
/// as detection binomials against the pyramid, and the conditional-outcome
/// binomials among hospitalisations with observed outcomes.
pub fn severity_loglik_wave1(
    probs: &ChainProbs,
    detect: &DetectionProbs,
    pi_base: f64,
    n_pop: u64,
    streams: &StreamSet,
    age_index: usize,
) -> Result<f64> {
    probs.validate()?;
    for (name, v) in [
        ("d_sym", detect.d_sym),
        ("d_hosp", detect.d_hosp),
        ("d_death", detect.d_death),
        ("pi_base", pi_base),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let counts = pyramid_chain(probs, n_pop as f64);
    let [_, n_sym, n_hosp, _, n_death] = counts;
    let mut total = 0.0;
    let mut add = |term: f64| -> bool {
        total += term;
        term != f64::NEG_INFINITY
    };

    if let Some(s) = streams.maybe(roles::SERO_BASELINE) {
        for o in s.filter_age(age_index).obs {
            let n = o.denominator.expect("sero stream validated") as u64;
            if !add(binomial_logpmf(o.value as u64, n, pi_base)?) {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    if let Some(s) = streams.maybe(roles::SERO_POST) {
        let pi = pi_base + probs.p_inf;
        for o in s.filter_age(age_index).obs {
            let n = o.denominator.expect("sero stream validated") as u64;
            let term = if pi > 1.0 { f64::NEG_INFINITY } else { binomial_logpmf(o.value as u64, n, pi)? };
            if !add(term) {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    if let Some(s) = streams.maybe(roles::SYM_POINT) {
        for o in s.filter_age(age_index).obs {
            let sigma = o.denominator.expect("point stream validated");
            let mean = (detect.d_sym * n_sym).floor();
            let term = if mean < 1.0 {
                f64::NEG_INFINITY
            } else {
                lognormal_point_estimate_term(mean as u64, o.value, sigma)?
            };
            if !add(term) {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    let mut count_stream = |role: &str, level: f64, d: f64| -> Result<bool> {
        if let Some(s) = streams.maybe(role) {
            for o in s.filter_age(age_index).obs {
                let y = o.value as u64;
                let term = if (y as f64) > level {
                    f64::NEG_INFINITY
                } else {
                    binomial_logpmf(y, level as u64, d)?
                };
                if term == f64::NEG_INFINITY {
                    total = f64::NEG_INFINITY;
                    return Ok(false);
                }
                total += term;
            }
        }
        Ok(true)
    };
    if !count_stream(roles::HOSP, n_hosp, detect.d_hosp)? {
        return Ok(f64::NEG_INFINITY);
    }
    if !count_stream(roles::DEATHS, n_death, detect.d_death)? {
        return Ok(f64::NEG_INFINITY);
    }
    for (role, p) in [(roles::ICU_GIVEN_HOSP, probs.p_icu), (roles::DEATH_GIVEN_HOSP, probs.p_death)] {
        if let Some(s) = streams.maybe(role) {
            for o in s.filter_age(age_index).obs {
                let n = o.denominator.ok_or_else(|| {
                    Error::Config(format!("'{role}' needs an observed-outcome denominator"))
                })? as u64;
                let term = binomial_logpmf(o.value as u64, n, p)?;
                if term == f64::NEG_INFINITY {
                    return Ok(f64::NEG_INFINITY);
                }
                total += term;
            }
        }
    }
    Ok(total)
}

fn flat() -> PriorConfig {
    PriorConfig::Uniform { lo: 0.0, hi: 1.0 }
}

/// Prior configuration for one wave's parameters; every entry defaults to the
/// flat uniform on [0, 1]. `Fixed` pins a value instead of adding a parameter.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SeverityPriors {
    pub pi_base: PriorConfig,
    pub pi_inc: PriorConfig,
    pub p_sym: PriorConfig,
    pub p_hosp: PriorConfig,
    pub p_icu: PriorConfig,
    pub p_death: PriorConfig,
    pub d_sym: PriorConfig,
    pub d_hosp: PriorConfig,
    pub d_death: PriorConfig,
    pub d_icu: PriorConfig,
}

impl Default for SeverityPriors {
    fn default() -> Self {
        Self {
            pi_base: flat(),
            pi_inc: flat(),
            p_sym: flat(),
            p_hosp: flat(),
            p_icu: flat(),
            p_death: flat(),
            d_sym: flat(),
            d_hosp: flat(),
            d_death: flat(),
            d_icu: flat(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveConfig {
    pub wave: usize,
    pub population: Vec<f64>,
    #[serde(default)]
    pub priors: SeverityPriors,
    /// Drop the symptomatic detection probability (force d_sym = 1), the
    /// variant that reads the point estimate as the full symptomatic count.
    #[serde(default)]
    pub naive_detection: bool,
    /// Center this wave's conditional probabilities on the previous wave's on
    /// the logit scale.
    #[serde(default)]
    pub center_on_previous: bool,
}

/// A built severity graph plus the bookkeeping that maps parameter positions
/// back to (quantity, age band, wave) for summaries.
pub struct SeverityModel {
    pub graph: ModelGraph,
    pub meta: Vec<ParamMeta>,
    pub ages: AgeStructure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub node: String,
    pub age: Option<String>,
    pub wave: usize,
}

#[derive(Clone, Copy)]
enum Slot {
    Node(NodeRef),
    Fixed(f64),
}

impl Slot {
    fn get(&self, ctx: &EvalCtx) -> Result<f64> {
        match self {
            Slot::Node(r) => ctx.param(*r),
            Slot::Fixed(v) => Ok(*v),
        }
    }

    fn dep(&self) -> Option<NodeRef> {
        match self {
            Slot::Node(r) => Some(*r),
            Slot::Fixed(_) => None,
        }
    }
}

struct WaveBuilder<'a> {
    b: &'a mut GraphBuilder,
    meta: &'a mut Vec<ParamMeta>,
    wave: usize,
}

impl WaveBuilder<'_> {
    fn add_param(
        &mut self,
        base: &str,
        age: Option<&str>,
        cfg: &PriorConfig,
        unit_interval: bool,
        center: Option<(usize, f64)>,
    ) -> Result<Slot> {
        let name = match age {
            Some(a) => format!("w{}.{base}[{a}]", self.wave),
            None => format!("w{}.{base}", self.wave),
        };
        if let Some(v) = cfg.fixed_value() {
            if unit_interval && !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("fixed value {v} for '{name}' outside [0, 1]")));
            }
            return Ok(Slot::Fixed(v));
        }
        let spec = match center {
            Some((idx, sd)) => PriorSpec::LogitNormalCentered { center: idx, sd },
            None => cfg.as_spec().expect("not fixed"),
        };
        if unit_interval {
            match spec.support() {
                Support::Bounded(lo, hi) if lo >= 0.0 && hi <= 1.0 => {}
                _ => {
                    return Err(Error::Config(format!(
                        "prior for probability '{name}' must stay within [0, 1]"
                    )))
                }
            }
        }
        let r = self.b.param(name.clone(), spec)?;
        self.meta.push(ParamMeta {
            name,
            node: base.to_string(),
            age: age.map(str::to_owned),
            wave: self.wave,
        });
        Ok(Slot::Node(r))
    }
}

fn deps_of(slots: &[Slot]) -> Vec<NodeRef> {
    slots.iter().filter_map(Slot::dep).collect()
}

/// Build the model graph for a sequence of waves sharing one age structure.
/// Streams carry per-age observations; each (role, age) pair with data becomes
/// its own data node so deviance and conflict diagnostics resolve per cell.
pub fn build_multiwave_graph(
    ages: &AgeStructure,
    waves: &[(WaveConfig, StreamSet)],
    hier_sd: f64,
) -> Result<SeverityModel> {
    if waves.is_empty() {
        return Err(Error::Config("at least one wave is required".into()));
    }
    if !(hier_sd > 0.0) {
        return Err(Error::Config(format!("hierarchical sd {hier_sd} must be > 0")));
    }
    let mut b = GraphBuilder::new();
    let mut meta = Vec::new();
    // conditional-probability nodes of the previous wave, keyed (base, age)
    let mut prev_probs: BTreeMap<(String, usize), usize> = BTreeMap::new();

    for (cfg, streams) in waves {
        if cfg.population.len() != ages.len() {
            return Err(Error::Config(format!(
                "wave {} population has {} entries for {} age bands",
                cfg.wave,
                cfg.population.len(),
                ages.len()
            )));
        }
        for role in streams.roles() {
            if roles::kind(role).is_none() {
                return Err(Error::Config(format!("unknown stream role '{role}'")));
            }
            if let Some(max_age) = streams.get(role)?.max_age_index() {
                if max_age >= ages.len() {
                    return Err(Error::Config(format!(
                        "stream '{role}' references age_index {max_age} beyond {} bands",
                        ages.len()
                    )));
                }
            }
        }
        let mut cur_probs: BTreeMap<(String, usize), usize> = BTreeMap::new();
        let mut icu_totals: Vec<NodeRef> = Vec::new();
        let d_icu = wave_uses_icu(streams)
            .then(|| {
                let mut wb = WaveBuilder { b: &mut b, meta: &mut meta, wave: cfg.wave };
                wb.add_param("d_icu", None, &cfg.priors.d_icu, true, None)
            })
            .transpose()?;

        for (a, label) in ages.labels().iter().enumerate() {
            let mut wb = WaveBuilder { b: &mut b, meta: &mut meta, wave: cfg.wave };
            let label = label.as_str();
            let n_pop = cfg.population[a];

            let centered = |wb: &mut WaveBuilder, base: &str, cfg_p: &PriorConfig| -> Result<Slot> {
                let center = if cfg.center_on_previous {
                    prev_probs.get(&(base.to_string(), a)).map(|&idx| (idx, hier_sd))
                } else {
                    None
                };
                if center.is_some() && cfg_p.fixed_value().is_some() {
                    return wb.add_param(base, Some(label), cfg_p, true, None);
                }
                wb.add_param(base, Some(label), cfg_p, true, center)
            };

            let pi_base = wb.add_param("pi_base", Some(label), &cfg.priors.pi_base, true, None)?;
            let pi_inc = wb.add_param("pi_inc", Some(label), &cfg.priors.pi_inc, true, None)?;
            let p_sym = centered(&mut wb, "p_sym", &cfg.priors.p_sym)?;
            let p_hosp = centered(&mut wb, "p_hosp", &cfg.priors.p_hosp)?;
            let p_icu = centered(&mut wb, "p_icu", &cfg.priors.p_icu)?;
            let p_death = centered(&mut wb, "p_death", &cfg.priors.p_death)?;
            let d_sym_cfg = if cfg.naive_detection {
                PriorConfig::Fixed { value: 1.0 }
            } else {
                cfg.priors.d_sym.clone()
            };
            let d_sym = wb.add_param("d_sym", Some(label), &d_sym_cfg, true, None)?;
            let d_hosp = wb.add_param("d_hosp", Some(label), &cfg.priors.d_hosp, true, None)?;
            let d_death = wb.add_param("d_death", Some(label), &cfg.priors.d_death, true, None)?;

            for (base, slot) in [
                ("p_sym", p_sym),
                ("p_hosp", p_hosp),
                ("p_icu", p_icu),
                ("p_death", p_death),
            ] {
                if let Slot::Node(NodeRef::Param(idx)) = slot {
                    cur_probs.insert((base.to_string(), a), idx);
                }
            }

            let w = cfg.wave;
            b.set_plate(Some(label));
            let chain = [pi_inc, p_sym, p_hosp, p_icu, p_death];
            let counts_eval = move |ctx: &mut EvalCtx| {
                let probs = ChainProbs {
                    p_inf: chain[0].get(ctx)?,
                    p_sym: chain[1].get(ctx)?,
                    p_hosp: chain[2].get(ctx)?,
                    p_icu: chain[3].get(ctx)?,
                    p_death: chain[4].get(ctx)?,
                };
                Ok(pyramid_chain(&probs, n_pop).to_vec())
            };
            let counts_name = format!("w{w}.counts[{label}]");
            let counts_deps = deps_of(&chain);
            let counts = if counts_deps.is_empty() {
                b.constant_functional(counts_name, counts_eval)?
            } else {
                b.functional(counts_name, counts_deps, counts_eval)?
            };
            let mut level_refs = Vec::with_capacity(5);
            for (i, level) in ["N_I", "N_S", "N_H", "N_ICU", "N_D"].into_iter().enumerate() {
                level_refs.push(b.functional(
                    format!("w{w}.{level}[{label}]"),
                    vec![counts],
                    move |ctx| Ok(vec![ctx.values(counts)?[i]]),
                )?);
            }
            let [_, n_sym_ref, n_hosp_ref, n_icu_ref, n_death_ref]: [NodeRef; 5] =
                level_refs.try_into().expect("five levels");
            icu_totals.push(n_icu_ref);

            let mut bind = |role: &str,
                            parent_suffix: &str,
                            deps: Vec<NodeRef>,
                            obs_model: ObsModel,
                            eval: Box<dyn Fn(&mut EvalCtx, usize) -> Result<Vec<f64>> + Send + Sync>|
             -> Result<()> {
                let Some(stream) = streams.maybe(role) else { return Ok(()) };
                let sub = stream.filter_age(a);
                if sub.is_empty() {
                    return Ok(());
                }
                let n_obs = sub.len();
                let parent_name = format!("w{w}.{parent_suffix}[{label}]");
                let parent = if deps.is_empty() {
                    b.constant_functional(parent_name, move |ctx| eval(ctx, n_obs))?
                } else {
                    b.functional(parent_name, deps, move |ctx| eval(ctx, n_obs))?
                };
                b.data(format!("w{w}.{role}[{label}]"), parent, obs_model, sub)
            };

            bind(
                roles::SERO_BASELINE,
                "sero_base_p",
                deps_of(&[pi_base]),
                ObsModel::BinomialProb,
                Box::new(move |ctx, n| Ok(vec![pi_base.get(ctx)?; n])),
            )?;
            bind(
                roles::SERO_POST,
                "sero_post_p",
                deps_of(&[pi_base, pi_inc]),
                ObsModel::BinomialProb,
                Box::new(move |ctx, n| {
                    let pi = pi_base.get(ctx)? + pi_inc.get(ctx)?;
                    Ok(vec![pi; n])
                }),
            )?;
            bind(
                roles::SYM_POINT,
                "sym_detected",
                {
                    let mut d = deps_of(&[d_sym]);
                    d.push(n_sym_ref);
                    d
                },
                ObsModel::NormalLogPoint,
                Box::new(move |ctx, n| {
                    let m = (d_sym.get(ctx)? * ctx.scalar(n_sym_ref)?).floor();
                    Ok(vec![m; n])
                }),
            )?;
            bind(
                roles::HOSP,
                "hosp_pairs",
                {
                    let mut d = deps_of(&[d_hosp]);
                    d.push(n_hosp_ref);
                    d
                },
                ObsModel::BinomialSizeProb,
                Box::new(move |ctx, n| {
                    let size = ctx.scalar(n_hosp_ref)?;
                    let d = d_hosp.get(ctx)?;
                    Ok([size, d].repeat(n))
                }),
            )?;
            bind(
                roles::DEATHS,
                "death_pairs",
                {
                    let mut d = deps_of(&[d_death]);
                    d.push(n_death_ref);
                    d
                },
                ObsModel::BinomialSizeProb,
                Box::new(move |ctx, n| {
                    let size = ctx.scalar(n_death_ref)?;
                    let d = d_death.get(ctx)?;
                    Ok([size, d].repeat(n))
                }),
            )?;
            bind(
                roles::ICU_GIVEN_HOSP,
                "icu_rate",
                deps_of(&[p_icu]),
                ObsModel::BinomialProb,
                Box::new(move |ctx, n| Ok(vec![p_icu.get(ctx)?; n])),
            )?;
            bind(
                roles::DEATH_GIVEN_HOSP,
                "death_rate",
                deps_of(&[p_death]),
                ObsModel::BinomialProb,
                Box::new(move |ctx, n| Ok(vec![p_death.get(ctx)?; n])),
            )?;
            b.set_plate(None::<String>);
        }

        // wave-level ICU linkage: total ICU count across ages, observed
        // through d_icu either as a log-scale point estimate or as the
        // confirmed-admissions lower bound
        if let Some(d_icu) = d_icu {
            let w = cfg.wave;
            let totals = icu_totals.clone();
            let mut total_deps = deps_of(&[d_icu]);
            total_deps.extend(totals.iter().copied());
            let detected = b.functional(
                format!("w{w}.icu_detected_total"),
                total_deps.clone(),
                move |ctx| {
                    let mut sum = 0.0;
                    for r in &totals {
                        sum += ctx.scalar(*r)?;
                    }
                    Ok(vec![(d_icu.get(ctx)? * sum).floor()])
                },
            )?;
            if let Some(s) = streams.maybe(roles::ICU_POINT) {
                let n = s.len();
                let view = b.functional(
                    format!("w{w}.icu_point_mean"),
                    vec![detected],
                    move |ctx| Ok(vec![ctx.scalar(detected)?; n]),
                )?;
                b.data(format!("w{w}.{}", roles::ICU_POINT), view, ObsModel::NormalLogPoint, s.clone())?;
            }
            if let Some(s) = streams.maybe(roles::ICU_LOWER_BOUND) {
                let totals = icu_totals.clone();
                let n = s.len();
                let pairs = b.functional(
                    format!("w{w}.icu_bound_pairs"),
                    total_deps,
                    move |ctx| {
                        let mut sum = 0.0;
                        for r in &totals {
                            sum += ctx.scalar(*r)?;
                        }
                        Ok([sum, d_icu.get(ctx)?].repeat(n))
                    },
                )?;
                b.data(format!("w{w}.{}", roles::ICU_LOWER_BOUND), pairs, ObsModel::BinomialSizeProb, s.clone())?;
            }
        }

        if cfg.center_on_previous && prev_probs.is_empty() && waves.len() > 1 {
            return Err(Error::Config(format!(
                "wave {} centers on the previous wave, but it has no free probabilities",
                cfg.wave
            )));
        }
        prev_probs = cur_probs;
    }

    let graph = b.build()?;
    Ok(SeverityModel { graph, meta, ages: ages.clone() })
}

fn wave_uses_icu(streams: &StreamSet) -> bool {
    streams.maybe(roles::ICU_POINT).is_some() || streams.maybe(roles::ICU_LOWER_BOUND).is_some()
}

pub fn build_wave_graph(
    ages: &AgeStructure,
    cfg: WaveConfig,
    streams: StreamSet,
) -> Result<SeverityModel> {
    build_multiwave_graph(ages, &[(cfg, streams)], 1.0)
}

/// Configuration of the stand-alone ICU admission process fit: daily rates
/// with a log-scale random walk prior, a known exit rate, and the occupancy at
/// the start of the window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcuProcessConfig {
    pub mu: f64,
    pub rw_sd: f64,
    pub lambda0: PriorConfig,
    #[serde(default)]
    pub nu0: f64,
}

/// Graph for the ICU immigration-death sub-model: parameters are the daily
/// admission rates, the data node is the Poisson census series, and
/// `icu_admissions_total` exposes the cumulative confirmed admissions the
/// severity model consumes as its lower bound.
pub fn build_icu_process_graph(
    cfg: &IcuProcessConfig,
    prevalence: &DataStream,
) -> Result<SeverityModel> {
    if !(cfg.mu > 0.0) {
        return Err(Error::Config(format!("ICU exit rate {} must be > 0", cfg.mu)));
    }
    if !(cfg.rw_sd > 0.0) {
        return Err(Error::Config(format!("ICU random-walk sd {} must be > 0", cfg.rw_sd)));
    }
    if (prevalence.grid.step - 1.0).abs() > 1e-12 {
        return Err(Error::Config("ICU prevalence must be on a daily grid".into()));
    }
    let days = prevalence.grid.len;
    let spec0 = match cfg.lambda0.as_spec() {
        Some(s @ (PriorSpec::LogNormal { .. } | PriorSpec::Uniform { .. })) => s,
        Some(_) | None => {
            return Err(Error::Config(
                "first ICU admission rate needs a log-normal or uniform prior".into(),
            ))
        }
    };
    if let PriorSpec::Uniform { lo, .. } = spec0 {
        if lo < 0.0 {
            return Err(Error::Config("ICU admission rates cannot be negative".into()));
        }
    }

    let mut b = GraphBuilder::new();
    let mut meta = Vec::new();
    let mut lambda = Vec::with_capacity(days);
    for k in 0..days {
        let name = format!("icu_lambda[{k}]");
        let spec = if k == 0 {
            spec0.clone()
        } else {
            PriorSpec::LogNormalCentered { center: k - 1, sd: cfg.rw_sd }
        };
        let r = b.param(name.clone(), spec)?;
        meta.push(ParamMeta { name, node: "icu_lambda".into(), age: None, wave: 0 });
        lambda.push(r);
    }
    let (mu, nu0) = (cfg.mu, cfg.nu0);
    let lam = lambda.clone();
    let obs_days: Vec<usize> = prevalence.obs.iter().map(|o| o.time_index).collect();
    let census = b.functional("icu_census_mean", lambda.clone(), move |ctx| {
        let rates: Vec<f64> = lam.iter().map(|r| ctx.param(*r)).collect::<Result<_>>()?;
        let params = IcuProcessParams { lambda: rates, mu, nu0 };
        let path = icu_mean_path(&params);
        Ok(obs_days.iter().map(|&d| path[d]).collect())
    })?;
    let lam = lambda.clone();
    b.functional("icu_admissions_total", lambda, move |ctx| {
        let mut sum = 0.0;
        for r in &lam {
            sum += ctx.param(*r)?;
        }
        Ok(vec![sum.floor()])
    })?;
    b.data("icu_census", census, ObsModel::Poisson, prevalence.clone())?;
    let graph = b.build()?;
    Ok(SeverityModel { graph, meta, ages: AgeStructure::new(vec!["all".to_string()])? })
}

/// Summarise cumulative confirmed ICU admissions from posterior draws as a
/// log-scale point estimate (mean, sd), the pair the severity wave consumes.
pub fn icu_point_from_draws(model: &SeverityModel, draws: &[Vec<f64>]) -> Result<(f64, f64)> {
    if draws.len() < 2 {
        return Err(Error::Config("need at least two posterior draws".into()));
    }
    let logs: Vec<f64> = draws
        .iter()
        .map(|theta| {
            let n = model.graph.node_scalar(theta, "icu_admissions_total")?;
            if n < 1.0 {
                return Err(Error::Domain("zero cumulative admissions in a posterior draw".into()));
            }
            Ok(n.ln())
        })
        .collect::<Result<_>>()?;
    Ok((crate::numeric::mean(&logs), crate::numeric::sd(&logs)))
}

/// Manifest describing a severity fit: age bands, per-wave stream files,
/// priors, and flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeverityManifest {
    pub ages: Vec<String>,
    #[serde(default = "default_hier_sd")]
    pub hier_sd: f64,
    pub waves: Vec<WaveManifestEntry>,
}

fn default_hier_sd() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveManifestEntry {
    #[serde(flatten)]
    pub config: WaveConfig,
    /// role -> stream file plus its reporting grid
    pub streams: BTreeMap<String, StreamFileEntry>,
    #[serde(default)]
    pub icu_process: Option<IcuProcessConfig>,
}

impl SeverityManifest {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Read every wave's streams (paths relative to `base`) and build the
    /// joint graph.
    pub fn build<P: AsRef<Path>>(&self, base: P) -> Result<SeverityModel> {
        let ages = AgeStructure::new(self.ages.clone())?;
        let mut waves = Vec::new();
        for entry in &self.waves {
            let mut set = StreamSet::default();
            for (role, file) in &entry.streams {
                let kind = roles::kind(role)
                    .ok_or_else(|| Error::Config(format!("unknown stream role '{role}'")))?;
                let path = base.as_ref().join(&file.path);
                let stream = DataStream::read_csv_path(&path, kind, file.grid.to_grid()?)?;
                set.insert(role, stream)?;
            }
            waves.push((entry.config.clone(), set));
        }
        build_multiwave_graph(&ages, &waves, self.hier_sd)
    }
}
