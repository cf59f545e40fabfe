//! Age-structured SEIR dynamics with Reed-Frost infection probabilities,
//! delay convolution to health-care endpoints, and the four-stream
//! observational model (confirmed cases, GP consultations, virological
//! positivity, sero-prevalence).
//!
//! The continuous system is evaluated with an Euler scheme on a grid of
//! `delta_t`-day steps. Endpoint counts are convolutions of the per-step new
//! infections with a discretized delay distribution, aggregated to each
//! stream's reporting grid by summation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::age::AgeStructure;
use crate::error::{Error, Result};
use crate::graph::{EtaRef, EvalCtx, GraphBuilder, ModelGraph, NodeRef, ObsModel};
use crate::kernels::{binomial_logpmf, negbin_logpmf};
use crate::numeric::spectral_radius;
use crate::prior::{PriorConfig, PriorSpec, Support};
use crate::stream::{DataStream, StreamFileEntry, StreamSet};

/// Default Euler step width in days, small enough that the chance of more
/// than one state change per interval is negligible.
pub const DEFAULT_DT: f64 = 0.5;

/// Lag steps retained by the discretized delay distribution.
pub const DELAY_SUPPORT: usize = 28;

/// Where the Euler step width enters the infection probability. The written
/// form of the Reed-Frost expression is ambiguous about this; `PerContact`
/// keeps the result a per-interval probability in [0, 1) and makes the
/// single-infective case equal the per-contact escape probability, so it is
/// the default. `OnRate` multiplies the whole bracket instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtPlacement {
    #[default]
    PerContact,
    OnRate,
}

/// Relative effective-contact rates between age groups, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl MixingMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Config("mixing matrix must have at least one row".into()));
        }
        let mut entries = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::Config(format!(
                    "mixing matrix must be square, got a row of length {} in a {}-row matrix",
                    row.len(),
                    n
                )));
            }
            for &x in row {
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::Config(format!("mixing matrix entry {x} must be finite and >= 0")));
                }
                entries.push(x);
            }
        }
        Ok(Self { n, entries })
    }

    pub fn n_ages(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[a * self.n + b]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { n: self.n, entries: self.entries.iter().map(|x| x * factor).collect() }
    }

    /// Rescale so that the next-generation matrix `diag(N) * M` has unit
    /// spectral radius. After this, the reproduction-number input to the
    /// force of infection is the model's actual basic reproduction number.
    pub fn ngm_normalized(&self, populations: &[f64]) -> Result<Self> {
        if populations.len() != self.n {
            return Err(Error::Config(format!(
                "{} populations for a {}-group mixing matrix",
                populations.len(),
                self.n
            )));
        }
        let mut ngm = vec![0.0; self.n * self.n];
        for a in 0..self.n {
            for b in 0..self.n {
                ngm[a * self.n + b] = populations[a] * self.get(a, b);
            }
        }
        let rho = spectral_radius(&ngm, self.n);
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Config(format!(
                "next-generation matrix has spectral radius {rho}; the mixing matrix cannot be normalized"
            )));
        }
        Ok(self.scaled(1.0 / rho))
    }
}

/// SEIR relation between the initial exponential growth rate and the basic
/// reproduction number: `R0 = (1 + phi * d_L)(1 + phi * d_I)`. A zero latent
/// period gives the SIR limit `1 + phi * d_I`.
pub fn r0_from_growth_rate(growth_rate: f64, latent_period: f64, infectious_period: f64) -> Result<f64> {
    if !(infectious_period > 0.0) || !infectious_period.is_finite() {
        return Err(Error::Domain(format!("infectious period {infectious_period} must be positive")));
    }
    if !(latent_period >= 0.0) || !latent_period.is_finite() {
        return Err(Error::Domain(format!("latent period {latent_period} must be >= 0")));
    }
    if !growth_rate.is_finite() {
        return Err(Error::Domain(format!("growth rate {growth_rate} must be finite")));
    }
    let fl = 1.0 + growth_rate * latent_period;
    let fi = 1.0 + growth_rate * infectious_period;
    if fl <= 0.0 || fi <= 0.0 {
        return Err(Error::Domain(format!(
            "growth rate {growth_rate} is at or below the feasibility bound -1/max(d_L, d_I)"
        )));
    }
    Ok(fl * fi)
}

/// Per-interval infection probability for each age group under the
/// Reed-Frost formulation: one minus the probability of escaping every
/// infectious individual in every group. Computed in the log domain so large
/// infectious counts do not underflow the product.
pub fn force_of_infection(
    infectious: &[f64],
    mixing: &MixingMatrix,
    r0: f64,
    infectious_period: f64,
    dt: f64,
    placement: DtPlacement,
) -> Result<Vec<f64>> {
    let n = infectious.len();
    if mixing.n_ages() != n {
        return Err(Error::Config(format!(
            "{} infectious counts for a {}-group mixing matrix",
            n,
            mixing.n_ages()
        )));
    }
    if !(infectious_period > 0.0) || !(dt > 0.0) {
        return Err(Error::Domain("infectious period and step width must be positive".into()));
    }
    if !(r0 >= 0.0) || !r0.is_finite() {
        return Err(Error::Domain(format!("reproduction number {r0} must be finite and >= 0")));
    }
    let factor = match placement {
        DtPlacement::PerContact => dt * r0 / infectious_period,
        DtPlacement::OnRate => r0 / infectious_period,
    };
    let mut lambda = vec![0.0; n];
    for a in 0..n {
        let mut log_escape = 0.0;
        for (b, &inf_b) in infectious.iter().enumerate() {
            let bracket = 1.0 - factor * mixing.get(a, b);
            if bracket <= 0.0 {
                return Err(Error::ParameterRegime(format!(
                    "escape probability 1 - dt*M*R0/d_I is {bracket:.3e} for age pair ({a}, {b}); \
                     the per-contact infection probability exceeds 1"
                )));
            }
            if inf_b > 0.0 {
                log_escape += inf_b * bracket.ln();
            }
        }
        let p = -log_escape.exp_m1();
        lambda[a] = match placement {
            DtPlacement::PerContact => p,
            DtPlacement::OnRate => dt * p,
        };
    }
    Ok(lambda)
}

/// Compartment occupancy for every age group at one grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentState {
    pub susceptible: Vec<f64>,
    pub exposed: Vec<f64>,
    pub infectious: Vec<f64>,
    /// New infections during the interval that ends at this state's time.
    pub new_infections: Vec<f64>,
}

impl CompartmentState {
    pub fn n_ages(&self) -> usize {
        self.susceptible.len()
    }
}

/// State at `t_0` under the assumption of initial exponential growth: the
/// infectious mass is split over ages by the equilibrium weights, and the
/// exposed compartment holds `I * (d_L / d_I) * (1 + phi * d_I)` so that the
/// E-to-I flow sustains growth at rate `phi` from the first step.
pub fn initialize_state(
    initial_infectious: f64,
    growth_rate: f64,
    latent_period: f64,
    infectious_period: f64,
    populations: &[f64],
    weights: &[f64],
) -> Result<CompartmentState> {
    if !(initial_infectious > 0.0) {
        return Err(Error::Domain(format!(
            "initial infectious mass {initial_infectious} must be positive"
        )));
    }
    if weights.len() != populations.len() {
        return Err(Error::Config(format!(
            "{} equilibrium weights for {} age groups",
            weights.len(),
            populations.len()
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (wsum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "equilibrium weights must be nonnegative and sum to 1, got sum {wsum}"
        )));
    }
    let fi = 1.0 + growth_rate * infectious_period;
    if fi <= 0.0 {
        return Err(Error::ParameterRegime(format!(
            "growth rate {growth_rate} makes the exposed-to-infectious ratio negative"
        )));
    }
    let ratio = latent_period / infectious_period * fi;
    let n = populations.len();
    let mut state = CompartmentState {
        susceptible: vec![0.0; n],
        exposed: vec![0.0; n],
        infectious: vec![0.0; n],
        new_infections: vec![0.0; n],
    };
    for a in 0..n {
        let inf = initial_infectious * weights[a];
        let exp = inf * ratio;
        let sus = populations[a] - inf - exp;
        if sus <= 0.0 {
            return Err(Error::ParameterRegime(format!(
                "initial infectious mass {initial_infectious} leaves no susceptibles in age group {a}"
            )));
        }
        state.infectious[a] = inf;
        state.exposed[a] = exp;
        state.susceptible[a] = sus;
    }
    Ok(state)
}

/// One Euler step. `step` is the index reported if a compartment goes
/// negative beyond tolerance, which signals that `dt` is too large relative
/// to the latent or infectious period.
#[allow(clippy::too_many_arguments)]
pub fn step_dynamics(
    state: &CompartmentState,
    mixing: &MixingMatrix,
    r0: f64,
    latent_period: f64,
    infectious_period: f64,
    dt: f64,
    placement: DtPlacement,
    step: usize,
) -> Result<CompartmentState> {
    if !(latent_period > 0.0) {
        return Err(Error::Domain(format!("latent period {latent_period} must be positive")));
    }
    let lambda = force_of_infection(&state.infectious, mixing, r0, infectious_period, dt, placement)?;
    let n = state.n_ages();
    let mut next = CompartmentState {
        susceptible: vec![0.0; n],
        exposed: vec![0.0; n],
        infectious: vec![0.0; n],
        new_infections: vec![0.0; n],
    };
    for a in 0..n {
        let new_inf = lambda[a] * state.susceptible[a];
        let sus = state.susceptible[a] - new_inf;
        let exp = state.exposed[a] + new_inf - dt / latent_period * state.exposed[a];
        let inf = state.infectious[a] + dt / latent_period * state.exposed[a]
            - dt / infectious_period * state.infectious[a];
        for v in [sus, exp, inf] {
            if v < -1e-9 {
                return Err(Error::StepSize { step });
            }
        }
        next.new_infections[a] = new_inf;
        next.susceptible[a] = sus.max(0.0);
        next.exposed[a] = exp.max(0.0);
        next.infectious[a] = inf.max(0.0);
    }
    Ok(next)
}

/// Basic transmission parameters: growth rate, initial infectious mass, mean
/// infectious period, the known mean latent period, and one mixing-matrix
/// multiplier per phase of the piecewise-constant contact schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionParams {
    pub growth_rate: f64,
    pub initial_infectious: f64,
    pub infectious_period: f64,
    pub latent_period: f64,
    pub mixing_multipliers: Vec<f64>,
}

impl TransmissionParams {
    pub fn validate(&self) -> Result<()> {
        if !self.growth_rate.is_finite() {
            return Err(Error::Domain(format!("growth rate {} must be finite", self.growth_rate)));
        }
        if !(self.initial_infectious > 0.0) || !self.initial_infectious.is_finite() {
            return Err(Error::Domain(format!(
                "initial infectious mass {} must be positive",
                self.initial_infectious
            )));
        }
        if !(self.infectious_period > 0.0) || !self.infectious_period.is_finite() {
            return Err(Error::Domain(format!(
                "infectious period {} must be positive",
                self.infectious_period
            )));
        }
        if !(self.latent_period > 0.0) || !self.latent_period.is_finite() {
            return Err(Error::Domain(format!(
                "latent period {} must be positive",
                self.latent_period
            )));
        }
        for &m in &self.mixing_multipliers {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::Domain(format!("mixing multiplier {m} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn r0(&self) -> Result<f64> {
        r0_from_growth_rate(self.growth_rate, self.latent_period, self.infectious_period)
    }
}

/// Piecewise-constant contact schedule: a normalized baseline matrix and the
/// steps at which a new multiplier phase begins (school terms, holidays).
#[derive(Debug, Clone)]
pub struct MixingSchedule {
    baseline: MixingMatrix,
    phase_starts: Vec<usize>,
}

impl MixingSchedule {
    pub fn new(baseline: MixingMatrix, phase_starts: Vec<usize>) -> Result<Self> {
        for pair in phase_starts.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config("mixing phase starts must be strictly increasing".into()));
            }
        }
        if phase_starts.first() == Some(&0) {
            return Err(Error::Config("the first mixing phase already starts at step 0".into()));
        }
        Ok(Self { baseline, phase_starts })
    }

    pub fn baseline(&self) -> &MixingMatrix {
        &self.baseline
    }

    pub fn n_phases(&self) -> usize {
        self.phase_starts.len() + 1
    }

    pub fn phase_of_step(&self, step: usize) -> usize {
        self.phase_starts.partition_point(|&s| s <= step)
    }
}

/// Full simulated trajectory; `states[k]` is the state at `t_k = k * dt`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<CompartmentState>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn n_ages(&self) -> usize {
        self.states[0].n_ages()
    }

    /// New infections per step for one age group; index 0 is always zero.
    pub fn new_infections(&self, age: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.new_infections[age]).collect()
    }

    pub fn new_infections_total(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.new_infections.iter().sum()).collect()
    }

    pub fn susceptible(&self, age: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.susceptible[age]).collect()
    }

    pub fn cumulative_infections_total(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.new_infections_total()
            .into_iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect()
    }

    /// Share of the whole population infected over the simulated horizon.
    pub fn attack_rate(&self, populations: &[f64]) -> f64 {
        let total: f64 = self.states.iter().map(|s| s.new_infections.iter().sum::<f64>()).sum();
        total / populations.iter().sum::<f64>()
    }

    /// Flat layout consumed by the model graph: the per-step new infections
    /// block followed by the susceptible block, each step-major over ages.
    pub fn flat(&self) -> Vec<f64> {
        let n = self.n_ages();
        let mut out = Vec::with_capacity(2 * self.states.len() * n);
        for s in &self.states {
            out.extend_from_slice(&s.new_infections);
        }
        for s in &self.states {
            out.extend_from_slice(&s.susceptible);
        }
        out
    }
}

/// Run the Euler scheme for `n_steps` steps from the exponential-growth
/// initial state. Parameter values that push the dynamics outside their valid
/// regime surface as `ParameterRegime` or `StepSize` errors, which likelihood
/// evaluation treats as rejections.
pub fn simulate_trajectory(
    params: &TransmissionParams,
    schedule: &MixingSchedule,
    populations: &[f64],
    weights: &[f64],
    n_steps: usize,
    dt: f64,
    placement: DtPlacement,
) -> Result<Trajectory> {
    params.validate()?;
    if params.mixing_multipliers.len() != schedule.n_phases() {
        return Err(Error::Config(format!(
            "{} mixing multipliers for a schedule with {} phases",
            params.mixing_multipliers.len(),
            schedule.n_phases()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step width {dt} must be positive")));
    }
    let r0 = params.r0().map_err(|_| {
        Error::ParameterRegime(format!(
            "growth rate {} is below the SEIR feasibility bound",
            params.growth_rate
        ))
    })?;
    let matrices: Vec<MixingMatrix> =
        params.mixing_multipliers.iter().map(|&m| schedule.baseline().scaled(m)).collect();
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(initialize_state(
        params.initial_infectious,
        params.growth_rate,
        params.latent_period,
        params.infectious_period,
        populations,
        weights,
    )?);
    for k in 0..n_steps {
        let m = &matrices[schedule.phase_of_step(k)];
        let next = step_dynamics(
            states.last().expect("nonempty"),
            m,
            r0,
            params.latent_period,
            params.infectious_period,
            dt,
            placement,
            k,
        )?;
        states.push(next);
    }
    Ok(Trajectory { dt, states })
}

/// Hyperparameters of the infection-to-consultation delay: a gamma
/// incubation time convolved with an exponential consultation-seeking time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayConfig {
    pub incubation_shape: f64,
    pub incubation_scale: f64,
    pub consultation_mean: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self { incubation_shape: 2.0, incubation_scale: 0.8, consultation_mean: 1.5 }
    }
}

impl DelayConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, what) in [
            (self.incubation_shape, "incubation shape"),
            (self.incubation_scale, "incubation scale"),
            (self.consultation_mean, "consultation mean"),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("delay {what} {v} must be positive")));
            }
        }
        Ok(())
    }
}

fn normalized(mut pmf: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = pmf.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("delay distribution has no mass on its support".into()));
    }
    for p in &mut pmf {
        *p /= total;
    }
    Ok(pmf)
}

/// Discretize the gamma-plus-exponential delay onto `dt`-wide lag steps,
/// truncate at [`DELAY_SUPPORT`] steps, and renormalize.
pub fn discretized_delay_pmf(delay: &DelayConfig, dt: f64) -> Result<Vec<f64>> {
    delay.validate()?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step width {dt} must be positive")));
    }
    let gamma_cdf = |x: f64| {
        if x <= 0.0 {
            0.0
        } else {
            gamma_lr(delay.incubation_shape, x / delay.incubation_scale)
        }
    };
    let exp_cdf = |x: f64| -(-x / delay.consultation_mean).exp_m1();
    let g: Vec<f64> = (0..DELAY_SUPPORT)
        .map(|j| gamma_cdf((j + 1) as f64 * dt) - gamma_cdf(j as f64 * dt))
        .collect();
    let h: Vec<f64> = (0..DELAY_SUPPORT)
        .map(|j| exp_cdf((j + 1) as f64 * dt) - exp_cdf(j as f64 * dt))
        .collect();
    let mut f = vec![0.0; DELAY_SUPPORT];
    for (j, fj) in f.iter_mut().enumerate() {
        for i in 0..=j {
            *fj += g[i] * h[j - i];
        }
    }
    normalized(f)
}

/// Scale applied at each output step of an endpoint convolution.
#[derive(Debug, Clone, Copy)]
pub enum EndpointScale<'a> {
    Constant(f64),
    PerStep(&'a [f64]),
}

/// Endpoint count series `N_v = scale_v * sum_k Delta_k f(v - k)`. The delay
/// pmf must be normalized; if its support is longer than the series, it is
/// truncated to fit and its mass renormalized, with a warning.
pub fn convolve_endpoint(
    new_infections: &[f64],
    delay_pmf: &[f64],
    scale: EndpointScale,
) -> Result<Vec<f64>> {
    if delay_pmf.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Domain("delay pmf entries must be finite and >= 0".into()));
    }
    let total: f64 = delay_pmf.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("delay pmf must sum to 1, got {total}")));
    }
    let k = new_infections.len();
    if let EndpointScale::PerStep(s) = scale {
        if s.len() != k {
            return Err(Error::Config(format!(
                "{} per-step scales for a series of length {k}",
                s.len()
            )));
        }
    }
    let truncated;
    let pmf = if delay_pmf.len() > k {
        log::warn!(
            "delay support of {} lag steps exceeds the series length {k}; truncating and renormalizing",
            delay_pmf.len()
        );
        truncated = normalized(delay_pmf[..k].to_vec())?;
        &truncated[..]
    } else {
        delay_pmf
    };
    let mut out = vec![0.0; k];
    for (v, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (u, &p) in pmf.iter().enumerate().take(v + 1) {
            acc += p * new_infections[v - u];
        }
        let s = match scale {
            EndpointScale::Constant(c) => c,
            EndpointScale::PerStep(s) => s[v],
        };
        *o = s * acc;
    }
    Ok(out)
}

/// Sum a step-grid flow series into consecutive reporting bins. Index 0 of
/// the series is the initial instant and carries no interval, so bins start
/// at index 1; a trailing partial bin is dropped.
pub fn aggregate_flows(series: &[f64], steps_per_bin: usize) -> Vec<f64> {
    assert!(steps_per_bin > 0, "steps_per_bin must be positive");
    let n_bins = series.len().saturating_sub(1) / steps_per_bin;
    (0..n_bins)
        .map(|b| series[1 + b * steps_per_bin..1 + (b + 1) * steps_per_bin].iter().sum())
        .collect()
}

/// Coefficients of the background-consultation regression: a log-scale
/// linear predictor with age main effects and a polynomial in scaled time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundCoeffs {
    pub intercept: f64,
    /// One effect per age group after the first; the first is the reference.
    pub age_effects: Vec<f64>,
    /// Polynomial coefficients on time scaled to [-1, 1], degree 1 upward.
    pub time_coeffs: Vec<f64>,
}

impl BackgroundCoeffs {
    pub fn n_ages(&self) -> usize {
        self.age_effects.len() + 1
    }
}

fn scaled_day(day: usize, horizon: usize) -> f64 {
    if horizon <= 1 {
        0.0
    } else {
        2.0 * (day - 1) as f64 / (horizon - 1) as f64 - 1.0
    }
}

/// Expected non-pandemic ILI consultations per day and age group, flat
/// day-major: entry `(d - 1) * n_ages + a` holds day `d` for age `a`.
pub fn background_consultations(coeffs: &BackgroundCoeffs, horizon_days: usize) -> Vec<f64> {
    let n_ages = coeffs.n_ages();
    let mut out = Vec::with_capacity(horizon_days * n_ages);
    for day in 1..=horizon_days {
        let t = scaled_day(day, horizon_days);
        let mut poly = 0.0;
        let mut tp = 1.0;
        for &c in &coeffs.time_coeffs {
            tp *= t;
            poly += c * tp;
        }
        for a in 0..n_ages {
            let age = if a == 0 { 0.0 } else { coeffs.age_effects[a - 1] };
            out.push((coeffs.intercept + age + poly).exp());
        }
    }
    out
}

/// Stream roles recognized by the transmission model.
pub mod roles {
    use crate::stream::StreamKind;

    /// Laboratory-confirmed cases from the early containment phase.
    pub const CONFIRMED: &str = "confirmed";
    /// GP consultations for influenza-like illness, pandemic plus background.
    pub const GP_CONSULTATIONS: &str = "gp_consultations";
    /// Virological positivity among swabbed consultations.
    pub const POSITIVITY: &str = "positivity";
    /// Cross-sectional sero-prevalence rounds.
    pub const SERO: &str = "sero";

    pub const ALL: [&str; 4] = [CONFIRMED, GP_CONSULTATIONS, POSITIVITY, SERO];

    pub fn kind(role: &str) -> Option<StreamKind> {
        match role {
            CONFIRMED => Some(StreamKind::ConfirmedCases),
            GP_CONSULTATIONS => Some(StreamKind::GpConsultations),
            POSITIVITY => Some(StreamKind::ViroPositivity),
            SERO => Some(StreamKind::SeroPrevalence),
            _ => None,
        }
    }
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_background_degree() -> usize {
    3
}

fn default_intercept_prior() -> PriorConfig {
    PriorConfig::Normal { mean: 4.0, sd: 4.0 }
}

fn default_effect_prior() -> PriorConfig {
    PriorConfig::Normal { mean: 0.0, sd: 2.0 }
}

/// Shape of the background regression and the priors on its coefficient
/// classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundConfig {
    #[serde(default = "default_background_degree")]
    pub time_degree: usize,
    #[serde(default = "default_intercept_prior")]
    pub intercept: PriorConfig,
    #[serde(default = "default_effect_prior")]
    pub age_effect: PriorConfig,
    #[serde(default = "default_effect_prior")]
    pub time_effect: PriorConfig,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            time_degree: default_background_degree(),
            intercept: default_intercept_prior(),
            age_effect: default_effect_prior(),
            time_effect: default_effect_prior(),
        }
    }
}

/// Priors for the basic parameters. `mixing` needs one entry per phase of the
/// contact schedule (empty pins every multiplier at 1), `p_consultation` one
/// per consultation phase, `dispersion` one per dispersion phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransmissionPriors {
    pub growth_rate: PriorConfig,
    pub initial_infectious: PriorConfig,
    pub infectious_period: PriorConfig,
    #[serde(default)]
    pub mixing: Vec<PriorConfig>,
    pub p_symptomatic: PriorConfig,
    pub p_confirmation: PriorConfig,
    pub p_consultation: Vec<PriorConfig>,
    pub dispersion: Vec<PriorConfig>,
}

/// Scenario file: age structure, populations, grids, contact schedule, delay
/// hyperparameters, phase change-points, and priors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub ages: Vec<String>,
    pub populations: Vec<f64>,
    #[serde(default = "default_dt")]
    pub delta_t: f64,
    pub horizon_days: usize,
    pub latent_period: f64,
    pub contact_matrix: Vec<Vec<f64>>,
    /// Days (from 2 upward) at which a new mixing-multiplier phase begins.
    #[serde(default)]
    pub mixing_change_days: Vec<usize>,
    #[serde(default)]
    pub dt_placement: DtPlacement,
    /// Share of the initial infectious mass per age group; defaults to the
    /// population shares.
    #[serde(default)]
    pub equilibrium_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub delay: DelayConfig,
    /// Days at which the GP consultation probability changes.
    #[serde(default)]
    pub consultation_change_days: Vec<usize>,
    /// Days at which the count-stream dispersion changes.
    #[serde(default)]
    pub dispersion_change_days: Vec<usize>,
    pub priors: TransmissionPriors,
    #[serde(default)]
    pub background: BackgroundConfig,
}

fn validate_change_days(days: &[usize], horizon: usize, what: &str) -> Result<()> {
    let mut prev = 1usize;
    for &d in days {
        if d <= prev {
            return Err(Error::Config(format!(
                "{what} change days must be strictly increasing and start at day 2 or later"
            )));
        }
        if d > horizon {
            return Err(Error::Config(format!("{what} change day {d} is past the horizon {horizon}")));
        }
        prev = d;
    }
    Ok(())
}

fn phase_by_day(change_days: &[usize], horizon: usize) -> Vec<usize> {
    let mut v = vec![0; horizon + 1];
    for (d, slot) in v.iter_mut().enumerate().skip(1) {
        *slot = change_days.iter().filter(|&&c| c <= d).count();
    }
    v
}

/// A validated, resolved scenario ready for simulation and graph building.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub ages: AgeStructure,
    pub populations: Vec<f64>,
    pub dt: f64,
    pub steps_per_day: usize,
    pub n_steps: usize,
    pub horizon_days: usize,
    pub latent_period: f64,
    pub schedule: MixingSchedule,
    pub placement: DtPlacement,
    pub equilibrium_weights: Vec<f64>,
    /// Delay pmf truncated to the simulation length and renormalized.
    pub delay_pmf: Vec<f64>,
    pub mixing_priors: Vec<PriorConfig>,
    consultation_phase_of_day: Vec<usize>,
    dispersion_phase_of_day: Vec<usize>,
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        let ages = AgeStructure::new(config.ages.clone())?;
        let n_ages = ages.len();
        if config.populations.len() != n_ages {
            return Err(Error::Config(format!(
                "{} populations for {} age groups",
                config.populations.len(),
                n_ages
            )));
        }
        for &p in &config.populations {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::Config(format!("population {p} must be positive")));
            }
        }
        let dt = config.delta_t;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("step width {dt} must be positive")));
        }
        let spd = (1.0 / dt).round();
        if (1.0 / dt - spd).abs() > 1e-9 || spd < 1.0 {
            return Err(Error::Config(format!(
                "step width {dt} must divide one day into a whole number of steps"
            )));
        }
        let steps_per_day = spd as usize;
        let horizon = config.horizon_days;
        if horizon == 0 {
            return Err(Error::Config("horizon must cover at least one day".into()));
        }
        let n_steps = horizon * steps_per_day;
        if !(config.latent_period > 0.0) || !config.latent_period.is_finite() {
            return Err(Error::Config(format!(
                "latent period {} must be positive",
                config.latent_period
            )));
        }

        let baseline = MixingMatrix::from_rows(&config.contact_matrix)?;
        if baseline.n_ages() != n_ages {
            return Err(Error::Config(format!(
                "{}-group contact matrix for {} age groups",
                baseline.n_ages(),
                n_ages
            )));
        }
        let baseline = baseline.ngm_normalized(&config.populations)?;
        validate_change_days(&config.mixing_change_days, horizon, "mixing")?;
        let phase_starts: Vec<usize> =
            config.mixing_change_days.iter().map(|&d| (d - 1) * steps_per_day).collect();
        let schedule = MixingSchedule::new(baseline, phase_starts)?;

        let n_mixing_phases = schedule.n_phases();
        let mixing_priors = if config.priors.mixing.is_empty() {
            vec![PriorConfig::Fixed { value: 1.0 }; n_mixing_phases]
        } else if config.priors.mixing.len() == n_mixing_phases {
            config.priors.mixing.clone()
        } else {
            return Err(Error::Config(format!(
                "{} mixing priors for {} phases",
                config.priors.mixing.len(),
                n_mixing_phases
            )));
        };

        validate_change_days(&config.consultation_change_days, horizon, "consultation")?;
        validate_change_days(&config.dispersion_change_days, horizon, "dispersion")?;
        let n_gp_phases = config.consultation_change_days.len() + 1;
        let n_eta_phases = config.dispersion_change_days.len() + 1;
        if config.priors.p_consultation.len() != n_gp_phases {
            return Err(Error::Config(format!(
                "{} consultation priors for {} phases",
                config.priors.p_consultation.len(),
                n_gp_phases
            )));
        }
        if config.priors.dispersion.len() != n_eta_phases {
            return Err(Error::Config(format!(
                "{} dispersion priors for {} phases",
                config.priors.dispersion.len(),
                n_eta_phases
            )));
        }
        if config.background.time_degree > 10 {
            return Err(Error::Config(format!(
                "background time degree {} is unreasonably high",
                config.background.time_degree
            )));
        }

        let equilibrium_weights = match &config.equilibrium_weights {
            Some(w) => {
                if w.len() != n_ages {
                    return Err(Error::Config(format!(
                        "{} equilibrium weights for {} age groups",
                        w.len(),
                        n_ages
                    )));
                }
                let total: f64 = w.iter().sum();
                if w.iter().any(|&x| x < 0.0 || !x.is_finite()) || !(total > 0.0) {
                    return Err(Error::Config(
                        "equilibrium weights must be nonnegative with positive sum".into(),
                    ));
                }
                w.iter().map(|x| x / total).collect()
            }
            None => {
                let total: f64 = config.populations.iter().sum();
                config.populations.iter().map(|p| p / total).collect()
            }
        };

        let mut delay_pmf = discretized_delay_pmf(&config.delay, dt)?;
        if delay_pmf.len() > n_steps + 1 {
            delay_pmf.truncate(n_steps + 1);
            delay_pmf = normalized(delay_pmf)?;
        }

        let consultation_phase_of_day = phase_by_day(&config.consultation_change_days, horizon);
        let dispersion_phase_of_day = phase_by_day(&config.dispersion_change_days, horizon);

        Ok(Self {
            ages,
            populations: config.populations.clone(),
            dt,
            steps_per_day,
            n_steps,
            horizon_days: horizon,
            latent_period: config.latent_period,
            schedule,
            placement: config.dt_placement,
            equilibrium_weights,
            delay_pmf,
            mixing_priors,
            consultation_phase_of_day,
            dispersion_phase_of_day,
            config,
        })
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config(serde_json::from_str(&text)?)
    }

    pub fn n_ages(&self) -> usize {
        self.ages.len()
    }

    pub fn n_consultation_phases(&self) -> usize {
        self.config.consultation_change_days.len() + 1
    }

    pub fn n_dispersion_phases(&self) -> usize {
        self.config.dispersion_change_days.len() + 1
    }

    /// Calendar day (1-based) that step `k`'s interval falls in.
    pub fn day_of_step(&self, k: usize) -> usize {
        k.div_ceil(self.steps_per_day).clamp(1, self.horizon_days)
    }

    pub fn consultation_phase(&self, day: usize) -> usize {
        self.consultation_phase_of_day[day.min(self.horizon_days)]
    }

    pub fn dispersion_phase(&self, day: usize) -> usize {
        self.dispersion_phase_of_day[day.min(self.horizon_days)]
    }

    fn simulate(&self, params: &TransmissionParams) -> Result<Trajectory> {
        simulate_trajectory(
            params,
            &self.schedule,
            &self.populations,
            &self.equilibrium_weights,
            self.n_steps,
            self.dt,
            self.placement,
        )
    }

    /// Per-step scale for the GP consultation convolution at one symptomatic
    /// probability and per-phase consultation probabilities.
    fn consultation_scales(&self, p_sym: f64, p_gp: &[f64]) -> Vec<f64> {
        (0..=self.n_steps)
            .map(|v| p_sym * p_gp[self.consultation_phase(self.day_of_step(v))])
            .collect()
    }
}

/// Disease progression and observation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationParams {
    pub p_symptomatic: f64,
    pub p_confirmation: f64,
    /// One consultation probability per phase.
    pub p_consultation: Vec<f64>,
    /// One negative binomial size per dispersion phase.
    pub dispersion: Vec<f64>,
    pub background: BackgroundCoeffs,
}

/// The reporting window of one observation in whole days: `(start, end]`.
fn obs_window(obs: &crate::stream::Observation, grid: &crate::grid::TimeGrid) -> (usize, usize) {
    let start = obs.day.round() as usize;
    let width = grid.step.round() as usize;
    (start, start + width)
}

fn validate_stream_grid(role: &str, stream: &DataStream, scenario: &Scenario) -> Result<()> {
    let g = &stream.grid;
    if g.step.fract() != 0.0 || g.step < 1.0 {
        return Err(Error::Config(format!(
            "stream '{role}' needs a whole-day reporting step, got {}",
            g.step
        )));
    }
    if g.origin.fract() != 0.0 || g.origin < 0.0 {
        return Err(Error::Config(format!(
            "stream '{role}' needs a nonnegative whole-day origin, got {}",
            g.origin
        )));
    }
    for obs in &stream.obs {
        let (_, end) = obs_window(obs, g);
        if end > scenario.horizon_days {
            return Err(Error::Config(format!(
                "stream '{role}' has an observation ending on day {end}, past the horizon {}",
                scenario.horizon_days
            )));
        }
    }
    Ok(())
}

/// Direct evaluation of the four-stream log likelihood, independent of the
/// model graph. Sums, for each observation: negative binomial terms for
/// confirmed cases (mean `N_C`) and GP consultations (mean `N_B + N_G`), and
/// binomial terms for positivity (`N_G / (N_B + N_G)`) and sero-prevalence
/// (`1 - S/N`). Parameter regimes where the dynamics are undefined yield
/// negative infinity rather than an error.
pub fn transmission_loglik(
    scenario: &Scenario,
    params: &TransmissionParams,
    obs_params: &ObservationParams,
    streams: &StreamSet,
) -> Result<f64> {
    if obs_params.p_consultation.len() != scenario.n_consultation_phases() {
        return Err(Error::Config(format!(
            "{} consultation probabilities for {} phases",
            obs_params.p_consultation.len(),
            scenario.n_consultation_phases()
        )));
    }
    if obs_params.dispersion.len() != scenario.n_dispersion_phases() {
        return Err(Error::Config(format!(
            "{} dispersion values for {} phases",
            obs_params.dispersion.len(),
            scenario.n_dispersion_phases()
        )));
    }
    if obs_params.background.n_ages() != scenario.n_ages() {
        return Err(Error::Config(format!(
            "background coefficients cover {} age groups, scenario has {}",
            obs_params.background.n_ages(),
            scenario.n_ages()
        )));
    }
    for stream in [roles::CONFIRMED, roles::GP_CONSULTATIONS, roles::POSITIVITY, roles::SERO]
        .iter()
        .filter_map(|r| streams.maybe(r))
    {
        validate_stream_grid("stream", stream, scenario)?;
    }

    let traj = match scenario.simulate(params) {
        Ok(t) => t,
        Err(Error::ParameterRegime(_)) | Err(Error::StepSize { .. }) => {
            return Ok(f64::NEG_INFINITY)
        }
        Err(e) => return Err(e),
    };
    let n_ages = scenario.n_ages();
    let bg = background_consultations(&obs_params.background, scenario.horizon_days);
    let gp_scales = scenario.consultation_scales(obs_params.p_symptomatic, &obs_params.p_consultation);
    let conf_scale = obs_params.p_symptomatic * obs_params.p_confirmation;

    let mut gp_daily: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut conf_daily: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let daily = |age: usize,
                     cache: &mut BTreeMap<usize, Vec<f64>>,
                     scale_per_step: Option<&[f64]>|
     -> Result<Vec<f64>> {
        if let Some(v) = cache.get(&age) {
            return Ok(v.clone());
        }
        let deltas = traj.new_infections(age);
        let scale = match scale_per_step {
            Some(s) => EndpointScale::PerStep(s),
            None => EndpointScale::Constant(conf_scale),
        };
        let steps = convolve_endpoint(&deltas, &scenario.delay_pmf, scale)?;
        let v = aggregate_flows(&steps, scenario.steps_per_day);
        cache.insert(age, v.clone());
        Ok(v)
    };

    let mut total = 0.0;
    let add = |term: f64, total: &mut f64| -> bool {
        if term == f64::NEG_INFINITY {
            true
        } else {
            *total += term;
            false
        }
    };

    if let Some(stream) = streams.maybe(roles::CONFIRMED) {
        for obs in &stream.obs {
            let series = daily(obs.age_index, &mut conf_daily, None)?;
            let (lo, hi) = obs_window(obs, &stream.grid);
            let mean: f64 = series[lo..hi].iter().sum();
            let eta = obs_params.dispersion[scenario.dispersion_phase(hi)];
            let term = if mean.is_finite() { negbin_logpmf(obs.value as u64, mean, eta)? } else { f64::NEG_INFINITY };
            if add(term, &mut total) {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    if let Some(stream) = streams.maybe(roles::GP_CONSULTATIONS) {
        for obs in &stream.obs {
            let series = daily(obs.age_index, &mut gp_daily, Some(&gp_scales))?;
            let (lo, hi) = obs_window(obs, &stream.grid);
            let mut mean = 0.0;
            for d in lo..hi {
                mean += series[d] + bg[d * n_ages + obs.age_index];
            }
            let eta = obs_params.dispersion[scenario.dispersion_phase(hi)];
            let term = if mean.is_finite() { negbin_logpmf(obs.value as u64, mean, eta)? } else { f64::NEG_INFINITY };
            if add(term, &mut total) {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    if let Some(stream) = streams.maybe(roles::POSITIVITY) {
        for obs in &stream.obs {
            let series = daily(obs.age_index, &mut gp_daily, Some(&gp_scales))?;
            let (lo, hi) = obs_window(obs, &stream.grid);
            let mut pandemic = 0.0;
            let mut background = 0.0;
            for d in lo..hi {
                pandemic += series[d];
                background += bg[d * n_ages + obs.age_index];
            }
            let denom = pandemic + background;
            if !(denom > 0.0) || !denom.is_finite() {
                return Ok(f64::NEG_INFINITY);
            }
            let p = pandemic / denom;
            let n = obs.denominator.expect("positivity streams carry a denominator") as u64;
            if add(binomial_logpmf(obs.value as u64, n, p)?, &mut total) {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    if let Some(stream) = streams.maybe(roles::SERO) {
        for obs in &stream.obs {
            let (_, hi) = obs_window(obs, &stream.grid);
            let step = hi * scenario.steps_per_day;
            let s = traj.states[step].susceptible[obs.age_index];
            let p = 1.0 - s / scenario.populations[obs.age_index];
            let n = obs.denominator.expect("sero streams carry a denominator") as u64;
            if add(binomial_logpmf(obs.value as u64, n, p.clamp(0.0, 1.0))?, &mut total) {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Copy)]
enum Src {
    Node(NodeRef),
    Fixed(f64),
}

impl Src {
    fn get(self, ctx: &EvalCtx) -> Result<f64> {
        match self {
            Src::Node(r) => ctx.param(r),
            Src::Fixed(v) => Ok(v),
        }
    }

    fn dep(self) -> Option<NodeRef> {
        match self {
            Src::Node(r) => Some(r),
            Src::Fixed(_) => None,
        }
    }

    fn value(self, theta: &[f64]) -> Result<f64> {
        match self {
            Src::Fixed(v) => Ok(v),
            Src::Node(NodeRef::Param(i)) => theta
                .get(i)
                .copied()
                .ok_or_else(|| Error::Config(format!("theta is missing parameter index {i}"))),
            Src::Node(NodeRef::Functional(_)) => {
                Err(Error::Config("a parameter source cannot be a functional".into()))
            }
        }
    }
}

fn eta_ref(src: Src) -> Result<EtaRef> {
    match src {
        Src::Fixed(v) => Ok(EtaRef::Fixed(v)),
        Src::Node(NodeRef::Param(i)) => Ok(EtaRef::Param(i)),
        Src::Node(NodeRef::Functional(_)) => {
            Err(Error::Config("dispersion must be a basic parameter or fixed".into()))
        }
    }
}

#[derive(Clone, Copy)]
enum ParamRange {
    Unit,
    NonNegative,
    Positive,
    Real,
}

fn add_param(b: &mut GraphBuilder, name: &str, cfg: &PriorConfig, range: ParamRange) -> Result<Src> {
    if let Some(v) = cfg.fixed_value() {
        let ok = match range {
            ParamRange::Unit => (0.0..=1.0).contains(&v),
            ParamRange::NonNegative => v >= 0.0,
            ParamRange::Positive => v > 0.0,
            ParamRange::Real => true,
        } && v.is_finite();
        if !ok {
            return Err(Error::Config(format!("fixed value {v} for '{name}' is out of range")));
        }
        return Ok(Src::Fixed(v));
    }
    let spec: PriorSpec = cfg.as_spec().expect("not fixed");
    let ok = match range {
        ParamRange::Unit => matches!(spec.support(), Support::Bounded(lo, hi) if lo >= 0.0 && hi <= 1.0),
        ParamRange::NonNegative | ParamRange::Positive => match spec.support() {
            Support::Positive => true,
            Support::Bounded(lo, _) => lo >= 0.0,
            Support::Real => false,
        },
        ParamRange::Real => true,
    };
    if !ok {
        let what = match range {
            ParamRange::Unit => "a probability in [0, 1]",
            ParamRange::NonNegative => "nonnegative",
            ParamRange::Positive => "positive",
            ParamRange::Real => unreachable!(),
        };
        return Err(Error::Config(format!("prior for '{name}' must keep it {what}")));
    }
    Ok(Src::Node(b.param(name, spec)?))
}

struct ParamTable {
    growth_rate: Src,
    initial_infectious: Src,
    infectious_period: Src,
    mixing: Vec<Src>,
    p_symptomatic: Src,
    p_confirmation: Src,
    p_consultation: Vec<Src>,
    dispersion: Vec<Src>,
    bg_intercept: Src,
    bg_age: Vec<Src>,
    bg_time: Vec<Src>,
}

/// A transmission scenario bound to data: the model graph plus the mapping
/// back from parameter vectors to domain types.
pub struct TransmissionModel {
    pub graph: ModelGraph,
    pub scenario: Scenario,
    table: ParamTable,
}

impl TransmissionModel {
    /// Split a parameter vector into the dynamics and observation parameters
    /// it encodes, with fixed entries filled from the configuration.
    pub fn params_from_theta(&self, theta: &[f64]) -> Result<(TransmissionParams, ObservationParams)> {
        if theta.len() != self.graph.dim() {
            return Err(Error::Config(format!(
                "theta has {} entries, the graph has {} parameters",
                theta.len(),
                self.graph.dim()
            )));
        }
        let t = &self.table;
        let params = TransmissionParams {
            growth_rate: t.growth_rate.value(theta)?,
            initial_infectious: t.initial_infectious.value(theta)?,
            infectious_period: t.infectious_period.value(theta)?,
            latent_period: self.scenario.latent_period,
            mixing_multipliers: t.mixing.iter().map(|s| s.value(theta)).collect::<Result<_>>()?,
        };
        let obs = ObservationParams {
            p_symptomatic: t.p_symptomatic.value(theta)?,
            p_confirmation: t.p_confirmation.value(theta)?,
            p_consultation: t.p_consultation.iter().map(|s| s.value(theta)).collect::<Result<_>>()?,
            dispersion: t.dispersion.iter().map(|s| s.value(theta)).collect::<Result<_>>()?,
            background: BackgroundCoeffs {
                intercept: t.bg_intercept.value(theta)?,
                age_effects: t.bg_age.iter().map(|s| s.value(theta)).collect::<Result<_>>()?,
                time_coeffs: t.bg_time.iter().map(|s| s.value(theta)).collect::<Result<_>>()?,
            },
        };
        Ok((params, obs))
    }

    /// Daily model-predicted series for every age group, for export.
    pub fn predicted_series(&self, theta: &[f64]) -> Result<PredictedSeries> {
        let (params, obs) = self.params_from_theta(theta)?;
        predicted_series(&self.scenario, &params, &obs)
    }

    /// Inverse of [`Self::params_from_theta`]: pack domain parameters into a
    /// graph parameter vector. Values that the configuration pins must match
    /// their pinned value.
    pub fn theta_from_params(
        &self,
        params: &TransmissionParams,
        obs: &ObservationParams,
    ) -> Result<Vec<f64>> {
        if (params.latent_period - self.scenario.latent_period).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "latent period {} disagrees with the scenario's {}",
                params.latent_period, self.scenario.latent_period
            )));
        }
        let mut theta = vec![f64::NAN; self.graph.dim()];
        let mut set = |src: Src, v: f64, what: &str| -> Result<()> {
            match src {
                Src::Node(NodeRef::Param(i)) => {
                    theta[i] = v;
                    Ok(())
                }
                Src::Fixed(pinned) if (pinned - v).abs() <= 1e-12 => Ok(()),
                Src::Fixed(pinned) => Err(Error::Config(format!(
                    "{what} = {v} but the configuration pins it at {pinned}"
                ))),
                Src::Node(NodeRef::Functional(_)) => {
                    Err(Error::Config("a parameter source cannot be a functional".into()))
                }
            }
        };
        let t = &self.table;
        let pairs_ok = params.mixing_multipliers.len() == t.mixing.len()
            && obs.p_consultation.len() == t.p_consultation.len()
            && obs.dispersion.len() == t.dispersion.len()
            && obs.background.age_effects.len() == t.bg_age.len()
            && obs.background.time_coeffs.len() == t.bg_time.len();
        if !pairs_ok {
            return Err(Error::Config(
                "per-phase or background parameter counts disagree with the scenario".into(),
            ));
        }
        set(t.growth_rate, params.growth_rate, "growth_rate")?;
        set(t.initial_infectious, params.initial_infectious, "initial_infectious")?;
        set(t.infectious_period, params.infectious_period, "infectious_period")?;
        for (i, (&src, &v)) in t.mixing.iter().zip(&params.mixing_multipliers).enumerate() {
            set(src, v, &format!("mixing[{i}]"))?;
        }
        set(t.p_symptomatic, obs.p_symptomatic, "p_sym")?;
        set(t.p_confirmation, obs.p_confirmation, "p_confirm")?;
        for (i, (&src, &v)) in t.p_consultation.iter().zip(&obs.p_consultation).enumerate() {
            set(src, v, &format!("p_gp[{i}]"))?;
        }
        for (i, (&src, &v)) in t.dispersion.iter().zip(&obs.dispersion).enumerate() {
            set(src, v, &format!("eta[{i}]"))?;
        }
        set(t.bg_intercept, obs.background.intercept, "bg.intercept")?;
        for (i, (&src, &v)) in t.bg_age.iter().zip(&obs.background.age_effects).enumerate() {
            set(src, v, &format!("bg.age[{i}]"))?;
        }
        for (i, (&src, &v)) in t.bg_time.iter().zip(&obs.background.time_coeffs).enumerate() {
            set(src, v, &format!("bg.time[{i}]"))?;
        }
        debug_assert!(theta.iter().all(|v| v.is_finite()), "every slot assigned");
        Ok(theta)
    }
}

/// Build the evidence-synthesis graph for one scenario and its streams.
///
/// The trajectory is computed by a single functional node shared by every
/// stream, so each parameter vector is simulated once per likelihood call.
/// GP consultation and confirmed-case nodes are split by dispersion phase so
/// each piece can carry its own negative binomial size parameter.
pub fn build_transmission_graph(scenario: &Scenario, streams: &StreamSet) -> Result<TransmissionModel> {
    let scen = Arc::new(scenario.clone());
    let n_ages = scen.n_ages();

    if streams.roles().next().is_none() {
        return Err(Error::Config("the transmission model needs at least one data stream".into()));
    }
    for (role, stream) in streams.iter() {
        let kind = roles::kind(role)
            .ok_or_else(|| Error::Config(format!("unknown stream role '{role}'")))?;
        if stream.kind != kind {
            return Err(Error::Config(format!(
                "stream for role '{role}' has kind {:?}, expected {:?}",
                stream.kind, kind
            )));
        }
        validate_stream_grid(role, stream, &scen)?;
        if let Some(m) = stream.max_age_index() {
            if m >= n_ages {
                return Err(Error::Config(format!(
                    "stream '{role}' references age index {m}, but there are {n_ages} age groups"
                )));
            }
        }
    }

    let mut b = GraphBuilder::new();
    let pr = &scen.config.priors;

    let table = ParamTable {
        growth_rate: add_param(&mut b, "growth_rate", &pr.growth_rate, ParamRange::Real)?,
        initial_infectious: add_param(
            &mut b,
            "initial_infectious",
            &pr.initial_infectious,
            ParamRange::Positive,
        )?,
        infectious_period: add_param(
            &mut b,
            "infectious_period",
            &pr.infectious_period,
            ParamRange::Positive,
        )?,
        mixing: scen
            .mixing_priors
            .iter()
            .enumerate()
            .map(|(i, cfg)| add_param(&mut b, &format!("mixing[{i}]"), cfg, ParamRange::NonNegative))
            .collect::<Result<_>>()?,
        p_symptomatic: add_param(&mut b, "p_sym", &pr.p_symptomatic, ParamRange::Unit)?,
        p_confirmation: add_param(&mut b, "p_confirm", &pr.p_confirmation, ParamRange::Unit)?,
        p_consultation: pr
            .p_consultation
            .iter()
            .enumerate()
            .map(|(i, cfg)| add_param(&mut b, &format!("p_gp[{i}]"), cfg, ParamRange::Unit))
            .collect::<Result<_>>()?,
        dispersion: pr
            .dispersion
            .iter()
            .enumerate()
            .map(|(i, cfg)| add_param(&mut b, &format!("eta[{i}]"), cfg, ParamRange::Positive))
            .collect::<Result<_>>()?,
        bg_intercept: add_param(&mut b, "bg.intercept", &scen.config.background.intercept, ParamRange::Real)?,
        bg_age: (1..n_ages)
            .map(|a| {
                add_param(
                    &mut b,
                    &format!("bg.age[{}]", scen.ages.label(a)),
                    &scen.config.background.age_effect,
                    ParamRange::Real,
                )
            })
            .collect::<Result<_>>()?,
        bg_time: (1..=scen.config.background.time_degree)
            .map(|j| {
                add_param(&mut b, &format!("bg.time[{j}]"), &scen.config.background.time_effect, ParamRange::Real)
            })
            .collect::<Result<_>>()?,
    };

    let dyn_deps: Vec<NodeRef> = [table.growth_rate, table.initial_infectious, table.infectious_period]
        .iter()
        .chain(table.mixing.iter())
        .filter_map(|s| s.dep())
        .collect();
    let dynamics_ref = {
        let scen = Arc::clone(&scen);
        let phi = table.growth_rate;
        let i0 = table.initial_infectious;
        let di = table.infectious_period;
        let mixing = table.mixing.clone();
        let eval = move |ctx: &mut EvalCtx| -> Result<Vec<f64>> {
            let params = TransmissionParams {
                growth_rate: phi.get(ctx)?,
                initial_infectious: i0.get(ctx)?,
                infectious_period: di.get(ctx)?,
                latent_period: scen.latent_period,
                mixing_multipliers: mixing.iter().map(|s| s.get(ctx)).collect::<Result<_>>()?,
            };
            Ok(scen.simulate(&params)?.flat())
        };
        if dyn_deps.is_empty() {
            b.constant_functional("dynamics", eval)?
        } else {
            b.functional("dynamics", dyn_deps, eval)?
        }
    };

    let need_gp = streams.maybe(roles::GP_CONSULTATIONS).is_some()
        || streams.maybe(roles::POSITIVITY).is_some();
    let background_ref = if need_gp {
        let deps: Vec<NodeRef> = std::iter::once(table.bg_intercept)
            .chain(table.bg_age.iter().copied())
            .chain(table.bg_time.iter().copied())
            .filter_map(|s| s.dep())
            .collect();
        let scen = Arc::clone(&scen);
        let intercept = table.bg_intercept;
        let age_srcs = table.bg_age.clone();
        let time_srcs = table.bg_time.clone();
        let eval = move |ctx: &mut EvalCtx| -> Result<Vec<f64>> {
            let coeffs = BackgroundCoeffs {
                intercept: intercept.get(ctx)?,
                age_effects: age_srcs.iter().map(|s| s.get(ctx)).collect::<Result<_>>()?,
                time_coeffs: time_srcs.iter().map(|s| s.get(ctx)).collect::<Result<_>>()?,
            };
            Ok(background_consultations(&coeffs, scen.horizon_days))
        };
        Some(if deps.is_empty() {
            b.constant_functional("background", eval)?
        } else {
            b.functional("background", deps, eval)?
        })
    } else {
        None
    };

    // Daily endpoint series per age group, built once and shared between the
    // count stream and the positivity stream of the same age.
    let mut gp_daily: BTreeMap<usize, NodeRef> = BTreeMap::new();
    let mut conf_daily: BTreeMap<usize, NodeRef> = BTreeMap::new();
    let ensure_daily = |b: &mut GraphBuilder,
                            cache: &mut BTreeMap<usize, NodeRef>,
                            age: usize,
                            confirmed: bool|
     -> Result<NodeRef> {
        if let Some(&r) = cache.get(&age) {
            return Ok(r);
        }
        let mut deps = vec![dynamics_ref];
        deps.extend(table.p_symptomatic.dep());
        if confirmed {
            deps.extend(table.p_confirmation.dep());
        } else {
            deps.extend(table.p_consultation.iter().filter_map(|s| s.dep()));
        }
        let scen = Arc::clone(&scen);
        let p_sym = table.p_symptomatic;
        let p_confirm = table.p_confirmation;
        let p_gp = table.p_consultation.clone();
        let name = if confirmed {
            format!("conf_daily[{}]", scen.ages.label(age))
        } else {
            format!("gp_daily[{}]", scen.ages.label(age))
        };
        let eval = move |ctx: &mut EvalCtx| -> Result<Vec<f64>> {
            let flat = ctx.values(dynamics_ref)?;
            let deltas: Vec<f64> =
                (0..=scen.n_steps).map(|k| flat[k * scen.n_ages() + age]).collect();
            let ps = p_sym.get(ctx)?;
            let steps = if confirmed {
                let scale = ps * p_confirm.get(ctx)?;
                convolve_endpoint(&deltas, &scen.delay_pmf, EndpointScale::Constant(scale))?
            } else {
                let pg: Vec<f64> = p_gp.iter().map(|s| s.get(ctx)).collect::<Result<_>>()?;
                let scales = scen.consultation_scales(ps, &pg);
                convolve_endpoint(&deltas, &scen.delay_pmf, EndpointScale::PerStep(&scales))?
            };
            Ok(aggregate_flows(&steps, scen.steps_per_day))
        };
        let r = b.functional(name, deps, eval)?;
        cache.insert(age, r);
        Ok(r)
    };

    // Split a count stream by dispersion phase of each observation's window
    // end, so every piece carries a single size parameter.
    let split_by_dispersion = |stream: &DataStream| -> Result<Vec<(usize, DataStream)>> {
        let mut buckets: BTreeMap<usize, Vec<crate::stream::Observation>> = BTreeMap::new();
        for obs in &stream.obs {
            let (_, hi) = obs_window(obs, &stream.grid);
            buckets.entry(scen.dispersion_phase(hi)).or_default().push(obs.clone());
        }
        buckets
            .into_iter()
            .map(|(phase, obs)| Ok((phase, DataStream::new(stream.kind, stream.grid, obs)?)))
            .collect()
    };

    let ages_in = |stream: &DataStream| -> Vec<usize> {
        let set: BTreeSet<usize> = stream.obs.iter().map(|o| o.age_index).collect();
        set.into_iter().collect()
    };
    let single_phase = scen.n_dispersion_phases() == 1;

    for role in [roles::CONFIRMED, roles::GP_CONSULTATIONS] {
        let Some(stream) = streams.maybe(role) else { continue };
        let confirmed = role == roles::CONFIRMED;
        let (cache, prefix) =
            if confirmed { (&mut conf_daily, "conf") } else { (&mut gp_daily, "gp") };
        for age in ages_in(stream) {
            let sub = stream.filter_age(age);
            let daily_ref = ensure_daily(&mut b, cache, age, confirmed)?;
            for (phase, piece) in split_by_dispersion(&sub)? {
                let label = scen.ages.label(age);
                let suffix =
                    if single_phase { String::new() } else { format!(".e{phase}") };
                let windows: Vec<(usize, usize)> =
                    piece.obs.iter().map(|o| obs_window(o, &piece.grid)).collect();
                let psi_name = format!("psi_{prefix}[{label}]{suffix}");
                let psi_ref = if confirmed {
                    let eval = move |ctx: &mut EvalCtx| -> Result<Vec<f64>> {
                        let series = ctx.values(daily_ref)?;
                        Ok(windows
                            .iter()
                            .map(|&(lo, hi)| series[lo..hi].iter().sum())
                            .collect())
                    };
                    b.functional(psi_name, vec![daily_ref], eval)?
                } else {
                    let bg_ref = background_ref.expect("gp streams imply a background node");
                    let scen = Arc::clone(&scen);
                    let eval = move |ctx: &mut EvalCtx| -> Result<Vec<f64>> {
                        let series = ctx.values(daily_ref)?;
                        let bg = ctx.values(bg_ref)?;
                        Ok(windows
                            .iter()
                            .map(|&(lo, hi)| {
                                (lo..hi)
                                    .map(|d| series[d] + bg[d * scen.n_ages() + age])
                                    .sum()
                            })
                            .collect())
                    };
                    b.functional(psi_name, vec![daily_ref, bg_ref], eval)?
                };
                b.data(
                    format!("{prefix}[{label}]{suffix}"),
                    psi_ref,
                    ObsModel::NegBin { eta: eta_ref(table.dispersion[phase])? },
                    piece,
                )?;
            }
        }
    }

    if let Some(stream) = streams.maybe(roles::POSITIVITY) {
        for age in ages_in(stream) {
            let sub = stream.filter_age(age);
            let daily_ref = ensure_daily(&mut b, &mut gp_daily, age, false)?;
            let bg_ref = background_ref.expect("positivity streams imply a background node");
            let label = scen.ages.label(age).to_string();
            let windows: Vec<(usize, usize)> =
                sub.obs.iter().map(|o| obs_window(o, &sub.grid)).collect();
            let scen_c = Arc::clone(&scen);
            let eval = move |ctx: &mut EvalCtx| -> Result<Vec<f64>> {
                let series = ctx.values(daily_ref)?;
                let bg = ctx.values(bg_ref)?;
                Ok(windows
                    .iter()
                    .map(|&(lo, hi)| {
                        let mut pandemic = 0.0;
                        let mut background = 0.0;
                        for d in lo..hi {
                            pandemic += series[d];
                            background += bg[d * scen_c.n_ages() + age];
                        }
                        let denom = pandemic + background;
                        // No consultations at all leaves the positive share
                        // undefined; the sentinel fails the range check and
                        // makes the observation impossible.
                        if denom > 0.0 && denom.is_finite() {
                            pandemic / denom
                        } else {
                            -1.0
                        }
                    })
                    .collect())
            };
            let psi_ref = b.functional(format!("psi_pos[{label}]"), vec![daily_ref, bg_ref], eval)?;
            b.data(format!("pos[{label}]"), psi_ref, ObsModel::BinomialProb, sub)?;
        }
    }

    if let Some(stream) = streams.maybe(roles::SERO) {
        for age in ages_in(stream) {
            let sub = stream.filter_age(age);
            let label = scen.ages.label(age).to_string();
            let windows: Vec<(usize, usize)> =
                sub.obs.iter().map(|o| obs_window(o, &sub.grid)).collect();
            let scen_c = Arc::clone(&scen);
            let eval = move |ctx: &mut EvalCtx| -> Result<Vec<f64>> {
                let flat = ctx.values(dynamics_ref)?;
                let offset = (scen_c.n_steps + 1) * scen_c.n_ages();
                Ok(windows
                    .iter()
                    .map(|&(_, hi)| {
                        let step = hi * scen_c.steps_per_day;
                        let s = flat[offset + step * scen_c.n_ages() + age];
                        (1.0 - s / scen_c.populations[age]).clamp(0.0, 1.0)
                    })
                    .collect())
            };
            let psi_ref = b.functional(format!("psi_sero[{label}]"), vec![dynamics_ref], eval)?;
            b.data(format!("sero[{label}]"), psi_ref, ObsModel::BinomialProb, sub)?;
        }
    }

    Ok(TransmissionModel { graph: b.build()?, scenario: scenario.clone(), table })
}

/// Daily model-predicted endpoint series for every age group.
#[derive(Debug, Clone, Serialize)]
pub struct PredictedSeries {
    pub ages: Vec<String>,
    /// Calendar days 1..=horizon.
    pub days: Vec<usize>,
    /// Indexed `[age][day - 1]`.
    pub new_infections: Vec<Vec<f64>>,
    pub pandemic_consultations: Vec<Vec<f64>>,
    pub background_consultations: Vec<Vec<f64>>,
    pub confirmed_cases: Vec<Vec<f64>>,
    /// NaN where no consultations are expected at all.
    pub positivity: Vec<Vec<f64>>,
    /// Infected share of the population at the end of each day.
    pub susceptible_depletion: Vec<Vec<f64>>,
}

pub fn predicted_series(
    scenario: &Scenario,
    params: &TransmissionParams,
    obs_params: &ObservationParams,
) -> Result<PredictedSeries> {
    let traj = scenario.simulate(params)?;
    let n_ages = scenario.n_ages();
    let horizon = scenario.horizon_days;
    let bg = background_consultations(&obs_params.background, horizon);
    let gp_scales = scenario.consultation_scales(obs_params.p_symptomatic, &obs_params.p_consultation);
    let conf_scale = obs_params.p_symptomatic * obs_params.p_confirmation;

    let mut out = PredictedSeries {
        ages: (0..n_ages).map(|a| scenario.ages.label(a).to_string()).collect(),
        days: (1..=horizon).collect(),
        new_infections: Vec::with_capacity(n_ages),
        pandemic_consultations: Vec::with_capacity(n_ages),
        background_consultations: Vec::with_capacity(n_ages),
        confirmed_cases: Vec::with_capacity(n_ages),
        positivity: Vec::with_capacity(n_ages),
        susceptible_depletion: Vec::with_capacity(n_ages),
    };
    for a in 0..n_ages {
        let deltas = traj.new_infections(a);
        let infections = aggregate_flows(&deltas, scenario.steps_per_day);
        let gp = aggregate_flows(
            &convolve_endpoint(&deltas, &scenario.delay_pmf, EndpointScale::PerStep(&gp_scales))?,
            scenario.steps_per_day,
        );
        let conf = aggregate_flows(
            &convolve_endpoint(&deltas, &scenario.delay_pmf, EndpointScale::Constant(conf_scale))?,
            scenario.steps_per_day,
        );
        let bg_a: Vec<f64> = (0..horizon).map(|d| bg[d * n_ages + a]).collect();
        let pos: Vec<f64> = (0..horizon)
            .map(|d| {
                let denom = gp[d] + bg_a[d];
                if denom > 0.0 {
                    gp[d] / denom
                } else {
                    f64::NAN
                }
            })
            .collect();
        let depletion: Vec<f64> = (1..=horizon)
            .map(|d| {
                let s = traj.states[d * scenario.steps_per_day].susceptible[a];
                1.0 - s / scenario.populations[a]
            })
            .collect();
        out.new_infections.push(infections);
        out.pandemic_consultations.push(gp);
        out.background_consultations.push(bg_a);
        out.confirmed_cases.push(conf);
        out.positivity.push(pos);
        out.susceptible_depletion.push(depletion);
    }
    Ok(out)
}

impl PredictedSeries {
    /// Long-format CSV: one row per day and age group. Undefined positivity
    /// is written as an empty field.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "day",
            "age",
            "new_infections",
            "pandemic_consultations",
            "background_consultations",
            "confirmed_cases",
            "positivity",
            "susceptible_depletion",
        ])?;
        for (ai, age) in self.ages.iter().enumerate() {
            for (di, day) in self.days.iter().enumerate() {
                let pos = self.positivity[ai][di];
                w.write_record([
                    day.to_string(),
                    age.clone(),
                    self.new_infections[ai][di].to_string(),
                    self.pandemic_consultations[ai][di].to_string(),
                    self.background_consultations[ai][di].to_string(),
                    self.confirmed_cases[ai][di].to_string(),
                    if pos.is_nan() { String::new() } else { pos.to_string() },
                    self.susceptible_depletion[ai][di].to_string(),
                ])?;
            }
        }
        w.flush().map_err(Error::Io)?;
        Ok(())
    }
}

/// Manifest describing a transmission fit: the scenario plus stream files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransmissionManifest {
    pub scenario: ScenarioConfig,
    /// role -> stream file plus its reporting grid
    pub streams: BTreeMap<String, StreamFileEntry>,
}

impl TransmissionManifest {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn build<P: AsRef<Path>>(&self, base: P) -> Result<TransmissionModel> {
        let scenario = Scenario::from_config(self.scenario.clone())?;
        let mut set = StreamSet::default();
        for (role, file) in &self.streams {
            let kind = roles::kind(role)
                .ok_or_else(|| Error::Config(format!("unknown stream role '{role}'")))?;
            let path = base.as_ref().join(&file.path);
            let stream = DataStream::read_csv_path(&path, kind, file.grid.to_grid()?)?;
            set.insert(role, stream)?;
        }
        build_transmission_graph(&scenario, &set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::numeric::local_maxima;
    use crate::stream::{Observation, StreamKind};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_group_matrix(population: f64) -> MixingMatrix {
        MixingMatrix::from_rows(&[vec![1.0]]).unwrap().ngm_normalized(&[population]).unwrap()
    }

    #[test]
    fn r0_is_one_at_zero_growth() {
        assert_relative_eq!(r0_from_growth_rate(0.0, 1.5, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn r0_matches_sir_limit_without_latency() {
        let phi = 0.23;
        assert_relative_eq!(r0_from_growth_rate(phi, 0.0, 2.0).unwrap(), 1.0 + phi * 2.0);
    }

    #[test]
    fn r0_rejects_growth_below_feasibility_bound() {
        assert!(r0_from_growth_rate(-0.6, 1.5, 2.0).is_err());
    }

    #[test]
    fn r0_round_trips_through_characteristic_root() {
        let (d_l, d_i) = (1.5, 2.0);
        for target in [1.2, 1.65, 2.4] {
            // solve (1 + phi d_L)(1 + phi d_I) = target by bisection
            let (mut lo, mut hi) = (-0.4, 5.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if r0_from_growth_rate(mid, d_l, d_i).unwrap() < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let phi = 0.5 * (lo + hi);
            assert_relative_eq!(r0_from_growth_rate(phi, d_l, d_i).unwrap(), target, epsilon = 1e-10);
        }
    }

    #[test]
    fn infection_probability_is_zero_without_infectious() {
        let m = MixingMatrix::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.5]]).unwrap();
        let lambda =
            force_of_infection(&[0.0, 0.0], &m, 1.5, 2.0, 0.5, DtPlacement::PerContact).unwrap();
        assert_eq!(lambda, vec![0.0, 0.0]);
    }

    #[test]
    fn single_infective_gives_the_single_factor() {
        let m = MixingMatrix::from_rows(&[vec![0.002]]).unwrap();
        let (r0, d_i, dt) = (1.5, 2.0, 0.5);
        let lambda = force_of_infection(&[1.0], &m, r0, d_i, dt, DtPlacement::PerContact).unwrap();
        assert_relative_eq!(lambda[0], dt * 0.002 * r0 / d_i, epsilon = 1e-15);
    }

    #[test]
    fn small_argument_expansion_matches_linear_rate() {
        let m = MixingMatrix::from_rows(&[vec![1e-7, 3e-8], vec![2e-8, 8e-8]]).unwrap();
        let inf = [40.0, 25.0];
        let (r0, d_i, dt) = (1.6, 2.0, 0.5);
        let lambda = force_of_infection(&inf, &m, r0, d_i, dt, DtPlacement::PerContact).unwrap();
        for a in 0..2 {
            let linear: f64 = (0..2).map(|b| dt * r0 / d_i * m.get(a, b) * inf[b]).sum();
            assert_relative_eq!(lambda[a], linear, max_relative = 0.01);
        }
    }

    #[test]
    fn log_domain_matches_direct_product() {
        let m = MixingMatrix::from_rows(&[vec![0.01, 0.002], vec![0.003, 0.012]]).unwrap();
        let inf = [17.0, 9.0];
        let (r0, d_i, dt) = (1.4, 1.8, 0.5);
        let lambda = force_of_infection(&inf, &m, r0, d_i, dt, DtPlacement::PerContact).unwrap();
        for a in 0..2 {
            let mut escape = 1.0;
            for b in 0..2 {
                escape *= (1.0 - dt * m.get(a, b) * r0 / d_i).powf(inf[b]);
            }
            assert_relative_eq!(lambda[a], 1.0 - escape, epsilon = 1e-12);
        }
    }

    #[test]
    fn overlarge_contact_rate_is_a_regime_error() {
        let m = MixingMatrix::from_rows(&[vec![3.0]]).unwrap();
        let err = force_of_infection(&[0.0], &m, 1.5, 1.0, 0.5, DtPlacement::PerContact).unwrap_err();
        assert!(matches!(err, Error::ParameterRegime(_)));
    }

    #[test]
    fn on_rate_variant_scales_the_whole_bracket() {
        let m = MixingMatrix::from_rows(&[vec![0.004]]).unwrap();
        let (r0, d_i, dt) = (1.5, 2.0, 0.5);
        let inside = force_of_infection(&[5.0], &m, r0, d_i, dt, DtPlacement::PerContact).unwrap();
        let outside = force_of_infection(&[5.0], &m, r0, d_i, dt, DtPlacement::OnRate).unwrap();
        let escape = (1.0f64 - 0.004 * r0 / d_i).powf(5.0);
        assert_relative_eq!(outside[0], dt * (1.0 - escape), epsilon = 1e-12);
        assert!(inside[0] != outside[0]);
    }

    fn toy_state(n: usize, s: f64, e: f64, i: f64) -> CompartmentState {
        CompartmentState {
            susceptible: vec![s; n],
            exposed: vec![e; n],
            infectious: vec![i; n],
            new_infections: vec![0.0; n],
        }
    }

    #[test]
    fn disease_free_state_is_a_fixed_point() {
        let m = single_group_matrix(1e5);
        let state = toy_state(1, 1e5, 0.0, 0.0);
        let next = step_dynamics(&state, &m, 1.6, 1.5, 2.0, 0.5, DtPlacement::PerContact, 0).unwrap();
        assert_eq!(next.susceptible, state.susceptible);
        assert_eq!(next.exposed, state.exposed);
        assert_eq!(next.infectious, state.infectious);
        assert_eq!(next.new_infections, vec![0.0]);
    }

    #[test]
    fn subcritical_epidemic_dies_out() {
        let n = 1e6;
        let schedule = MixingSchedule::new(single_group_matrix(n), vec![]).unwrap();
        let params = TransmissionParams {
            growth_rate: -0.05,
            initial_infectious: 100.0,
            infectious_period: 2.0,
            latent_period: 1.5,
            mixing_multipliers: vec![1.0],
        };
        assert!(params.r0().unwrap() < 1.0);
        let traj =
            simulate_trajectory(&params, &schedule, &[n], &[1.0], 400, 0.5, DtPlacement::PerContact)
                .unwrap();
        let last = traj.states.last().unwrap();
        assert!(last.infectious[0] < 100.0);
        let cumulative = traj.cumulative_infections_total();
        assert!(cumulative.last().unwrap() < &(0.01 * n));
    }

    #[test]
    fn overlarge_step_reports_step_size_error() {
        let m = single_group_matrix(1e5);
        let state = toy_state(1, 9e4, 5e3, 1e3);
        let err =
            step_dynamics(&state, &m, 1.6, 0.3, 2.0, 0.5, DtPlacement::PerContact, 7).unwrap_err();
        assert!(matches!(err, Error::StepSize { step: 7 }));
    }

    #[test]
    fn mass_is_conserved_across_compartments() {
        let populations = [6e5, 4e5];
        let m = MixingMatrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.8]])
            .unwrap()
            .ngm_normalized(&populations)
            .unwrap();
        let schedule = MixingSchedule::new(m, vec![]).unwrap();
        let params = TransmissionParams {
            growth_rate: 0.15,
            initial_infectious: 50.0,
            infectious_period: 2.0,
            latent_period: 1.5,
            mixing_multipliers: vec![1.0],
        };
        let traj = simulate_trajectory(
            &params,
            &schedule,
            &populations,
            &[0.6, 0.4],
            500,
            0.5,
            DtPlacement::PerContact,
        )
        .unwrap();
        // recovered mass is implicit; accumulate the I -> R flow by hand
        let mut recovered = vec![0.0; 2];
        for (k, pair) in traj.states.windows(2).enumerate() {
            let _ = k;
            for a in 0..2 {
                recovered[a] += 0.5 / params.infectious_period * pair[0].infectious[a];
                let total = pair[1].susceptible[a] + pair[1].exposed[a] + pair[1].infectious[a]
                    + recovered[a];
                assert_relative_eq!(total, populations[a], max_relative = 1e-9);
            }
        }
        // a real epidemic happened
        assert!(traj.attack_rate(&populations) > 0.3);
    }

    #[test]
    fn coarse_step_tracks_fine_grid_at_the_peak() {
        let n = 1e6;
        let params = TransmissionParams {
            growth_rate: 0.18,
            initial_infectious: 20.0,
            infectious_period: 2.0,
            latent_period: 1.5,
            mixing_multipliers: vec![1.0],
        };
        let horizon = 120;
        let daily_peak = |dt: f64| -> f64 {
            let spd = (1.0 / dt).round() as usize;
            let schedule = MixingSchedule::new(single_group_matrix(n), vec![]).unwrap();
            let traj = simulate_trajectory(
                &params,
                &schedule,
                &[n],
                &[1.0],
                horizon * spd,
                dt,
                DtPlacement::PerContact,
            )
            .unwrap();
            aggregate_flows(&traj.new_infections_total(), spd)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let coarse = daily_peak(0.5);
        let fine = daily_peak(0.01);
        assert_relative_eq!(coarse, fine, max_relative = 0.02);
    }

    #[test]
    fn initial_state_has_stationary_ratio_at_zero_growth() {
        let state = initialize_state(100.0, 0.0, 1.5, 2.0, &[1e6], &[1.0]).unwrap();
        assert_relative_eq!(state.exposed[0] / state.infectious[0], 1.5 / 2.0);
    }

    #[test]
    fn initial_infectious_mass_follows_weights() {
        let state =
            initialize_state(100.0, 0.1, 1.5, 2.0, &[5e5, 5e5, 5e5], &[0.5, 0.3, 0.2]).unwrap();
        assert_relative_eq!(state.infectious[0], 50.0);
        assert_relative_eq!(state.infectious[1], 30.0);
        assert_relative_eq!(state.infectious[2], 20.0);
        let total: f64 = state.infectious.iter().sum();
        assert_relative_eq!(total, 100.0);
    }

    #[test]
    fn infeasible_initial_mass_is_a_regime_error() {
        let err = initialize_state(2e3, 0.1, 1.5, 2.0, &[1e3, 1e6], &[0.9, 0.1]).unwrap_err();
        assert!(matches!(err, Error::ParameterRegime(_)));
    }

    #[test]
    fn initialized_trajectory_grows_at_the_requested_rate() {
        let n = 1e9;
        let phi = 0.12;
        let dt = 0.5;
        let schedule = MixingSchedule::new(single_group_matrix(n), vec![]).unwrap();
        let params = TransmissionParams {
            growth_rate: phi,
            initial_infectious: 1000.0,
            infectious_period: 2.0,
            latent_period: 1.5,
            mixing_multipliers: vec![1.0],
        };
        let traj =
            simulate_trajectory(&params, &schedule, &[n], &[1.0], 12, dt, DtPlacement::PerContact)
                .unwrap();
        let deltas = traj.new_infections_total();
        for k in 2..10 {
            let ratio = deltas[k + 1] / deltas[k];
            assert_relative_eq!(ratio, (phi * dt).exp(), max_relative = 0.03);
        }
    }

    #[test]
    fn normalization_gives_unit_next_generation_radius() {
        let populations = [3e5, 5e5, 2e5];
        let m = MixingMatrix::from_rows(&[
            vec![2.0, 0.5, 0.2],
            vec![0.5, 1.5, 0.4],
            vec![0.2, 0.4, 1.0],
        ])
        .unwrap()
        .ngm_normalized(&populations)
        .unwrap();
        let mut ngm = vec![0.0; 9];
        for a in 0..3 {
            for b in 0..3 {
                ngm[a * 3 + b] = populations[a] * m.get(a, b);
            }
        }
        assert_relative_eq!(spectral_radius(&ngm, 3), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn delay_pmf_is_a_distribution_with_the_right_mean() {
        let cfg = DelayConfig { incubation_shape: 2.0, incubation_scale: 0.8, consultation_mean: 1.5 };
        let dt = 0.5;
        let pmf = discretized_delay_pmf(&cfg, dt).unwrap();
        assert_eq!(pmf.len(), DELAY_SUPPORT);
        assert!(pmf.iter().all(|&p| p >= 0.0));
        assert_relative_eq!(pmf.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let mean_days: f64 = pmf.iter().enumerate().map(|(j, p)| j as f64 * dt * p).sum();
        let true_mean = 2.0 * 0.8 + 1.5;
        assert!((mean_days - true_mean).abs() < 2.0 * dt, "mean {mean_days} vs {true_mean}");
    }

    #[test]
    fn point_mass_kernel_is_the_identity() {
        let series = [0.0, 3.0, 7.0, 2.0];
        let mut pmf = vec![0.0; 4];
        pmf[0] = 1.0;
        let out = convolve_endpoint(&series, &pmf, EndpointScale::Constant(1.0)).unwrap();
        assert_eq!(out, series.to_vec());
    }

    #[test]
    fn pulse_spreads_uniformly_over_the_support() {
        let mut series = vec![0.0; 8];
        series[0] = 100.0;
        let pmf = vec![0.25; 4];
        let out = convolve_endpoint(&series, &pmf, EndpointScale::Constant(0.5)).unwrap();
        assert_eq!(&out[..4], &[12.5, 12.5, 12.5, 12.5]);
        assert_eq!(&out[4..], &[0.0; 4]);
    }

    #[test]
    fn convolution_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let series: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..50.0)).collect();
        let raw: Vec<f64> = (0..DELAY_SUPPORT).map(|_| rng.random_range(0.0..1.0)).collect();
        let pmf = normalized(raw).unwrap();
        let scales: Vec<f64> = (0..200).map(|_| rng.random_range(0.1..0.9)).collect();
        let fast = convolve_endpoint(&series, &pmf, EndpointScale::PerStep(&scales)).unwrap();
        for v in 0..series.len() {
            let mut acc = 0.0;
            for k in 0..=v {
                let lag = v - k;
                if lag < pmf.len() {
                    acc += series[k] * pmf[lag];
                }
            }
            assert_relative_eq!(fast[v], scales[v] * acc, epsilon = 1e-10);
        }
    }

    #[test]
    fn long_kernel_is_truncated_and_renormalized() {
        let series = [0.0, 10.0, 0.0];
        let pmf = vec![0.25; 4];
        let out = convolve_endpoint(&series, &pmf, EndpointScale::Constant(1.0)).unwrap();
        // truncated to 3 lags of mass 0.25 each, renormalized to 1/3 each
        assert_relative_eq!(out[1], 10.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(out[2], 10.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn flows_aggregate_by_summation() {
        let series = [99.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(aggregate_flows(&series, 2), vec![3.0, 7.0]);
        assert_eq!(aggregate_flows(&series, 5), vec![15.0]);
    }

    #[test]
    fn background_age_effects_multiply_the_reference_level() {
        let coeffs = BackgroundCoeffs {
            intercept: 2.0,
            age_effects: vec![0.5, -0.3],
            time_coeffs: vec![0.2, -0.1],
        };
        let bg = background_consultations(&coeffs, 10);
        assert_eq!(bg.len(), 30);
        for d in 0..10 {
            assert_relative_eq!(bg[d * 3 + 1] / bg[d * 3], 0.5f64.exp(), epsilon = 1e-12);
            assert_relative_eq!(bg[d * 3 + 2] / bg[d * 3], (-0.3f64).exp(), epsilon = 1e-12);
        }
        assert!(bg.iter().all(|&x| x > 0.0));
    }

    fn toy_config() -> ScenarioConfig {
        ScenarioConfig {
            ages: vec!["<15".into(), "15+".into()],
            populations: vec![3e5, 7e5],
            delta_t: 0.5,
            horizon_days: 35,
            latent_period: 1.5,
            contact_matrix: vec![vec![2.0, 0.6], vec![0.6, 1.1]],
            mixing_change_days: vec![],
            dt_placement: DtPlacement::PerContact,
            equilibrium_weights: None,
            delay: DelayConfig::default(),
            consultation_change_days: vec![15],
            dispersion_change_days: vec![],
            priors: TransmissionPriors {
                growth_rate: PriorConfig::Normal { mean: 0.15, sd: 0.05 },
                initial_infectious: PriorConfig::LogNormal { mu: 4.0, sigma: 1.0 },
                infectious_period: PriorConfig::Uniform { lo: 1.0, hi: 4.0 },
                mixing: vec![],
                p_symptomatic: PriorConfig::Beta { alpha: 4.0, beta: 4.0 },
                p_confirmation: PriorConfig::Beta { alpha: 2.0, beta: 6.0 },
                p_consultation: vec![
                    PriorConfig::Beta { alpha: 2.0, beta: 8.0 },
                    PriorConfig::Beta { alpha: 2.0, beta: 8.0 },
                ],
                dispersion: vec![PriorConfig::LogNormal { mu: 2.0, sigma: 1.0 }],
            },
            background: BackgroundConfig { time_degree: 2, ..BackgroundConfig::default() },
        }
    }

    fn daily_grid(len: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, len).unwrap()
    }

    fn count_obs(t: usize, a: usize, y: f64) -> Observation {
        Observation { time_index: t, age_index: a, value: y, denominator: None, day: 0.0 }
    }

    fn binom_obs(t: usize, a: usize, y: f64, n: f64) -> Observation {
        Observation { time_index: t, age_index: a, value: y, denominator: Some(n), day: 0.0 }
    }

    fn toy_streams() -> StreamSet {
        let mut set = StreamSet::default();
        set.insert(
            roles::CONFIRMED,
            DataStream::new(
                StreamKind::ConfirmedCases,
                daily_grid(10),
                vec![count_obs(4, 0, 3.0), count_obs(5, 0, 6.0), count_obs(5, 1, 9.0)],
            )
            .unwrap(),
        )
        .unwrap();
        set.insert(
            roles::GP_CONSULTATIONS,
            DataStream::new(
                StreamKind::GpConsultations,
                TimeGrid::new(0.0, 7.0, 5).unwrap(),
                vec![
                    count_obs(1, 0, 140.0),
                    count_obs(2, 0, 220.0),
                    count_obs(3, 0, 500.0),
                    count_obs(1, 1, 260.0),
                    count_obs(2, 1, 390.0),
                    count_obs(3, 1, 700.0),
                ],
            )
            .unwrap(),
        )
        .unwrap();
        set.insert(
            roles::POSITIVITY,
            DataStream::new(
                StreamKind::ViroPositivity,
                TimeGrid::new(0.0, 7.0, 5).unwrap(),
                vec![
                    binom_obs(2, 0, 8.0, 40.0),
                    binom_obs(3, 0, 21.0, 45.0),
                    binom_obs(2, 1, 5.0, 30.0),
                    binom_obs(3, 1, 17.0, 50.0),
                ],
            )
            .unwrap(),
        )
        .unwrap();
        set.insert(
            roles::SERO,
            DataStream::new(
                StreamKind::SeroPrevalence,
                daily_grid(35),
                vec![binom_obs(13, 0, 4.0, 200.0), binom_obs(27, 1, 19.0, 300.0)],
            )
            .unwrap(),
        )
        .unwrap();
        set
    }

    fn toy_theta(model: &TransmissionModel) -> Vec<f64> {
        let names = model.graph.param_names();
        names
            .iter()
            .map(|n| match n.as_str() {
                "growth_rate" => 0.16,
                "initial_infectious" => 60.0,
                "infectious_period" => 2.2,
                "p_sym" => 0.5,
                "p_confirm" => 0.25,
                "bg.intercept" => 3.4,
                s if s.starts_with("p_gp") => 0.12,
                s if s.starts_with("eta") => 9.0,
                s if s.starts_with("bg.age") => 0.3,
                s if s.starts_with("bg.time") => -0.15,
                s if s.starts_with("mixing") => 1.0,
                other => panic!("unexpected parameter {other}"),
            })
            .collect()
    }

    #[test]
    fn graph_factorizes_like_the_direct_evaluation() {
        let scenario = Scenario::from_config(toy_config()).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let theta = toy_theta(&model);
        let (params, obs_params) = model.params_from_theta(&theta).unwrap();
        let direct = transmission_loglik(&scenario, &params, &obs_params, &streams).unwrap();
        let via_graph = model.graph.log_likelihood_product(&theta).unwrap();
        assert!(direct.is_finite(), "direct log likelihood should be finite, got {direct}");
        assert_relative_eq!(via_graph, direct, max_relative = 1e-9);

        let by_node = model.graph.log_likelihood_by_node(&theta).unwrap();
        assert_relative_eq!(by_node.iter().sum::<f64>(), direct, max_relative = 1e-9);
        assert!(by_node.len() >= 4);
    }

    #[test]
    fn invalid_regime_rejects_instead_of_erroring() {
        let scenario = Scenario::from_config(toy_config()).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let mut theta = toy_theta(&model);
        let idx = model.graph.param_index("infectious_period").unwrap();
        theta[idx] = 1.05e-3;
        let lp = model.graph.log_posterior(&theta).unwrap();
        assert_eq!(lp, f64::NEG_INFINITY);
    }

    #[test]
    fn missing_consultations_make_positivity_impossible() {
        let scenario = Scenario::from_config(toy_config()).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let mut theta = toy_theta(&model);
        // no symptomatics means no pandemic consultations, and the background
        // intercept far below floor underflows to zero consultations
        theta[model.graph.param_index("p_sym").unwrap()] = 0.0;
        theta[model.graph.param_index("bg.intercept").unwrap()] = -800.0;
        let (params, obs_params) = model.params_from_theta(&theta).unwrap();
        let direct = transmission_loglik(&scenario, &params, &obs_params, &streams).unwrap();
        assert_eq!(direct, f64::NEG_INFINITY);
        let via_graph = model.graph.log_likelihood_product(&theta).unwrap();
        assert_eq!(via_graph, f64::NEG_INFINITY);
    }

    #[test]
    fn positivity_is_invariant_to_joint_rescaling() {
        let scenario = Scenario::from_config(toy_config()).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let theta = toy_theta(&model);
        let base = model.graph.functional_values(&theta, "psi_pos[<15]").unwrap();

        // double the pandemic consultations via p_sym and the background via
        // its intercept; the positive share must not move
        let mut scaled = theta.clone();
        scaled[model.graph.param_index("p_sym").unwrap()] = 1.0;
        scaled[model.graph.param_index("bg.intercept").unwrap()] += 2.0f64.ln();
        let shifted = model.graph.functional_values(&scaled, "psi_pos[<15]").unwrap();
        for (a, b) in base.iter().zip(&shifted) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn untouched_population_rejects_positive_sero_counts() {
        let mut config = toy_config();
        config.populations = vec![1e9, 1e9];
        let scenario = Scenario::from_config(config).unwrap();
        let mut streams = StreamSet::default();
        streams
            .insert(
                roles::SERO,
                DataStream::new(
                    StreamKind::SeroPrevalence,
                    daily_grid(35),
                    vec![binom_obs(0, 0, 1.0, 100.0)],
                )
                .unwrap(),
            )
            .unwrap();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let mut theta = toy_theta(&model);
        // an infectious mass this small cannot deplete a billion susceptibles
        // within a day, so 1 - S/N underflows to exactly zero
        theta[model.graph.param_index("initial_infectious").unwrap()] = 1e-9;
        theta[model.graph.param_index("growth_rate").unwrap()] = 0.0;
        let ll = model.graph.log_likelihood_product(&theta).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn mixing_step_change_produces_two_waves() {
        let n = 1e6;
        let baseline = single_group_matrix(n);
        let spd = 2;
        let schedule = MixingSchedule::new(
            baseline,
            vec![(40 - 1) * spd, (60 - 1) * spd],
        )
        .unwrap();
        let params = TransmissionParams {
            growth_rate: 0.196,
            initial_infectious: 20.0,
            infectious_period: 2.0,
            latent_period: 1.5,
            mixing_multipliers: vec![1.0, 0.25, 1.0],
        };
        let traj = simulate_trajectory(
            &params,
            &schedule,
            &[n],
            &[1.0],
            200 * spd,
            0.5,
            DtPlacement::PerContact,
        )
        .unwrap();
        let daily = aggregate_flows(&traj.new_infections_total(), spd);
        let peak = daily.iter().fold(0.0f64, |m, &x| m.max(x));
        let maxima = local_maxima(&daily, 0.05 * peak);
        assert!(maxima.len() >= 2, "expected two waves, found peaks at {maxima:?}");
    }

    #[test]
    fn final_size_grows_with_the_reproduction_number() {
        let n = 1e6;
        let schedule = MixingSchedule::new(single_group_matrix(n), vec![]).unwrap();
        let mut last = 0.0;
        for phi in [0.05, 0.1, 0.15, 0.2] {
            let params = TransmissionParams {
                growth_rate: phi,
                initial_infectious: 50.0,
                infectious_period: 2.0,
                latent_period: 1.5,
                mixing_multipliers: vec![1.0],
            };
            let traj = simulate_trajectory(
                &params,
                &schedule,
                &[n],
                &[1.0],
                600,
                0.5,
                DtPlacement::PerContact,
            )
            .unwrap();
            let attack = traj.attack_rate(&[n]);
            assert!(attack > last, "attack rate {attack} did not grow past {last}");
            last = attack;
        }
    }

    #[test]
    fn concurrent_evaluations_agree_with_serial() {
        use rayon::prelude::*;
        let scenario = Scenario::from_config(toy_config()).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let base = toy_theta(&model);
        let idx = model.graph.param_index("growth_rate").unwrap();
        let thetas: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let mut t = base.clone();
                t[idx] = 0.1 + 0.01 * i as f64;
                t
            })
            .collect();
        let serial: Vec<f64> =
            thetas.iter().map(|t| model.graph.log_posterior(t).unwrap()).collect();
        let parallel: Vec<f64> =
            thetas.par_iter().map(|t| model.graph.log_posterior(t).unwrap()).collect();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn fixed_parameters_drop_out_of_the_graph() {
        let mut config = toy_config();
        config.priors.p_confirmation = PriorConfig::Fixed { value: 0.25 };
        config.priors.dispersion = vec![PriorConfig::Fixed { value: 9.0 }];
        let scenario = Scenario::from_config(config).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        assert!(model.graph.param_index("p_confirm").is_none());
        assert!(model.graph.param_index("eta[0]").is_none());

        let full = build_transmission_graph(&Scenario::from_config(toy_config()).unwrap(), &streams)
            .unwrap();
        assert_eq!(model.graph.dim() + 2, full.graph.dim());

        // the same parameter values give the same likelihood either way
        let theta_full = toy_theta(&full);
        let theta_reduced: Vec<f64> = full
            .graph
            .param_names()
            .iter()
            .zip(&theta_full)
            .filter(|(n, _)| n.as_str() != "p_confirm" && n.as_str() != "eta[0]")
            .map(|(_, &v)| v)
            .collect();
        let ll_full = full.graph.log_likelihood_product(&theta_full).unwrap();
        let ll_reduced = model.graph.log_likelihood_product(&theta_reduced).unwrap();
        assert_relative_eq!(ll_full, ll_reduced, max_relative = 1e-12);
    }

    #[test]
    fn dispersion_phases_split_count_nodes() {
        let mut config = toy_config();
        config.dispersion_change_days = vec![20];
        config.priors.dispersion = vec![
            PriorConfig::LogNormal { mu: 2.0, sigma: 1.0 },
            PriorConfig::LogNormal { mu: 2.0, sigma: 1.0 },
        ];
        let scenario = Scenario::from_config(config).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let names: Vec<String> =
            model.graph.data_nodes().iter().map(|d| d.name.clone()).collect();
        assert!(names.iter().any(|n| n.ends_with(".e0")));
        assert!(names.iter().any(|n| n.ends_with(".e1")));
        assert!(model.graph.param_index("eta[1]").is_some());
    }

    #[test]
    fn scenario_config_round_trips_through_json() {
        let config = toy_config();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        let a = Scenario::from_config(config).unwrap();
        let b = Scenario::from_config(back).unwrap();
        assert_eq!(a.n_steps, b.n_steps);
        assert_eq!(a.delay_pmf, b.delay_pmf);
        assert_eq!(a.placement, b.placement);
    }

    #[test]
    fn scenario_rejects_misshapen_configs() {
        let mut bad_dt = toy_config();
        bad_dt.delta_t = 0.3;
        assert!(Scenario::from_config(bad_dt).is_err());

        let mut bad_days = toy_config();
        bad_days.consultation_change_days = vec![50];
        assert!(Scenario::from_config(bad_days).is_err());

        let mut bad_matrix = toy_config();
        bad_matrix.contact_matrix = vec![vec![1.0]];
        assert!(Scenario::from_config(bad_matrix).is_err());

        let mut bad_priors = toy_config();
        bad_priors.priors.p_symptomatic = PriorConfig::Normal { mean: 0.5, sd: 1.0 };
        let scenario = Scenario::from_config(bad_priors).unwrap();
        assert!(build_transmission_graph(&scenario, &toy_streams()).is_err());
    }

    #[test]
    fn predicted_series_exports_cleanly() {
        let scenario = Scenario::from_config(toy_config()).unwrap();
        let streams = toy_streams();
        let model = build_transmission_graph(&scenario, &streams).unwrap();
        let theta = toy_theta(&model);
        let series = model.predicted_series(&theta).unwrap();
        assert_eq!(series.days.len(), 35);
        assert_eq!(series.new_infections.len(), 2);
        assert!(series.positivity[0].iter().all(|p| p.is_nan() || (0.0..=1.0).contains(p)));

        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 35);
        assert!(text.starts_with("day,age,"));
    }

    #[test]
    fn manifest_builds_the_same_model_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let streams = toy_streams();
        let mut entries = BTreeMap::new();
        for (role, stream) in streams.iter() {
            let file = format!("{role}.csv");
            stream.write_csv_path(dir.path().join(&file)).unwrap();
            entries.insert(
                role.to_string(),
                StreamFileEntry {
                    path: file,
                    grid: crate::stream::GridEntry {
                        origin: stream.grid.origin,
                        step: stream.grid.step,
                        len: stream.grid.len,
                    },
                },
            );
        }
        let manifest = TransmissionManifest { scenario: toy_config(), streams: entries };
        let text = serde_json::to_string(&manifest).unwrap();
        let manifest: TransmissionManifest = serde_json::from_str(&text).unwrap();
        let model = manifest.build(dir.path()).unwrap();

        let direct = build_transmission_graph(
            &Scenario::from_config(toy_config()).unwrap(),
            &toy_streams(),
        )
        .unwrap();
        assert_eq!(model.graph.dim(), direct.graph.dim());
        let theta = toy_theta(&direct);
        assert_relative_eq!(
            model.graph.log_posterior(&theta).unwrap(),
            direct.graph.log_posterior(&theta).unwrap(),
            epsilon = 1e-12
        );
    }
}
