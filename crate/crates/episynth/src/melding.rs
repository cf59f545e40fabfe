//! Markov melding: join submodels that share a scalar link parameter.
//!
//! Each submodel carries its own joint density over (φ, ψ_m) with its data
//! absorbed, together with an estimate of its prior marginal for φ. The
//! marginals are replaced by one pooled prior, and the joint models are
//! combined by dividing each submodel's marginal back out:
//!
//! ```text
//! p_meld(φ, ψ_1..ψ_M) = p_pool(φ) · Π_m p_m(φ, ψ_m, Y_m) / p_m(φ)
//! ```
//!
//! Marginals with no closed form are estimated by Gaussian kernel density
//! over prior simulations; integer-valued link parameters are embedded on the
//! log scale first.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{run_chain, ChainConfig, Posterior, PosteriorSample};
use crate::numeric::{self, log_sum_exp, simpson};
use crate::prior::Support;

/// A univariate density for the link parameter, evaluable in log space.
///
/// `support` bounds the region carrying essentially all mass; pooling,
/// normalization, and the melded sampler stay inside it.
pub trait Density: Send + Sync {
    fn log_density(&self, phi: f64) -> f64;
    fn support(&self) -> (f64, f64);
}

/// Closed-form normal marginal.
#[derive(Debug, Clone)]
pub struct NormalDensity {
    pub mean: f64,
    pub sd: f64,
}

impl NormalDensity {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
            return Err(Error::Domain(format!(
                "normal density needs finite mean and positive sd, got ({mean}, {sd})"
            )));
        }
        Ok(Self { mean, sd })
    }
}

impl Density for NormalDensity {
    fn log_density(&self, phi: f64) -> f64 {
        let z = (phi - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    fn support(&self) -> (f64, f64) {
        (self.mean - 12.0 * self.sd, self.mean + 12.0 * self.sd)
    }
}

const KDE_GRID_POINTS: usize = 2048;

/// Gaussian kernel density estimate with Silverman's bandwidth.
///
/// Evaluation interpolates log density on a precomputed grid spanning the
/// sample range plus five bandwidths, falling back to the exact kernel sum
/// outside it. Counts are embedded on the log scale, so the estimate lives on
/// (0, ∞) with the Jacobian folded in.
#[derive(Clone)]
pub struct KdeDensity {
    samples: Arc<Vec<f64>>,
    bandwidth: f64,
    log_scale: bool,
    grid_lo: f64,
    grid_step: f64,
    grid_logp: Vec<f64>,
}

impl fmt::Debug for KdeDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KdeDensity")
            .field("n", &self.samples.len())
            .field("bandwidth", &self.bandwidth)
            .field("log_scale", &self.log_scale)
            .finish()
    }
}

fn silverman_bandwidth(xs: &[f64]) -> Result<f64> {
    let sd = numeric::sd(xs);
    let iqr = numeric::quantile(xs, 0.75) - numeric::quantile(xs, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (xs.len() as f64).powf(-0.2);
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain(
            "kernel density estimate needs samples with positive spread".into(),
        ));
    }
    Ok(h)
}

impl KdeDensity {
    /// Estimate from samples on the natural scale.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.len() < 10 {
            return Err(Error::Config(format!(
                "kernel density estimate needs at least 10 samples, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite value in density samples".into()));
        }
        let bandwidth = silverman_bandwidth(samples)?;
        Ok(Self::build(samples.to_vec(), bandwidth, false))
    }

    /// Estimate for positive, typically integer-valued quantities: the
    /// samples are moved to the log scale and the returned density is for the
    /// original variable.
    pub fn from_counts(samples: &[f64]) -> Result<Self> {
        if samples.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::Domain(
                "log-scale embedding needs strictly positive samples".into(),
            ));
        }
        let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
        if logs.len() < 10 {
            return Err(Error::Config(format!(
                "kernel density estimate needs at least 10 samples, got {}",
                logs.len()
            )));
        }
        let bandwidth = silverman_bandwidth(&logs)?;
        Ok(Self::build(logs, bandwidth, true))
    }

    fn build(samples: Vec<f64>, bandwidth: f64, log_scale: bool) -> Self {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 5.0 * bandwidth;
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 5.0 * bandwidth;
        let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
        let mut kde = Self {
            samples: Arc::new(samples),
            bandwidth,
            log_scale,
            grid_lo: lo,
            grid_step: step,
            grid_logp: Vec::new(),
        };
        kde.grid_logp = (0..KDE_GRID_POINTS)
            .map(|i| kde.exact_log_density_internal(lo + step * i as f64))
            .collect();
        kde
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Log density on the internal scale, by the full kernel sum.
    fn exact_log_density_internal(&self, z: f64) -> f64 {
        let h = self.bandwidth;
        let terms: Vec<f64> = self
            .samples
            .iter()
            .map(|x| {
                let u = (z - x) / h;
                -0.5 * u * u
            })
            .collect();
        log_sum_exp(&terms) - (self.samples.len() as f64 * h).ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    fn interpolated(&self, z: f64) -> f64 {
        let last = self.grid_logp.len() - 1;
        let t = (z - self.grid_lo) / self.grid_step;
        if t < 0.0 || t > last as f64 {
            return self.exact_log_density_internal(z);
        }
        let i = (t.floor() as usize).min(last - 1);
        let frac = t - i as f64;
        self.grid_logp[i] * (1.0 - frac) + self.grid_logp[i + 1] * frac
    }
}

impl Density for KdeDensity {
    fn log_density(&self, phi: f64) -> f64 {
        if self.log_scale {
            if !(phi > 0.0) {
                return f64::NEG_INFINITY;
            }
            self.interpolated(phi.ln()) - phi.ln()
        } else {
            self.interpolated(phi)
        }
    }

    fn support(&self) -> (f64, f64) {
        let lo = self.grid_lo;
        let hi = self.grid_lo + self.grid_step * (self.grid_logp.len() - 1) as f64;
        if self.log_scale {
            (lo.exp(), hi.exp())
        } else {
            (lo, hi)
        }
    }
}

/// How prior marginals for the link parameter are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingRule {
    /// Weighted mixture Σ w_m p_m.
    Linear,
    /// Weighted geometric mean Π p_m^{w_m}, renormalized.
    Logarithmic,
    /// Adopt one marginal unchanged.
    Dictatorial(usize),
}

/// Pooled prior for the link parameter, normalized over the common support.
#[derive(Clone)]
pub struct PooledPrior {
    rule: PoolingRule,
    weights: Vec<f64>,
    components: Vec<Arc<dyn Density>>,
    log_z: f64,
    support: (f64, f64),
    cdf_grid: Arc<Vec<(f64, f64)>>,
}

impl fmt::Debug for PooledPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PooledPrior")
            .field("rule", &self.rule)
            .field("weights", &self.weights)
            .field("support", &self.support)
            .field("log_z", &self.log_z)
            .finish()
    }
}

const POOL_PANELS: usize = 8192;
const CDF_POINTS: usize = 4096;

/// Combine marginal density estimates under a pooling rule.
///
/// Weights must be non-negative and sum to one for the linear and logarithmic
/// rules; the dictatorial rule ignores them. Logarithmic pooling requires the
/// component supports to overlap and errors out when the pooled density
/// vanishes everywhere on the overlap.
pub fn pool_marginals(
    marginals: Vec<Arc<dyn Density>>,
    rule: PoolingRule,
    weights: &[f64],
) -> Result<PooledPrior> {
    if marginals.is_empty() {
        return Err(Error::Config("pooling needs at least one marginal".into()));
    }
    match rule {
        PoolingRule::Dictatorial(index) => {
            if index >= marginals.len() {
                return Err(Error::Config(format!(
                    "dictatorial pooling selects marginal {index} of {}",
                    marginals.len()
                )));
            }
        }
        _ => {
            if weights.len() != marginals.len() {
                return Err(Error::Config(format!(
                    "{} weights for {} marginals",
                    weights.len(),
                    marginals.len()
                )));
            }
            if weights.iter().any(|w| *w < 0.0) {
                return Err(Error::Config("pooling weights must be non-negative".into()));
            }
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "pooling weights sum to {total}, expected 1"
                )));
            }
        }
    }

    let support = match rule {
        PoolingRule::Dictatorial(index) => marginals[index].support(),
        PoolingRule::Linear => marginals.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), m| {
                let (l, h) = m.support();
                (lo.min(l), hi.max(h))
            },
        ),
        PoolingRule::Logarithmic => {
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for m in &marginals {
                let (l, h) = m.support();
                lo = lo.max(l);
                hi = hi.min(h);
            }
            if !(hi > lo) {
                return Err(Error::Config(
                    "logarithmic pooling over marginals with no common support".into(),
                ));
            }
            (lo, hi)
        }
    };

    let mut pooled = PooledPrior {
        rule,
        weights: weights.to_vec(),
        components: marginals,
        log_z: 0.0,
        support,
        cdf_grid: Arc::new(Vec::new()),
    };

    if rule == PoolingRule::Logarithmic {
        let z = simpson(
            |phi| pooled.unnormalized_log_density(phi).exp(),
            support.0,
            support.1,
            POOL_PANELS,
        );
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Config(
                "pooled density vanishes on the common support; marginals share no mass".into(),
            ));
        }
        pooled.log_z = z.ln();
    }

    let mut grid = Vec::with_capacity(CDF_POINTS);
    let step = (support.1 - support.0) / (CDF_POINTS - 1) as f64;
    let mut cum = 0.0;
    let mut prev = pooled.log_density(support.0).exp();
    grid.push((support.0, 0.0));
    for i in 1..CDF_POINTS {
        let x = support.0 + step * i as f64;
        let cur = pooled.log_density(x).exp();
        cum += 0.5 * (prev + cur) * step;
        grid.push((x, cum));
        prev = cur;
    }
    let total = grid.last().expect("nonempty grid").1;
    if total > 0.0 {
        for point in grid.iter_mut() {
            point.1 /= total;
        }
    }
    pooled.cdf_grid = Arc::new(grid);
    Ok(pooled)
}

impl PooledPrior {
    fn unnormalized_log_density(&self, phi: f64) -> f64 {
        match self.rule {
            PoolingRule::Dictatorial(index) => self.components[index].log_density(phi),
            PoolingRule::Linear => {
                let terms: Vec<f64> = self
                    .components
                    .iter()
                    .zip(&self.weights)
                    .map(|(m, w)| {
                        if *w == 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            w.ln() + m.log_density(phi)
                        }
                    })
                    .collect();
                log_sum_exp(&terms)
            }
            PoolingRule::Logarithmic => self
                .components
                .iter()
                .zip(&self.weights)
                .map(|(m, w)| w * m.log_density(phi))
                .sum(),
        }
    }

    pub fn rule(&self) -> PoolingRule {
        self.rule
    }

    /// Draw from the pooled prior by inverting the tabulated CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let grid = &self.cdf_grid;
        let pos = grid.partition_point(|(_, c)| *c < u);
        if pos == 0 {
            return grid[0].0;
        }
        if pos >= grid.len() {
            return grid[grid.len() - 1].0;
        }
        let (x0, c0) = grid[pos - 1];
        let (x1, c1) = grid[pos];
        if c1 > c0 {
            x0 + (x1 - x0) * (u - c0) / (c1 - c0)
        } else {
            x0
        }
    }

    /// (φ, density) pairs on an even grid, for export and plotting.
    pub fn density_table(&self, points: usize) -> Vec<(f64, f64)> {
        let n = points.max(2);
        let step = (self.support.1 - self.support.0) / (n - 1) as f64;
        (0..n)
            .map(|i| {
                let x = self.support.0 + step * i as f64;
                (x, self.log_density(x).exp())
            })
            .collect()
    }
}

impl Density for PooledPrior {
    fn log_density(&self, phi: f64) -> f64 {
        self.unnormalized_log_density(phi) - self.log_z
    }

    fn support(&self) -> (f64, f64) {
        self.support
    }
}

/// Mean and standard deviation of a density by quadrature over its support.
pub fn density_moments(density: &dyn Density, panels: usize) -> (f64, f64) {
    let (lo, hi) = density.support();
    let m0 = simpson(|x| density.log_density(x).exp(), lo, hi, panels);
    let m1 = simpson(|x| x * density.log_density(x).exp(), lo, hi, panels);
    let m2 = simpson(|x| x * x * density.log_density(x).exp(), lo, hi, panels);
    let mean = m1 / m0;
    (mean, (m2 / m0 - mean * mean).max(0.0).sqrt())
}

/// One evidence source sharing the link parameter φ.
///
/// `log_joint` is the submodel's full joint log density with its data
/// absorbed: log p_m(φ, ψ_m, Y_m). The marginal is the submodel's own prior
/// for φ, which melding divides back out.
pub trait Submodel: Send + Sync {
    fn marginal(&self) -> Arc<dyn Density>;

    fn log_joint(&self, phi: f64, psi: &[f64]) -> Result<f64>;

    /// Prior draw of (φ, ψ_m), used to seed chains and to cross-check the
    /// declared marginal.
    fn sample_prior(&self, rng: &mut dyn RngCore) -> Result<(f64, Vec<f64>)>;

    fn psi_dim(&self) -> usize {
        0
    }

    fn psi_supports(&self) -> Vec<Support> {
        Vec::new()
    }

    fn psi_names(&self) -> Vec<String> {
        (0..self.psi_dim()).map(|i| format!("psi[{i}]")).collect()
    }
}

/// Melded log density at a point laid out as (φ, ψ_1.., ψ_2.., ...).
///
/// Points where any submodel marginal carries no mass are impossible rather
/// than errors.
pub fn meld_density(
    submodels: &[Arc<dyn Submodel>],
    pooled: &PooledPrior,
    theta: &[f64],
) -> Result<f64> {
    let expected: usize = 1 + submodels.iter().map(|s| s.psi_dim()).sum::<usize>();
    if theta.len() != expected {
        return Err(Error::Config(format!(
            "melded point has {} coordinates, model expects {expected}",
            theta.len()
        )));
    }
    let phi = theta[0];
    let pool = pooled.log_density(phi);
    if pool == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total = pool;
    let mut offset = 1;
    for sub in submodels {
        let psi = &theta[offset..offset + sub.psi_dim()];
        offset += sub.psi_dim();
        let marginal = sub.marginal().log_density(phi);
        if marginal == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let joint = sub.log_joint(phi, psi)?;
        if joint == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        total += joint - marginal;
    }
    Ok(total)
}

/// Submodels joined through a pooled prior, ready for sampling.
pub struct MeldedModel {
    submodels: Vec<Arc<dyn Submodel>>,
    pooled: PooledPrior,
}

impl fmt::Debug for MeldedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeldedModel")
            .field("submodels", &self.submodels.len())
            .field("pooled", &self.pooled)
            .finish()
    }
}

impl MeldedModel {
    pub fn new(submodels: Vec<Arc<dyn Submodel>>, pooled: PooledPrior) -> Result<Self> {
        if submodels.is_empty() {
            return Err(Error::Config("melding needs at least one submodel".into()));
        }
        for (m, sub) in submodels.iter().enumerate() {
            if sub.psi_supports().len() != sub.psi_dim() {
                return Err(Error::Config(format!(
                    "submodel {m} declares {} parameters but {} supports",
                    sub.psi_dim(),
                    sub.psi_supports().len()
                )));
            }
        }
        Ok(Self { submodels, pooled })
    }

    /// Build after checking each declared marginal against prior simulations
    /// of its own submodel.
    pub fn checked(
        submodels: Vec<Arc<dyn Submodel>>,
        pooled: PooledPrior,
        sims: usize,
        seed: u64,
    ) -> Result<Self> {
        let sims = sims.max(1000);
        for (m, sub) in submodels.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            let draws: Result<Vec<f64>> = (0..sims)
                .map(|_| sub.sample_prior(&mut rng).map(|(phi, _)| phi))
                .collect();
            let draws = draws?;
            let emp_mean = numeric::mean(&draws);
            let emp_sd = numeric::sd(&draws);
            let (dec_mean, dec_sd) = density_moments(sub.marginal().as_ref(), 4096);
            let se = emp_sd / (sims as f64).sqrt();
            if (emp_mean - dec_mean).abs() > 8.0 * se + 0.02 * emp_sd {
                return Err(Error::Config(format!(
                    "submodel {m} marginal disagrees with its prior simulations: \
                     declared mean {dec_mean:.4}, simulated {emp_mean:.4}"
                )));
            }
            if (emp_sd - dec_sd).abs() > 8.0 * emp_sd / (2.0 * sims as f64).sqrt() + 0.05 * emp_sd
            {
                return Err(Error::Config(format!(
                    "submodel {m} marginal disagrees with its prior simulations: \
                     declared sd {dec_sd:.4}, simulated {emp_sd:.4}"
                )));
            }
        }
        Self::new(submodels, pooled)
    }

    pub fn pooled(&self) -> &PooledPrior {
        &self.pooled
    }
}

impl Posterior for MeldedModel {
    fn dim(&self) -> usize {
        1 + self.submodels.iter().map(|s| s.psi_dim()).sum::<usize>()
    }

    fn supports(&self) -> Vec<Support> {
        let (lo, hi) = self.pooled.support();
        let mut out = vec![Support::Bounded(lo, hi)];
        for sub in &self.submodels {
            out.extend(sub.psi_supports());
        }
        out
    }

    fn log_density(&self, theta: &[f64]) -> Result<f64> {
        meld_density(&self.submodels, &self.pooled, theta)
    }

    fn initial_draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut theta = vec![self.pooled.sample(rng)];
        for sub in &self.submodels {
            if sub.psi_dim() == 0 {
                continue;
            }
            let (_, psi) = sub.sample_prior(rng)?;
            if psi.len() != sub.psi_dim() {
                return Err(Error::Config(format!(
                    "submodel prior drew {} parameters, declared {}",
                    psi.len(),
                    sub.psi_dim()
                )));
            }
            theta.extend(psi);
        }
        Ok(theta)
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["phi".to_string()];
        for (m, sub) in self.submodels.iter().enumerate() {
            for name in sub.psi_names() {
                names.push(format!("m{}.{name}", m + 1));
            }
        }
        names
    }
}

/// Sample the melded posterior.
pub fn meld_posterior(model: &MeldedModel, config: &ChainConfig) -> Result<PosteriorSample> {
    run_chain(model, config)
}
