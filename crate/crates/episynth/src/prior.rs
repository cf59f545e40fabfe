//! Prior specifications for basic parameters, their supports, and the
//! unconstrained transforms samplers work on.

use crate::error::{Error, Result};
use crate::kernels::normal_logpdf;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Prior families supported by the graph. The two centered variants implement
/// hierarchical shrinkage toward another basic parameter (wave-3 probabilities
/// centered on wave-2 values on the logit scale, random-walk rates centered on
/// the previous day's rate on the log scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSpec {
    Uniform { lo: f64, hi: f64 },
    Beta { alpha: f64, beta: f64 },
    Normal { mean: f64, sd: f64 },
    LogNormal { mu: f64, sigma: f64 },
    LogitNormalCentered { center: usize, sd: f64 },
    LogNormalCentered { center: usize, sd: f64 },
}

/// Support of a parameter, which fixes its unconstrained transform:
/// bounded intervals map through a scaled logit, positive parameters through
/// log, and real parameters through the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Bounded(f64, f64),
    Positive,
    Real,
}

impl Support {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Support::Bounded(lo, hi) => x > lo && x < hi,
            Support::Positive => x > 0.0,
            Support::Real => x.is_finite(),
        }
    }

    /// Natural value -> unconstrained coordinate.
    pub fn to_unconstrained(&self, x: f64) -> f64 {
        match *self {
            Support::Bounded(lo, hi) => logit((x - lo) / (hi - lo)),
            Support::Positive => x.ln(),
            Support::Real => x,
        }
    }

    /// Unconstrained coordinate -> natural value.
    pub fn from_unconstrained(&self, z: f64) -> f64 {
        match *self {
            Support::Bounded(lo, hi) => lo + (hi - lo) * inv_logit(z),
            Support::Positive => z.exp(),
            Support::Real => z,
        }
    }

    /// log |d theta / d z|, the term added to the target density when
    /// sampling on the unconstrained scale.
    pub fn log_jacobian(&self, z: f64) -> f64 {
        match *self {
            Support::Bounded(lo, hi) => {
                let s = inv_logit(z);
                (hi - lo).ln() + s.ln() + (1.0 - s).ln()
            }
            Support::Positive => z,
            Support::Real => 0.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorSpec::Uniform { lo, hi } => hi > lo && lo.is_finite() && hi.is_finite(),
            PriorSpec::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
            PriorSpec::Normal { sd, .. } => sd > 0.0,
            PriorSpec::LogNormal { sigma, .. } => sigma > 0.0,
            PriorSpec::LogitNormalCentered { sd, .. } => sd > 0.0,
            PriorSpec::LogNormalCentered { sd, .. } => sd > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior hyperparameters: {self:?}")))
        }
    }

    pub fn support(&self) -> Support {
        match *self {
            PriorSpec::Uniform { lo, hi } => Support::Bounded(lo, hi),
            PriorSpec::Beta { .. } | PriorSpec::LogitNormalCentered { .. } => Support::Bounded(0.0, 1.0),
            PriorSpec::Normal { .. } => Support::Real,
            PriorSpec::LogNormal { .. } | PriorSpec::LogNormalCentered { .. } => Support::Positive,
        }
    }

    /// Index of the parameter this prior is centered on, if hierarchical.
    pub fn center(&self) -> Option<usize> {
        match *self {
            PriorSpec::LogitNormalCentered { center, .. }
            | PriorSpec::LogNormalCentered { center, .. } => Some(center),
            _ => None,
        }
    }

    /// Log density at `x` in natural coordinates. `theta` supplies the values
    /// of other parameters for the centered families.
    pub fn log_density(&self, x: f64, theta: &[f64]) -> f64 {
        if !self.support().contains(x) {
            return f64::NEG_INFINITY;
        }
        match *self {
            PriorSpec::Uniform { lo, hi } => -(hi - lo).ln(),
            PriorSpec::Beta { alpha, beta } => {
                ln_gamma(alpha + beta) - ln_gamma(alpha) - ln_gamma(beta)
                    + (alpha - 1.0) * x.ln()
                    + (beta - 1.0) * (1.0 - x).ln()
            }
            PriorSpec::Normal { mean, sd } => normal_logpdf(x, mean, sd).unwrap(),
            PriorSpec::LogNormal { mu, sigma } => normal_logpdf(x.ln(), mu, sigma).unwrap() - x.ln(),
            PriorSpec::LogitNormalCentered { center, sd } => {
                let c = theta[center];
                normal_logpdf(logit(x), logit(c), sd).unwrap() - x.ln() - (1.0 - x).ln()
            }
            PriorSpec::LogNormalCentered { center, sd } => {
                let c = theta[center];
                normal_logpdf(x.ln(), c.ln(), sd).unwrap() - x.ln()
            }
        }
    }

    /// Draw a value; `theta` supplies already-sampled centers.
    pub fn sample<R: Rng>(&self, theta: &[f64], rng: &mut R) -> f64 {
        match *self {
            PriorSpec::Uniform { lo, hi } => rng.random_range(lo..hi),
            PriorSpec::Beta { alpha, beta } => {
                let d = rand_distr::Beta::new(alpha, beta).expect("validated");
                rng.sample(d)
            }
            PriorSpec::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(rand_distr::StandardNormal),
            PriorSpec::LogNormal { mu, sigma } => {
                (mu + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp()
            }
            PriorSpec::LogitNormalCentered { center, sd } => {
                let z = logit(theta[center]) + sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
                inv_logit(z)
            }
            PriorSpec::LogNormalCentered { center, sd } => {
                (theta[center].ln() + sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp()
            }
        }
    }
}

/// Serde-facing prior description used in manifests. `Fixed` pins a value
/// instead of adding a sampled parameter; the centered families are wired by
/// the graph builders, not by manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorConfig {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Beta { alpha: f64, beta: f64 },
    Normal { mean: f64, sd: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl PriorConfig {
    pub fn as_spec(&self) -> Option<PriorSpec> {
        match *self {
            PriorConfig::Fixed { .. } => None,
            PriorConfig::Uniform { lo, hi } => Some(PriorSpec::Uniform { lo, hi }),
            PriorConfig::Beta { alpha, beta } => Some(PriorSpec::Beta { alpha, beta }),
            PriorConfig::Normal { mean, sd } => Some(PriorSpec::Normal { mean, sd }),
            PriorConfig::LogNormal { mu, sigma } => Some(PriorSpec::LogNormal { mu, sigma }),
        }
    }

    pub fn fixed_value(&self) -> Option<f64> {
        match *self {
            PriorConfig::Fixed { value } => Some(value),
            _ => None,
        }
    }
}
