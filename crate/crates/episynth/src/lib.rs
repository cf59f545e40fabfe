//! Bayesian evidence synthesis for epidemic severity and transmission.
//!
//! Models are directed acyclic graphs of basic parameters, deterministic
//! functional parameters, and data nodes ([`graph`]). Fitting is by adaptive
//! random-walk MCMC ([`mcmc`]) or sequential Monte Carlo over data batches
//! ([`smc`]). Prebuilt graphs cover severity pyramids observed through
//! detection processes ([`severity`]) and an age-structured transmission model
//! fed by surveillance streams ([`transmission`]). The [`melding`],
//! [`conflict`], and [`regression`] modules handle joining submodels at shared
//! quantities, quantifying evidence conflict at a node, and turning raw
//! surveillance counts into the summary inputs the synthesis consumes.

pub mod age;
pub mod conflict;
pub mod error;
pub mod graph;
pub mod grid;
pub mod kernels;
pub mod numeric;
pub mod mcmc;
pub mod melding;
pub mod prior;
pub mod regression;
pub mod report;
pub mod severity;
pub mod simulate;
pub mod smc;
pub mod stream;
pub mod transmission;

pub use error::{Error, Result};
