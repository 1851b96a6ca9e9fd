//! Causal disentanglement with a block-diagonal variational posterior, an
//! additive-noise structural causal model over latent concept blocks,
//! per-concept autoregressive flow priors on the exogenous noise, and
//! directional counterfactual interventions.

pub mod cli;
pub mod error;
pub mod flowprior;
pub mod intervene;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod posterior;
pub mod scm;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
