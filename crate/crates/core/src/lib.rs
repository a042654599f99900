//! Conditional mixture models for mixed-type data with missing values and
//! fixed covariates: a locally truncated Dirichlet process mixture whose
//! components live in covariate space, with Gibbs sampling, multiple
//! imputation, posterior queries and a data-fusion study harness.

pub mod cli;
pub mod data;
pub mod dist;
pub mod fusion;
pub mod gower;
pub mod infosel;
pub mod model;
pub mod query;
pub mod rng;
pub mod sampler;
