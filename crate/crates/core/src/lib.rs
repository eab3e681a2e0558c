//! Nonparametric empirical Bayes priors computed as the stable fixed point of
//! the posterior belief operator, with certificates, identification
//! diagnostics and the supporting discrete and continuous models.

pub mod discrimination;
pub mod error;
pub mod identification;
pub mod mixture;
pub mod models;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
pub use mixture::{
    bayes_update, discrepancy, kl_divergence, log_likelihood, log_likelihood_normalized,
    mixture_marginal, normalize_counts, posterior_matrix, CountVector, DensityKind, DensityMatrix,
    FrequencyVector, PosteriorMatrix, Prior, TypeLabel,
};
pub use solver::{
    prune_support, solve_fixed_point, verify_stability, SolveConfig, SolveResult,
    StabilityCertificate,
};
