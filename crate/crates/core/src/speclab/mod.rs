//! Specialization measurements on trained or untrained branched models.

mod equilibrium;
mod factor;
mod hessian;
mod response;

pub use equilibrium::{equilibrium_diagnostic, EquilibriumRecord, EquilibriumReport};
pub use factor::{branch_jacobian, cross_block_from_factors, factorize_gradient, FactorizedGradient};
pub use hessian::{
    default_step, fd_hessian, hessian, HessianReport, MAX_HESSIAN_PARAMS,
};
pub use response::{
    active_branches, centered_covariance, correlation, covariance, response_matrix, ActiveSplit,
    ResponseMatrix, DEFAULT_ACTIVE_FRACTION,
};
