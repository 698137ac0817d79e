//! Posterior sampling: pCN over the prior coefficients, conjugate noise
//! variance updates, and chain diagnostics.

mod chain;
mod dip;
mod summary;

pub use chain::{
    acceptance_probability, gibbs_sigma2, pcn_step, run_chain, run_chain_with, ChainRecord, ChainState, ChainStats,
    CurvePotential, NullPotential, Potential, SamplerConfig,
};
pub use dip::{dip_statistic, dip_test, DipTest};
pub use summary::{chain_summary, effective_sample_size, quantile, ChainSummary, FieldSummary, Histogram, Marginal};
