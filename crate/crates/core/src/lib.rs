//! Bayesian registration of closed planar curves.
//!
//! A template curve is deformed along geodesics of a diffeomorphism group
//! generated by an initial normal momentum `p0`, while a scalar generator
//! `nu` reparameterises the curve. Given noisy point observations of a target
//! curve, the posterior over `(p0, nu)` is explored with a function-space
//! pCN sampler, initialised by BFGS on the regularised misfit using exact
//! discrete adjoint gradients.

pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod observation;
pub mod optimize;
pub mod prior;
pub mod reparam;
pub mod scenarios;
pub mod shooting;

pub use error::{Error, Result};
