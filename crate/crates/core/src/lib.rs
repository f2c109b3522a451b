//! Variational Bayes for sparse factor analysis and multi-study factor analysis.
//!
//! Both models put a multiplicative gamma process shrinkage prior on the
//! loadings and are fit either by coordinate ascent ([`fa_cavi`],
//! [`msfa_cavi`]) or by stochastic natural-gradient steps on minibatches
//! ([`fa_svi`], [`msfa_svi`]).

pub mod crossval;
pub mod error;
pub mod fa_cavi;
pub mod fa_svi;
pub mod init;
pub mod io;
pub mod json;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod msfa_cavi;
pub mod msfa_svi;
pub mod rng;
pub mod shrinkage;
pub mod simulate;
