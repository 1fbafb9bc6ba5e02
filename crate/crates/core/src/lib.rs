//! Fréchet-class convex risk measures under multi-prior model uncertainty.
//!
//! A set of weighted priors is summarized by its barycenter; the risk of a
//! position `−X = Φ₀(Z)` is the worst expected loss over models, penalized
//! by their distance from that barycenter. Wasserstein distances give the
//! quantile and location-scatter solvers, Kullback-Leibler divergence gives
//! the entropic one.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod barycenter;
pub mod entropic;
pub mod error;
pub mod io;
pub mod isotonic;
pub mod models;
pub mod premia;
pub mod report;
pub mod risk1d;
pub mod risk_ls;
pub mod spd;

pub use error::{Error, Result};
pub use models::{
    quantile_expectation, validate_prior_set, ls_expectation, ls_expectation_mc, AnyPriorSet, CentralLaw,
    CustomMapping, DensityGrid, Estimate, GridDensityModel, LocationScatterModel, ModelKind, PriorSet,
    QuantileGrid, QuantileModel, RiskMapping, ValidationReport, Violation, WeightVector,
};
pub use report::{Diagnostics, Maximizer, Method, RiskReport};
pub use spd::SpdMatrix;
