//! Gibbs-measure formulation of single-stage stochastic optimal control, with
//! MPPI and interacting-particle controllers and their error analysis.

pub mod error;
pub mod error_analysis;
pub mod experiment;
pub mod gibbs;
pub mod ips;
pub mod linalg;
pub mod mppi;
pub mod quadrature;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use error_analysis::{AlgoConfig, Algorithm, MseReport, ScalingFit, ScalingModel};
pub use experiment::{OutputFormat, SweepConfig, SweepRecord, X0Mode};
pub use gibbs::SocpInstance;
pub use linalg::{Ensemble, GaussianSpec, SpdMatrix, StateVector};
pub use rng::RngStream;
