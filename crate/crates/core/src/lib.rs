//! Learning optimal-transport ambiguity sets for distributionally robust
//! optimization by hypergradient descent through a differentiable conic layer.
//!
//! Numerical modules are generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what the experiments use.

pub mod cones;
pub mod conic_diff;
pub mod conic_solver;
pub mod coverage;
pub mod dro_problems;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod repro;
pub mod scalar;
pub mod transport_lp;
pub mod trainer;
pub mod transport_metrics;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ConicProblem = conic_solver::ConicProblemData<f64>;
pub type Solution = conic_solver::PrimalDualSolution<f64>;
pub type Settings = conic_solver::SolverSettings<f64>;
pub type Dataset = dro_problems::DatasetView<f64>;
pub type Instance = dro_problems::ProblemInstance<f64>;
pub type Param = transport_metrics::TransportParam<f64>;
pub type Moments = transport_metrics::GaussianMoments<f64>;
pub type Discrete = transport_metrics::DiscreteDistribution<f64>;
pub type Trace = trainer::TrainTrace<f64>;
