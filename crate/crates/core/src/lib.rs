//! Tracing S-matrix poles of the radial Schrödinger equation as a potential
//! strength varies, by pseudo-arclength continuation of a regularized
//! Jost-like function.

pub mod continuation;
pub mod potentials;
pub mod solver;
pub mod specfun;
pub mod tracer;

pub use potentials::{PotentialError, RadialPotential};
pub use solver::{EndpointSolution, RadialGrid, RadialProblem, ScatteringAmplitudes, SolverError};
pub use specfun::ComplexValue;
