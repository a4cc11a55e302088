//! Numerical laboratory for the steady logistic-diffusive equation
//! `μΔθ + θ(m − θ) = 0` on `(0,1)^d` with Neumann boundary conditions.

pub mod banded;
pub mod criterion;
pub mod error;
pub mod fragmentation;
pub mod grid;
pub mod io;
pub mod optimizer;
pub mod sensitivity;
pub mod spectral;
pub mod state;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Field, Grid};
pub use state::{PopulationState, ResourceDistribution, SolverConfig};
