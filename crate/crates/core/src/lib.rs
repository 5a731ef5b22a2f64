//! Bathymetry inversion from surface velocities, and fast neural surrogates
//! of the steady shallow-water flow model.

pub mod bathy;
pub mod container;
pub mod error;
pub mod fieldio;
pub mod fields;
pub mod nn;
pub mod pcga;
pub mod pipeline;
pub mod rng;
pub mod surrogates;
pub mod swe;

pub use error::{Error, Result};
pub use fields::{make_grid, rmse_velocity, BoundaryCondition, Grid, ScalarField, VectorField};
