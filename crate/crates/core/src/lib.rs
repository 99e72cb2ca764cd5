//! Directed polymers in random environment on `Z^d`: environment streams,
//! lattice sweeps, partition functions, fluctuation fields and Monte Carlo
//! experiments.

pub mod env;
pub mod fields;
pub mod harness;
pub mod error;
pub mod lattice;
pub mod numeric;
pub mod polymer;

pub use env::{lambda_cgf, EnvKey, EnvSpec, Family};
pub use error::{Error, Result};
pub use lattice::{BoxField, Region, SpaceTimePoint};
pub use polymer::{PathConstraint, PolymerSystem, SiteMask, TimeInterval, Window};
pub use fields::{TestFunction, TestKind, WindowParams};
pub use harness::{run, ExperimentConfig, ExperimentKind};
