//! Semi-geostrophic flow with variable Coriolis parameter on the flat torus,
//! solved by a Lagrangian Monge–Ampère time stepping scheme.

pub mod config;
pub mod coriolis;
pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod implicit_map;
pub mod io;
pub mod linalg;
pub mod ma_step;
pub mod map;
pub mod oracle;
pub mod stepper;
#[cfg(test)]
pub(crate) mod testutil;

pub use config::{parse_and_validate, RunConfig, Tolerances};
pub use coriolis::{CoriolisContext, TrigPoly};
pub use error::{Result, SgError};
pub use field::{GridSpec, MatrixField, PeriodicField, VectorField};
pub use ma_step::{ma_solve, MAStepParams, Model};
pub use map::PeriodicMap;
pub use stepper::{run, StepState, Stepper, Trajectory};
