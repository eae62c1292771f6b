//! Simulation laboratory for moderately interacting particle systems on the
//! torus `[-1/2, 1/2)^d` and their limiting nonlinear Fokker–Planck equations.
//!
//! Two particle systems are provided, both driven by `√2` Brownian motions:
//!
//! * a non-local adhesion model with drift `b ∗ g(μⁿ ∗ wⁿ)`;
//! * a local model with drift `−∇wⁿ ∗ u′(μⁿ ∗ wⁿ)`;
//!
//! together with finite-volume reference solvers for the limiting PDEs,
//! entropy/energy diagnostics, and a study harness that measures how the
//! mollified empirical density approaches the PDE solution.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod harness;
pub mod kernel;
pub mod measures;
pub mod models;
pub mod parallel;
pub mod pde;
pub mod record;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod torus;

pub use error::{Error, Result};
pub use grid::DensityField;
pub use kernel::KernelSpec;
pub use measures::{MollifyMethod, ParticleConfig};
pub use torus::TorusPoint;
