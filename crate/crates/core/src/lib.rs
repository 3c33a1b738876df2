//! Estimation of population and subject-specific parameters in mixed-effect
//! ODE models by solving per-subject optimal-control tracking problems.
//!
//! The pipeline is: a pseudo-linear model factorization ([`model`]), a
//! per-subject discretization mesh ([`grid`]), a discrete linear-quadratic
//! tracking solver ([`lq`]) wrapped in a pseudo-linear fixed-point iteration
//! for nonlinear dynamics ([`sdre`]), random-effect estimation by simplex
//! search over the inner criterion ([`inner`]), population estimation with
//! the measurement variance profiled out in closed form ([`population`]),
//! sandwich covariance and diagnostics ([`uncertainty`]), penalty selection
//! by forward cross-validation ([`cv`]), and a simulation / Monte-Carlo
//! harness ([`sim`]).

pub mod cv;
pub mod error;
pub mod grid;
pub mod inner;
pub mod lq;
pub mod model;
pub mod ode;
pub mod optim;
pub mod population;
pub mod sdre;
pub mod sim;
pub mod uncertainty;

pub use error::{Error, Result};
