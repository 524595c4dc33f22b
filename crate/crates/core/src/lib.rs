//! Stochastic flows of reversible, positive-recurrent diffusions.
//!
//! The crate simulates the flow `X_t(x)` of `dX = σ db + m(X) dt` with one
//! Brownian path shared by every initial point, propagates log-Jacobian
//! determinants, and measures the u-volume `∫_{X_t(A)} u` of the image of a
//! compact box union `A`. Around that core sit the elliptic operators of the
//! diffusion, recurrence/transience integral tests, Lyapunov-rate estimators
//! and an exact Ornstein–Uhlenbeck reference.

pub mod classify;
pub mod error;
pub mod expr;
pub mod field;
pub mod flow;
pub mod lyapunov;
pub mod model;
pub mod modelfile;
pub mod operators;
pub mod ou;
pub mod quad;
pub mod sampling;
pub mod stats;
pub mod table;
pub mod volume;

pub use error::{Error, Result};
pub use field::{DerivativeMode, FdStep, GaussianExp, ScalarField};
pub use model::{DiffusionModel, FlowDirection, SpdMatrix};
