//! Class-conditional information bottleneck workbench.
//!
//! Stochastic Gaussian encoders are trained on
//! `H(Y|T)`-bound + `β′ · E KL(q(T|x) ‖ r(T|y))`, where `r(T|y)` is a
//! per-class spherical Gaussian. The same class-conditional surrogate
//! doubles as a naive Bayes decoder. Exact discrete checks of the
//! underlying information identities live in [`discrete_oracle`], and the
//! pairwise mixture bounds on `I(X;T)` / `I(X;T|Y)` in [`estimators`].

pub mod data_io;
pub mod diffcore;
pub mod discrete_oracle;
pub mod error;
pub mod estimators;
pub mod gaussians;
pub mod model;
pub mod objectives;

pub use error::{Error, Result};
