//! Discrete-time mean-field (McKean-Vlasov) stochastic control.
//!
//! * [`model`]: registered drift / diffusion / cost families and their regularity audit.
//! * [`measure`]: empirical and quantized measures, exact W1, quantization.
//! * [`em`]: Euler-Maruyama particle schemes with counter-based noise.
//! * [`policy`]: policies and Monte Carlo cost evaluation.
//! * [`finite_mdp`]: the quantized finite model and its dynamic-programming solvers.
//! * [`harness`]: convergence and near-optimality experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod error;
pub mod finite_mdp;
pub mod harness;
pub mod measure;
pub mod model;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, the precision used in every CSV artifact.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // keep the sign-free zero stable across platforms
        return "0.0000000000000000e0".to_string();
    }
    format!("{v:.16e}")
}
