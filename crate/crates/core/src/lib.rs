//! Local unstable invariant manifolds of the stochastic parabolic equation
//! `du/dt + Lu - u^p = σ u ∘ dW` on `(0, π)`, computed by the
//! Lyapunov–Perron fixed point of the conjugated random equation, together
//! with the approximation ladder, the closed-form leading shape
//! `(L_s - pL_u)^{-1} P_s(ξ^p)` and Monte Carlo studies of the error bounds.

// Negated float comparisons are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod manifold;
pub mod nonlinear;
pub mod quadrature;
pub mod spectral;
pub mod stochastic;

pub use error::{Error, Result};
pub use spectral::{Block, GridField, SpectralModel, SpectralVector};
pub use stochastic::{OuTrajectory, TailConstants, TailParams, WienerPath};
