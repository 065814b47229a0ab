//! Finite-difference solver and verification tools for the parabolic complex
//! Monge-Ampère flow `u_t = log det(u_{a b-bar}) + f(t, z, u)` on strictly
//! pseudoconvex domains.

pub mod barriers;
pub mod calculus;
pub mod error;
pub mod estimates;
pub mod flow;
pub mod geometry;
pub mod harness;
pub mod hermitian;
pub mod initial_data;
pub mod linsolve;
pub mod oracle;

pub use error::{Error, Result};
