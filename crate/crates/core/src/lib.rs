//! Linear-quadratic McKean-Vlasov control: backward system, optimal feedback
//! law and particle Monte Carlo verification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod cli;
pub mod error;
pub mod feedback;
pub mod io;
pub mod linalg;
pub mod mckv_sim;
pub mod resource_case;
pub mod model;
pub mod riccati;

pub use error::{LqError, Result};
