//! Optimal execution under an unknown, learned price-impact model.
//!
//! The trader's state mixes inventory, transient impact components and
//! return-predicting factors. Given the impact coefficients, the optimal policy
//! is linear and comes from an average-cost Riccati equation.
//! When the coefficients are unknown they are estimated by constrained ridge
//! regression, and the policies in [`policy`] differ in when and how the
//! estimate is trusted.

pub mod error;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod policy;
pub mod qp;
pub mod riccati;
pub mod sim;

pub use error::{Error, Result};
pub use model::{MarketState, ModelParams, SystemMatrices, ThetaDomain};
