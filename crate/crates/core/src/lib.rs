//! Feasibility projections for polynomial optimization, specialized to AC
//! optimal power flow.
//!
//! An infeasible instance is first projected onto the set of feasible inputs
//! by minimizing a norm of bound slacks, then re-optimized under the resulting
//! slack budget, and the re-optimized point is finally projected onto the
//! feasible set by Newton refinement whose convergence is certified with
//! Smale's α-test.

pub mod case_io;
pub mod certify;
pub mod error;
pub mod network;
pub mod nlp;
pub mod pipeline;
pub mod pop;
pub mod quadratic;
pub mod relaxation;
pub mod sdp;

pub use error::{Error, Result};
