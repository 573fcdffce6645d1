//! Quantum-control landscape analysis and homotopy tracking on U(N).
//!
//! The crate simulates closed-system quantum dynamics under a discretized
//! control field and implements four families of control-optimization
//! algorithms on top of that substrate:
//!
//! - local gradient flow of an observable objective on the field domain
//!   ([`landscape`]),
//! - D-MORPH unitary-matrix tracking along geodesics in U(N) ([`dmorph`]),
//! - orthogonal-observable expectation-value tracking ([`obstrack`]),
//! - maximum-likelihood state reconstruction from simulated measurements
//!   ([`estimation`]).
//!
//! All operators are dense complex matrices at desk scale (N up to ~6);
//! everything is deterministic given an RNG seed.

pub mod dmorph;
pub mod error;
pub mod estimation;
pub mod gramian;
pub mod landscape;
pub mod linalg;
pub mod obstrack;
pub mod qdyn;
pub mod trace;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec, RMat, RVec};
