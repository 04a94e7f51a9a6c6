//! Sum-of-squares bounds on long-time averages of polynomial dynamical
//! systems, and small-feedback controller synthesis driven by those bounds.

pub mod bound;
pub mod config;
pub mod linalg;
pub mod models;
pub mod poly;
pub mod sdp;
pub mod sim;
pub mod sos;
pub mod synthesis;
pub mod system;
pub mod testing;

pub use poly::{monomial_basis, parse_poly, Monomial, PolyError, PolyMat, Polynomial};
pub use system::{PolySystem, SystemError};
