//! Multi-resolution electrical impedance tomography.
//!
//! The crate covers the whole unsupervised reconstruction pipeline: disk
//! meshes and their geometry ([`mesh`]), the linear FEM forward model with
//! adjoint sensitivities ([`forward`]), the permutation-invariant point
//! network with hand-written reverse mode ([`net`]), feature-map
//! conditioning for the data-driven input path ([`condition`]),
//! coarse-to-fine and classical reconstruction drivers ([`recon`]) and
//! image metrics ([`eval`]).

pub mod condition;
pub mod error;
pub mod eval;
pub mod forward;
pub mod mesh;
pub mod net;
pub mod recon;

pub use error::{Error, Result};
