//! Rotation-equivariant convolutional proximal operators, an ISTA unfolding
//! engine built on them, and tools to measure how far a discretised network
//! is from exact rotation equivariance.

pub mod audit;
pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod filter;
pub mod io;
pub mod prox;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod unfold;

pub use error::{Error, Result};
pub use tensor::{GroupFeatureMap, GroupSpec, PlanarImage};
