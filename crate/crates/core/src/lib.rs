//! Handle-driven mesh deformation in the gradient domain.
//!
//! A mesh is represented by one 3×3 Jacobian per triangle. Vertex positions
//! are recovered from a Jacobian field with an anchored Poisson solve whose
//! adjoint lets any vertex-space loss drive the field. On top of that sit a
//! two-stage optimizer (handle fitting, then handle fitting plus an image-space
//! plausibility prior), a small differentiable rasterizer, an ARAP baseline,
//! and the tooling to build planar benchmark meshes from foreground masks.

pub mod arap;
pub mod bench;
pub mod deform;
pub mod error;
pub mod guidance;
pub mod mesh;
pub mod poisson;
pub mod render;
pub mod sparse;
pub mod texture;

pub use error::{Error, ErrorCategory, Result};
pub use mesh::{JacobianField, SparseOperatorSet, TexturedMesh};
pub use poisson::{DeformationSpec, FactorizedSystem};
pub use texture::RgbImage;

/// Vertex positions, one per mesh vertex.
pub type Vertices = Vec<nalgebra::Vector3<f64>>;
