//! Matérn (smoothness 1) fields on the sphere through the SPDE
//! `(κ² − Δ) u = W`, discretized with linear finite elements on a
//! triangulated latitude/longitude mesh.

mod cholesky;
mod fem;
mod mesh;
mod ordering;
mod precision;
mod sparse;

pub use cholesky::{factorize, factorize_with_order, CholeskyFactor, SymbolicCholesky};
pub use fem::{assemble_fem, triangle_stiffness, FemMatrices};
pub use mesh::{build_mesh, SphereMesh};
pub use ordering::{fill_in, minimum_degree};
pub use precision::{assemble_precision, PrecisionOperator, SparsePrecision, SubmatrixPlan};
pub use sparse::CscMatrix;
