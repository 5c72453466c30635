//! Structured Q1 meshes, conductivity tensors and FE matrix assembly.

pub mod assembly;
pub mod element;
pub mod grid;
pub mod quadrature;
pub mod sparse;
pub mod tensor;

pub use assembly::{assemble_lumped_mass, assemble_mass, assemble_stiffness, domain_measure};
pub use grid::{build_ellipsoid_grid, build_rect_grid, ellipsoid_map, EllipsoidGeometry, StructuredGrid, ZMode};
pub use sparse::SparseSpdMatrix;
pub use tensor::{default_fibers, monodomain_tensor, transverse_iso_tensor, ConductivityField, Tensor};
