//! Geometry preprocessing: turns raw open facial meshes into canonical,
//! frontally-oriented, pseudo-watertight sheets and labels SDF training
//! samples against them.
//!
//! Pipeline order: landmark alignment and sphere crop, hidden-surface
//! removal from the frontal view, Delaunay retriangulation of the x-y
//! projection, then signed-distance sampling.

pub mod bvh;
pub mod delaunay;
pub mod hidden;
pub mod mesh;
pub mod procrustes;
pub mod ray;
pub mod sample;
pub mod scan;

pub use bvh::Bvh;
pub use delaunay::{delaunay_xy, triangulate_xy};
pub use hidden::remove_hidden_surfaces;
pub use mesh::TriangleMesh;
pub use procrustes::{
    align_landmarks, canonical_landmarks, normalize_and_crop, Similarity, NOSE_Z_MM,
    SPHERE_RADIUS_MM,
};
pub use ray::ray_triangle_intersect;
pub use sample::{MeshSdf, SampleTriplet};
pub use scan::{DenseSite, ScanRecord};

use crate::error::ImfaceError;

/// Full geometry pipeline: align to the canonical frame, crop to the
/// sampling sphere, drop frontally occluded triangles, and retriangulate
/// into a single heightfield-like sheet. Returns the processed mesh and the
/// similarity that maps raw input coordinates into the canonical frame.
pub fn preprocess_mesh(
    mesh: &TriangleMesh,
    radius_mm: f64,
) -> Result<(TriangleMesh, Similarity), ImfaceError> {
    let landmarks = mesh.landmark_positions()?;
    let (cropped, transform) = normalize_and_crop(mesh, &landmarks, radius_mm)?;
    let visible = remove_hidden_surfaces(&cropped)?;
    let sheet = delaunay_xy(&visible)?;
    Ok((sheet, transform))
}
