//! Frontal-occlusion culling: triangles whose centroids cannot see +z
//! infinity (nasal/oral cavity walls, folds) are removed so the remaining
//! sheet behaves like a heightfield.

use super::bvh::Bvh;
use super::mesh::TriangleMesh;
use super::procrustes::SPHERE_RADIUS_MM;
use crate::error::ImfaceError;

/// Keep a triangle iff a +z ray from just above its centroid escapes without
/// hitting any other triangle. Orphaned vertices are dropped afterwards.
pub fn remove_hidden_surfaces(mesh: &TriangleMesh) -> Result<TriangleMesh, ImfaceError> {
    if mesh.faces.is_empty() {
        return Ok(mesh.clone());
    }
    let bvh = Bvh::build(mesh);
    let eps = 1e-6 * SPHERE_RADIUS_MM;
    let dir = [0.0, 0.0, 1.0];
    let kept: Vec<[usize; 3]> = (0..mesh.faces.len())
        .filter(|&f| {
            let c = mesh.centroid(f);
            let origin = [c[0], c[1], c[2] + eps];
            !bvh.ray_hits_any(mesh, origin, dir, Some(f))
        })
        .map(|f| mesh.faces[f])
        .collect();
    if kept.is_empty() {
        return Err(ImfaceError::Data(
            "every triangle is occluded from the frontal view".into(),
        ));
    }
    let mut out = mesh.clone();
    out.faces = kept;
    out.compact()
}
