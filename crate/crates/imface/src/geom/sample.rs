//! SDF labeling against a preprocessed heightfield-like mesh, plus the
//! training-point sampler (near-surface Gaussian offsets and a uniform ball).
//!
//! Sign convention: the surface is oriented toward +z; a query is inside
//! (negative) when the direction from it to its closest surface point has a
//! positive z component, i.e. the surface lies in front of the point.

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;

use super::bvh::Bvh;
use super::mesh::TriangleMesh;
use crate::error::ImfaceError;
use crate::fields::se3::{cross3, dot3, norm3};
use crate::seeds;

/// Queries closer than this are treated as on-surface (millimetres).
pub const ON_SURFACE_EPS_MM: f64 = 1e-7;
/// |z cosine| below this makes the inside/outside call ambiguous.
const SIGN_EPS: f64 = 1e-12;

/// One SDF supervision sample: query point, signed distance (mm), and the
/// unit direction of increasing signed distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTriplet {
    pub point: [f64; 3],
    pub sdf: f64,
    pub gradient: [f64; 3],
}

/// Signed-distance oracle over a fixed mesh: owns the BVH, per-vertex
/// normals, and the area table used for surface-proportional sampling.
pub struct MeshSdf<'a> {
    mesh: &'a TriangleMesh,
    bvh: Bvh,
    vertex_normals: Vec<[f64; 3]>,
    /// Cumulative face areas; last entry is the total.
    area_cdf: Vec<f64>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn axpy(a: [f64; 3], s: f64, b: [f64; 3]) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

impl<'a> MeshSdf<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Result<Self, ImfaceError> {
        if mesh.faces.is_empty() {
            return Err(ImfaceError::Data("mesh has no faces to sample".into()));
        }
        let mut area_cdf = Vec::with_capacity(mesh.faces.len());
        let mut acc = 0.0;
        for f in 0..mesh.faces.len() {
            let (_, area) = mesh.face_normal_area(f);
            acc += area;
            area_cdf.push(acc);
        }
        if acc <= 0.0 {
            return Err(ImfaceError::Data("mesh has zero total surface area".into()));
        }
        Ok(MeshSdf {
            mesh,
            bvh: Bvh::build(mesh),
            vertex_normals: mesh.vertex_normals(),
            area_cdf,
        })
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    /// Label one query point with signed distance and gradient direction.
    pub fn sample(&self, p: [f64; 3]) -> SampleTriplet {
        let hit = self.bvh.closest_point(self.mesh, p);
        if hit.dist < ON_SURFACE_EPS_MM {
            return SampleTriplet {
                point: p,
                sdf: 0.0,
                gradient: self.surface_normal(hit.face, hit.point),
            };
        }
        let inv = 1.0 / hit.dist;
        let uz = (hit.point[2] - p[2]) * inv; // z cosine of query->surface
        let sign = if uz > SIGN_EPS {
            -1.0
        } else {
            if uz.abs() <= SIGN_EPS {
                log::debug!(
                    "ambiguous sdf sign at ({:.6}, {:.6}, {:.6}); resolved positive",
                    p[0],
                    p[1],
                    p[2]
                );
            }
            1.0
        };
        let d = sub(p, hit.point);
        SampleTriplet {
            point: p,
            sdf: sign * hit.dist,
            gradient: [sign * d[0] * inv, sign * d[1] * inv, sign * d[2] * inv],
        }
    }

    /// Area-weighted vertex normals interpolated at a point on face `f`,
    /// renormalized and oriented toward +z.
    fn surface_normal(&self, f: usize, q: [f64; 3]) -> [f64; 3] {
        let [i0, i1, i2] = self.mesh.faces[f];
        let (v0, v1, v2) = (
            self.mesh.vertices[i0],
            self.mesh.vertices[i1],
            self.mesh.vertices[i2],
        );
        let full = cross3(sub(v1, v0), sub(v2, v0));
        let den = dot3(full, full);
        let mut n = if den > 0.0 {
            let w0 = dot3(cross3(sub(v2, v1), sub(q, v1)), full) / den;
            let w1 = dot3(cross3(sub(v0, v2), sub(q, v2)), full) / den;
            let w2 = 1.0 - w0 - w1;
            let (n0, n1, n2) = (
                self.vertex_normals[i0],
                self.vertex_normals[i1],
                self.vertex_normals[i2],
            );
            [
                w0 * n0[0] + w1 * n1[0] + w2 * n2[0],
                w0 * n0[1] + w1 * n1[1] + w2 * n2[1],
                w0 * n0[2] + w1 * n1[2] + w2 * n2[2],
            ]
        } else {
            [0.0, 0.0, 1.0]
        };
        let len = norm3(n);
        if len <= 1e-300 {
            return [0.0, 0.0, 1.0];
        }
        if n[2] < 0.0 {
            n = [-n[0], -n[1], -n[2]];
        }
        [n[0] / len, n[1] / len, n[2] / len]
    }

    /// Draw one surface point (area-weighted face, uniform barycentric) and
    /// its Gaussian offset along a uniform random direction.
    fn draw_near(&self, sigma_mm: f64, rng: &mut impl Rng) -> ([f64; 3], [f64; 3]) {
        let total = *self.area_cdf.last().unwrap();
        let t = rng.gen::<f64>() * total;
        let f = self.area_cdf.partition_point(|&acc| acc <= t);
        let f = f.min(self.mesh.faces.len() - 1);
        let [i0, i1, i2] = self.mesh.faces[f];
        let (r1, r2) = (rng.gen::<f64>(), rng.gen::<f64>());
        let s = r1.sqrt();
        let (w0, w1, w2) = (1.0 - s, s * (1.0 - r2), s * r2);
        let (v0, v1, v2) = (
            self.mesh.vertices[i0],
            self.mesh.vertices[i1],
            self.mesh.vertices[i2],
        );
        let source = [
            w0 * v0[0] + w1 * v1[0] + w2 * v2[0],
            w0 * v0[1] + w1 * v1[1] + w2 * v2[1],
            w0 * v0[2] + w1 * v1[2] + w2 * v2[2],
        ];
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let offset = Normal::new(0.0, sigma_mm).unwrap().sample(rng);
        (source, axpy(source, offset, dir))
    }

    /// Near-surface plus uniform-ball training samples. Every point gets its
    /// own RNG stream from the master seed, so the output is independent of
    /// the worker count; points outside the sphere are redrawn in-stream.
    pub fn sample_training_points(
        &self,
        n_near: usize,
        n_uniform: usize,
        sigma_near_mm: f64,
        radius_mm: f64,
        seed: u64,
    ) -> Vec<SampleTriplet> {
        let near: Vec<SampleTriplet> = (0..n_near)
            .into_par_iter()
            .map(|i| {
                let mut rng = seeds::stream(seed, "near", &[i as u64]);
                loop {
                    let (_, p) = self.draw_near(sigma_near_mm, &mut rng);
                    if norm3(p) <= radius_mm {
                        return self.sample(p);
                    }
                }
            })
            .collect();
        let uniform: Vec<SampleTriplet> = (0..n_uniform)
            .into_par_iter()
            .map(|i| {
                let mut rng = seeds::stream(seed, "unif", &[i as u64]);
                let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                let r = radius_mm * rng.gen::<f64>().cbrt();
                self.sample([r * dir[0], r * dir[1], r * dir[2]])
            })
            .collect();
        let mut out = near;
        out.extend(uniform);
        out
    }
}
