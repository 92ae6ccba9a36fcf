//! Parametric synthetic face-like dataset with exact ground-truth
//! correspondences.
//!
//! Every scan is a heightfield-style sheet on a shared (u, v) grid over a
//! 90 mm disk: a cosine dome plus per-identity low-frequency Gaussian bumps,
//! a per-expression smooth displacement anchored at the five landmark
//! sites (with tangential sliding), and per-identity high-frequency
//! sinusoidal wrinkles along the surface normals. Because every scan shares
//! the grid, the grid index is the true dense correspondence, which gives
//! exact supervision and evaluation targets that real scan data lacks.

use rand::Rng;
use rayon::prelude::*;
use robust::{orient2d, Coord};
use serde::{Deserialize, Serialize};

use crate::error::ImfaceError;
use crate::geom::procrustes::{canonical_landmarks, NOSE_Z_MM};
use crate::geom::{preprocess_mesh, DenseSite, MeshSdf, ScanRecord, Similarity, TriangleMesh};
use crate::seeds;

/// Radius of the disk the sheets are built over (mm).
pub const DISK_RADIUS_MM: f64 = 90.0;

const N_BUMPS: usize = 6;
const N_WAVES: usize = 3;

/// Height of the shared base dome at (x, y): a cosine cap that reaches
/// 40 mm at the nose site and 0 at the disk rim. The five canonical
/// landmark positions sit exactly on this surface.
pub fn dome_height(x: f64, y: f64) -> f64 {
    let r = (x * x + y * y).sqrt();
    NOSE_Z_MM * (std::f64::consts::PI * r / 180.0).cos()
}

/// Low-frequency identity shape: radial Gaussian bumps over the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    /// (center xy, width mm in 15-40, amplitude mm in +-15) per bump.
    pub bumps: Vec<([f64; 2], f64, f64)>,
}

impl IdentityParams {
    pub fn draw(rng: &mut impl Rng) -> Self {
        let bumps = (0..N_BUMPS)
            .map(|_| {
                let r = 60.0 * rng.gen::<f64>().sqrt();
                let th = rng.gen::<f64>() * std::f64::consts::TAU;
                let center = [r * th.cos(), r * th.sin()];
                let width = rng.gen_range(15.0..40.0);
                let amp = rng.gen_range(-15.0..15.0);
                (center, width, amp)
            })
            .collect();
        IdentityParams { bumps }
    }

    /// Detail-free neutral height at a grid coordinate.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut z = dome_height(x, y);
        for &(c, w, a) in &self.bumps {
            let d2 = (x - c[0]) * (x - c[0]) + (y - c[1]) * (y - c[1]);
            z += a * (-d2 / (2.0 * w * w)).exp();
        }
        z
    }
}

/// Smooth localized deformation anchored at the five landmark sites. Each
/// site carries a 3D offset (x/y components slide tangentially, z moves
/// along the view axis) with Gaussian falloff; `magnitude` scales the whole
/// field, so 0 is exactly neutral.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionParams {
    pub magnitude: f64,
    /// (width mm in 10-25, offset mm with components in +-10) per site.
    pub sites: [(f64, [f64; 3]); 5],
}

impl ExpressionParams {
    pub fn neutral() -> Self {
        ExpressionParams {
            magnitude: 0.0,
            sites: [(15.0, [0.0; 3]); 5],
        }
    }

    pub fn draw(rng: &mut impl Rng) -> Self {
        let mut sites = [(0.0, [0.0; 3]); 5];
        for s in &mut sites {
            let width = rng.gen_range(10.0..25.0);
            let offset = [
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ];
            *s = (width, offset);
        }
        ExpressionParams {
            magnitude: rng.gen_range(0.6..1.0),
            sites,
        }
    }

    pub fn displacement(&self, x: f64, y: f64) -> [f64; 3] {
        let anchors = site_coordinates();
        let mut d = [0.0; 3];
        for (s, a) in self.sites.iter().zip(anchors) {
            let (w, off) = s;
            let d2 = (x - a[0]) * (x - a[0]) + (y - a[1]) * (y - a[1]);
            let g = self.magnitude * (-d2 / (2.0 * w * w)).exp();
            for c in 0..3 {
                d[c] += g * off[c];
            }
        }
        d
    }
}

/// High-frequency wrinkles: a few planar sinusoids (3-8 mm wavelengths,
/// summed amplitude at most 1.5 mm) applied along vertex normals, with
/// per-identity directions and phases.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailParams {
    /// (wavelength mm, amplitude mm, direction xy unit, phase) per wave.
    pub waves: Vec<(f64, f64, [f64; 2], f64)>,
}

impl DetailParams {
    pub fn zero() -> Self {
        DetailParams { waves: Vec::new() }
    }

    pub fn draw(rng: &mut impl Rng) -> Self {
        let waves = (0..N_WAVES)
            .map(|_| {
                let wavelength = rng.gen_range(3.0..8.0);
                let amp = rng.gen_range(0.2..0.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let th = rng.gen_range(0.0..std::f64::consts::PI);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (wavelength, amp, [th.cos(), th.sin()], phase)
            })
            .collect();
        DetailParams { waves }
    }

    /// Scalar wrinkle height at a grid coordinate.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut h = 0.0;
        for &(lambda, a, dir, phase) in &self.waves {
            let t = std::f64::consts::TAU / lambda * (dir[0] * x + dir[1] * y) + phase;
            h += a * t.sin();
        }
        h
    }
}

/// The (x, y) of the five canonical landmark sites, model order.
pub fn site_coordinates() -> [[f64; 2]; 5] {
    canonical_landmarks().map(|l| [l[0], l[1]])
}

/// The shared sampling grid: kept disk vertices with their original grid
/// coordinates, flat grid indices (the correspondence key), faces, and the
/// vertex index each landmark site snaps to.
#[derive(Debug, Clone)]
pub struct SynthGrid {
    pub res: usize,
    pub xy: Vec<[f64; 2]>,
    pub grid_index: Vec<usize>,
    pub faces: Vec<[usize; 3]>,
    pub site_vertices: [usize; 5],
}

pub fn build_grid(res: usize) -> Result<SynthGrid, ImfaceError> {
    if res < 32 {
        return Err(ImfaceError::Config(format!(
            "grid resolution must be at least 32, got {res}"
        )));
    }
    let step = 2.0 * DISK_RADIUS_MM / (res - 1) as f64;
    let coord = |i: usize| -DISK_RADIUS_MM + i as f64 * step;
    let mut xy = Vec::new();
    let mut grid_index = Vec::new();
    let mut kept = vec![usize::MAX; res * res];
    for j in 0..res {
        for i in 0..res {
            let (x, y) = (coord(i), coord(j));
            if x * x + y * y <= DISK_RADIUS_MM * DISK_RADIUS_MM {
                kept[j * res + i] = xy.len();
                xy.push([x, y]);
                grid_index.push(j * res + i);
            }
        }
    }
    let mut faces = Vec::new();
    for j in 0..res - 1 {
        for i in 0..res - 1 {
            let corners = [
                kept[j * res + i],
                kept[j * res + i + 1],
                kept[(j + 1) * res + i + 1],
                kept[(j + 1) * res + i],
            ];
            if corners.iter().all(|&c| c != usize::MAX) {
                let [a, b, c, d] = corners;
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
    }
    let site_vertices = site_coordinates().map(|s| {
        (0..xy.len())
            .min_by(|&p, &q| {
                let dp = (xy[p][0] - s[0]).powi(2) + (xy[p][1] - s[1]).powi(2);
                let dq = (xy[q][0] - s[0]).powi(2) + (xy[q][1] - s[1]).powi(2);
                dp.partial_cmp(&dq).unwrap().then(p.cmp(&q))
            })
            .expect("grid has vertices")
    });
    Ok(SynthGrid {
        res,
        xy,
        grid_index,
        faces,
        site_vertices,
    })
}

/// One raw synthetic scan before geometry preprocessing. The mesh carries
/// the five snapped landmark sites; `grid_index` is the per-vertex
/// ground-truth correspondence key shared by all scans of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScan {
    pub mesh: TriangleMesh,
    pub grid_index: Vec<usize>,
}

/// Build one synthetic scan on `grid`. Rejects parameter combinations that
/// fold the sheet (any face flipping orientation in the x-y projection).
pub fn synth_mesh_on(
    grid: &SynthGrid,
    id: &IdentityParams,
    exp: &ExpressionParams,
    det: &DetailParams,
) -> Result<SynthScan, ImfaceError> {
    let mut vertices: Vec<[f64; 3]> = grid
        .xy
        .iter()
        .map(|&[x, y]| {
            let z = id.height(x, y);
            let d = exp.displacement(x, y);
            [x + d[0], y + d[1], z + d[2]]
        })
        .collect();
    if !det.waves.is_empty() {
        let base = TriangleMesh::new(vertices.clone(), grid.faces.clone());
        let normals = base.vertex_normals();
        for (v, (&[x, y], n)) in vertices
            .iter_mut()
            .zip(grid.xy.iter().zip(normals.iter()))
        {
            let h = det.height(x, y);
            for c in 0..3 {
                v[c] += h * n[c];
            }
        }
    }
    for f in &grid.faces {
        let p = |i: usize| Coord {
            x: vertices[i][0],
            y: vertices[i][1],
        };
        if orient2d(p(f[0]), p(f[1]), p(f[2])) <= 0.0 {
            return Err(ImfaceError::Data(
                "synthetic parameters fold the sheet; rejected".into(),
            ));
        }
    }
    let mut mesh = TriangleMesh::new(vertices, grid.faces.clone());
    mesh.landmark_indices = Some(grid.site_vertices.to_vec());
    Ok(SynthScan {
        mesh,
        grid_index: grid.grid_index.clone(),
    })
}

/// Convenience wrapper building the grid on the fly.
pub fn synth_mesh(
    id: &IdentityParams,
    exp: &ExpressionParams,
    det: &DetailParams,
    grid_res: usize,
) -> Result<SynthScan, ImfaceError> {
    synth_mesh_on(&build_grid(grid_res)?, id, exp, det)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub n_expressions: usize,
    pub grid_res: usize,
    pub seed: u64,
    /// Dense correspondence sites exported per scan.
    pub n_dense: usize,
    pub n_near: usize,
    pub n_uniform: usize,
    pub sigma_near_mm: f64,
    pub radius_mm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities: 20,
            n_expressions: 4,
            grid_res: 128,
            seed: 1,
            n_dense: 400,
            n_near: 4000,
            n_uniform: 4000,
            sigma_near_mm: 10.0,
            radius_mm: 100.0,
        }
    }
}

pub struct SynthDataset {
    pub config: SynthConfig,
    pub records: Vec<ScanRecord>,
    /// Raw (pre-preprocessing) meshes, parallel to `records`.
    pub raw_meshes: Vec<TriangleMesh>,
    /// The detail-free mean neutral face, preprocessed into the canonical
    /// frame.
    pub template_mesh: TriangleMesh,
}

/// How many fresh parameter draws a folding scan gets before generation
/// gives up.
const MAX_DRAWS: u64 = 64;

fn draw_identity(seed: u64, identity: usize, attempt: u64) -> (IdentityParams, DetailParams) {
    let id = IdentityParams::draw(&mut seeds::stream(
        seed,
        "identity",
        &[identity as u64, attempt],
    ));
    let det = DetailParams::draw(&mut seeds::stream(
        seed,
        "detail",
        &[identity as u64, attempt],
    ));
    (id, det)
}

fn draw_expression(seed: u64, identity: usize, expression: usize, attempt: u64) -> ExpressionParams {
    ExpressionParams::draw(&mut seeds::stream(
        seed,
        "expression",
        &[identity as u64, expression as u64, attempt],
    ))
}

/// Per-scan parameter draws, all derived from the master seed so the
/// dataset is reproducible scan-by-scan. These are the first-attempt draws;
/// generation redraws folding scans with fresh sub-seeds.
pub fn scan_params(
    seed: u64,
    identity: usize,
    expression: usize,
) -> (IdentityParams, ExpressionParams, DetailParams) {
    let (id, det) = draw_identity(seed, identity, 0);
    let exp = if expression == 0 {
        ExpressionParams::neutral()
    } else {
        draw_expression(seed, identity, expression, 0)
    };
    (id, exp, det)
}

pub fn identity_label(i: usize) -> String {
    format!("id_{i:03}")
}

pub fn expression_label(e: usize) -> String {
    if e == 0 {
        "neutral".to_string()
    } else {
        format!("e{e:02}")
    }
}

/// Generate the full dataset: per-scan records with SDF triplets, sparse
/// landmarks, and dense scan/neutral/template correspondences, plus the
/// processed template mesh. Expression 0 of every identity is the neutral.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset, ImfaceError> {
    if config.n_identities == 0 || config.n_expressions == 0 {
        return Err(ImfaceError::Config(
            "dataset needs at least one identity and one expression".into(),
        ));
    }
    let grid = build_grid(config.grid_res)?;
    let seed = config.seed;

    // raw scans, grouped by identity with expression 0 neutral; folding
    // parameter combinations are rejected and redrawn with fresh sub-seeds
    let mut raw: Vec<Vec<SynthScan>> = Vec::with_capacity(config.n_identities);
    let mut id_params = Vec::with_capacity(config.n_identities);
    for i in 0..config.n_identities {
        // settle identity and detail on a valid neutral sheet first so every
        // expression of the identity shares them
        let mut settled = None;
        for attempt in 0..MAX_DRAWS {
            let (id, det) = draw_identity(seed, i, attempt);
            if let Ok(scan) = synth_mesh_on(&grid, &id, &ExpressionParams::neutral(), &det) {
                if attempt > 0 {
                    log::debug!("identity {i}: drew neutral parameters {attempt} extra times");
                }
                settled = Some((id, det, scan));
                break;
            }
        }
        let Some((id, det, neutral)) = settled else {
            return Err(ImfaceError::Data(format!(
                "identity {i}: no non-folding parameter draw in {MAX_DRAWS} attempts"
            )));
        };
        id_params.push(id.clone());
        let mut scans = Vec::with_capacity(config.n_expressions);
        scans.push(neutral);
        for e in 1..config.n_expressions {
            let mut scan = None;
            for attempt in 0..MAX_DRAWS {
                let exp = draw_expression(seed, i, e, attempt);
                if let Ok(s) = synth_mesh_on(&grid, &id, &exp, &det) {
                    if attempt > 0 {
                        log::debug!(
                            "identity {i} expression {e}: drew parameters {attempt} extra times"
                        );
                    }
                    scan = Some(s);
                    break;
                }
            }
            let Some(s) = scan else {
                return Err(ImfaceError::Data(format!(
                    "identity {i} expression {e}: no non-folding parameter draw in {MAX_DRAWS} attempts"
                )));
            };
            scans.push(s);
        }
        raw.push(scans);
    }

    // detail-free mean neutral: the template every identity deforms from
    let template_raw = {
        let vertices: Vec<[f64; 3]> = grid
            .xy
            .iter()
            .map(|&[x, y]| {
                let z = id_params.iter().map(|p| p.height(x, y)).sum::<f64>()
                    / config.n_identities as f64;
                [x, y, z]
            })
            .collect();
        let mut mesh = TriangleMesh::new(vertices, grid.faces.clone());
        mesh.landmark_indices = Some(grid.site_vertices.to_vec());
        mesh
    };
    let (template_mesh, template_t) = preprocess_mesh(&template_raw, config.radius_mm)?;

    // dense correspondence sites: central-region vertices, evenly strided
    let candidates: Vec<usize> = (0..grid.xy.len())
        .filter(|&v| grid.xy[v][0].powi(2) + grid.xy[v][1].powi(2) <= 60.0 * 60.0)
        .collect();
    let n_dense = config.n_dense.min(candidates.len());
    let dense_vertices: Vec<usize> = (0..n_dense)
        .map(|k| candidates[k * candidates.len() / n_dense.max(1)])
        .collect();

    // preprocess + label every scan; order is (identity, expression)
    let jobs: Vec<(usize, usize)> = (0..config.n_identities)
        .flat_map(|i| (0..config.n_expressions).map(move |e| (i, e)))
        .collect();
    let processed: Vec<Result<(ScanRecord, TriangleMesh), ImfaceError>> = jobs
        .par_iter()
        .map(|&(i, e)| {
            let scan = &raw[i][e];
            let neutral = &raw[i][0];
            let (mesh, t) = preprocess_mesh(&scan.mesh, config.radius_mm)?;
            let t_neutral = if e == 0 {
                t
            } else {
                preprocess_transform(&neutral.mesh, config.radius_mm)?
            };
            let sdf = MeshSdf::new(&mesh)?;
            let scan_seed = seeds::stream(seed, "scan-seed", &[i as u64, e as u64]).gen::<u64>();
            let triplets = sdf.sample_training_points(
                config.n_near,
                config.n_uniform,
                config.sigma_near_mm,
                config.radius_mm,
                scan_seed,
            );
            let landmarks = grid
                .site_vertices
                .iter()
                .map(|&v| t.apply(scan.mesh.vertices[v]))
                .collect();
            let dense = dense_vertices
                .iter()
                .map(|&v| DenseSite {
                    scan: t.apply(scan.mesh.vertices[v]),
                    neutral: t_neutral.apply(neutral.mesh.vertices[v]),
                    template: template_t.apply(template_raw.vertices[v]),
                })
                .collect();
            Ok((
                ScanRecord {
                    identity: identity_label(i),
                    expression: expression_label(e),
                    is_neutral: e == 0,
                    landmarks,
                    dense,
                    triplets,
                },
                scan.mesh.clone(),
            ))
        })
        .collect();

    let mut records = Vec::with_capacity(jobs.len());
    let mut raw_meshes = Vec::with_capacity(jobs.len());
    for r in processed {
        let (rec, mesh) = r?;
        records.push(rec);
        raw_meshes.push(mesh);
    }
    Ok(SynthDataset {
        config: config.clone(),
        records,
        raw_meshes,
        template_mesh,
    })
}

/// Alignment transform a mesh would get from preprocessing, without the
/// cropping/retriangulation work.
fn preprocess_transform(mesh: &TriangleMesh, _radius_mm: f64) -> Result<Similarity, ImfaceError> {
    let landmarks = mesh.landmark_positions()?;
    crate::geom::align_landmarks(&landmarks, &canonical_landmarks())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub scans: Vec<ScanEntry>,
    pub template: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScanEntry {
    pub identity: String,
    pub expression: String,
    pub is_neutral: bool,
    pub record: String,
    pub raw_obj: String,
}

/// Write the dataset to disk: raw OBJs with landmark sidecars, processed
/// scan records, the template mesh, and a JSON manifest.
pub fn save_dataset(ds: &SynthDataset, out_dir: &std::path::Path) -> Result<DatasetManifest, ImfaceError> {
    let raw_dir = out_dir.join("raw");
    let scan_dir = out_dir.join("scans");
    for d in [out_dir, &raw_dir, &scan_dir] {
        std::fs::create_dir_all(d).map_err(|e| ImfaceError::io(d, e))?;
    }
    let mut scans = Vec::new();
    for (rec, mesh) in ds.records.iter().zip(&ds.raw_meshes) {
        let stem = format!("{}_{}", rec.identity, rec.expression);
        let obj = raw_dir.join(format!("{stem}.obj"));
        let sidecar = raw_dir.join(format!("{stem}.landmarks.txt"));
        let record = scan_dir.join(format!("{stem}.bin"));
        crate::geom::mesh::write_obj(&obj, mesh)?;
        crate::geom::mesh::write_landmark_indices(
            &sidecar,
            mesh.landmark_indices.as_deref().unwrap_or(&[]),
        )?;
        rec.save(&record)?;
        scans.push(ScanEntry {
            identity: rec.identity.clone(),
            expression: rec.expression.clone(),
            is_neutral: rec.is_neutral,
            record: format!("scans/{stem}.bin"),
            raw_obj: format!("raw/{stem}.obj"),
        });
    }
    crate::geom::mesh::write_obj(&out_dir.join("template.obj"), &ds.template_mesh)?;
    let manifest = DatasetManifest {
        config: ds.config.clone(),
        scans,
        template: "template.obj".to_string(),
    };
    crate::diffcore::checkpoint::save_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
