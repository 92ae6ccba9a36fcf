//! C ABI over the imface crate: load a trained checkpoint, evaluate its
//! fields, extract meshes, and score reconstructions from any language that
//! can call C.
//!
//! Conventions:
//! - Handles are opaque pointers created and freed by this library.
//! - Every fallible call returns an [`ImfaceStatus`]; on failure,
//!   [`imface_last_error`] returns a message for the current thread.
//! - Points and code vectors are tightly packed `f64` arrays; points are
//!   interleaved `x, y, z`. All coordinates are millimetres.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};

use imface::model::{ImFaceModel, LatentCodes};
use imface::recon::{evaluate_meshes, marching_cubes, MetricOptions, VoxelGrid};
use imface::ImfaceError;

/// Result of a C API call. Values above `Ok` mirror the CLI error
/// categories.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImfaceStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidString = 2,
    Io = 3,
    Config = 4,
    Data = 5,
    Numeric = 6,
}

/// Opaque handle to a loaded model checkpoint.
pub struct ImfaceModelHandle {
    model: ImFaceModel,
}

/// Mesh-versus-mesh evaluation scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImfaceMetrics {
    /// Symmetric Chamfer distance (mm).
    pub chamfer_mm: f64,
    /// F-score at `tau_mm`, in percent.
    pub fscore_pct: f64,
    /// Threshold the F-score was computed at (mm).
    pub tau_mm: f64,
    /// Mean cosine between matched surface normals in [-1, 1].
    pub normal_consistency: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(e: &ImfaceError) -> ImfaceStatus {
    set_error(&e.to_string());
    match e {
        ImfaceError::Io(_) => ImfaceStatus::Io,
        ImfaceError::Config(_) => ImfaceStatus::Config,
        ImfaceError::Data(_) => ImfaceStatus::Data,
        ImfaceError::Numeric(_) => ImfaceStatus::Numeric,
    }
}

fn null_argument(name: &str) -> ImfaceStatus {
    set_error(&format!("argument {name} must not be null"));
    ImfaceStatus::NullArgument
}

/// # Safety
/// `ptr` must be null or a nul-terminated string valid for reads.
unsafe fn path_arg(ptr: *const c_char, name: &str) -> Result<PathBuf, ImfaceStatus> {
    if ptr.is_null() {
        return Err(null_argument(name));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(&format!("argument {name} is not valid UTF-8"));
            Err(ImfaceStatus::InvalidString)
        }
    }
}

/// # Safety
/// Each non-null code pointer must be valid for `z_dim` reads.
unsafe fn codes_arg(
    z_exp: *const f64,
    z_id: *const f64,
    z_detail: *const f64,
    z_dim: usize,
) -> Result<LatentCodes, ImfaceStatus> {
    let read = |p: *const f64, name: &str| -> Result<Vec<f64>, ImfaceStatus> {
        if p.is_null() {
            return Err(null_argument(name));
        }
        Ok(std::slice::from_raw_parts(p, z_dim).to_vec())
    };
    Ok(LatentCodes {
        z_exp: read(z_exp, "z_exp")?,
        z_id: read(z_id, "z_id")?,
        z_detail: read(z_detail, "z_detail")?,
    })
}

/// # Safety
/// `points` must be valid for `3 * n_points` reads.
unsafe fn points_arg(points: *const f64, n_points: usize) -> Vec<[f64; 3]> {
    std::slice::from_raw_parts(points, 3 * n_points)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Version of the library as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn imface_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on the calling thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn imface_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a model from a checkpoint directory (the layout written by
/// `imface train`). On success, `*out` owns the handle; release it with
/// [`imface_model_free`].
///
/// # Safety
/// `dir` must be a nul-terminated string; `out` must be valid for one
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn imface_model_load(
    dir: *const c_char,
    out: *mut *mut ImfaceModelHandle,
) -> ImfaceStatus {
    if out.is_null() {
        return null_argument("out");
    }
    let dir = match path_arg(dir, "dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match ImFaceModel::load(&dir.join("model.bin")) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(ImfaceModelHandle { model }));
            ImfaceStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Release a handle returned by [`imface_model_load`]. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer returned by [`imface_model_load`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn imface_model_free(model: *mut ImfaceModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of each of the three latent code vectors; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn imface_model_z_dim(model: *const ImfaceModelHandle) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.z_dim)
}

/// Number of landmark-anchored regions; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn imface_model_landmark_count(model: *const ImfaceModelHandle) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.k)
}

/// Evaluate the signed distance field at `n_points` points. With
/// `base_only` the detail displacement is skipped. `out` receives one value
/// per point.
///
/// # Safety
/// `model` must be a live handle; the code pointers must each be valid for
/// `imface_model_z_dim` reads; `points` for `3 * n_points` reads; `out` for
/// `n_points` writes.
#[no_mangle]
pub unsafe extern "C" fn imface_model_eval_sdf(
    model: *const ImfaceModelHandle,
    z_exp: *const f64,
    z_id: *const f64,
    z_detail: *const f64,
    points: *const f64,
    n_points: usize,
    base_only: bool,
    out: *mut f64,
) -> ImfaceStatus {
    let Some(handle) = model.as_ref() else {
        return null_argument("model");
    };
    if points.is_null() || out.is_null() {
        return null_argument("points/out");
    }
    let codes = match codes_arg(z_exp, z_id, z_detail, handle.model.config.z_dim) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let pts = points_arg(points, n_points);
    let result = if base_only {
        handle.model.eval_base_sdf(&codes, &pts)
    } else {
        handle.model.eval_full_sdf(&codes, &pts)
    };
    match result {
        Ok(values) => {
            std::ptr::copy_nonoverlapping(values.as_ptr(), out, n_points);
            ImfaceStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Evaluate the population template field; needs no codes.
///
/// # Safety
/// `model` must be a live handle; `points` valid for `3 * n_points` reads;
/// `out` for `n_points` writes.
#[no_mangle]
pub unsafe extern "C" fn imface_model_eval_template_sdf(
    model: *const ImfaceModelHandle,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
) -> ImfaceStatus {
    let Some(handle) = model.as_ref() else {
        return null_argument("model");
    };
    if points.is_null() || out.is_null() {
        return null_argument("points/out");
    }
    let pts = points_arg(points, n_points);
    let values = handle.model.eval_template_sdf(&pts);
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, n_points);
    ImfaceStatus::Ok
}

unsafe fn eval_points3(
    model: *const ImfaceModelHandle,
    z_exp: *const f64,
    z_id: *const f64,
    z_detail: *const f64,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
    f: impl Fn(&ImFaceModel, &LatentCodes, &[[f64; 3]]) -> Result<Vec<[f64; 3]>, ImfaceError>,
) -> ImfaceStatus {
    let Some(handle) = model.as_ref() else {
        return null_argument("model");
    };
    if points.is_null() || out.is_null() {
        return null_argument("points/out");
    }
    let codes = match codes_arg(z_exp, z_id, z_detail, handle.model.config.z_dim) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let pts = points_arg(points, n_points);
    match f(&handle.model, &codes, &pts) {
        Ok(mapped) => {
            for (i, p) in mapped.iter().enumerate() {
                std::ptr::copy_nonoverlapping(p.as_ptr(), out.add(3 * i), 3);
            }
            ImfaceStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Warp expression-space points into the identity space. `out` receives
/// `3 * n_points` values.
///
/// # Safety
/// Same contracts as [`imface_model_eval_sdf`], with `out` valid for
/// `3 * n_points` writes.
#[no_mangle]
pub unsafe extern "C" fn imface_model_eval_exp_deform(
    model: *const ImfaceModelHandle,
    z_exp: *const f64,
    z_id: *const f64,
    z_detail: *const f64,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
) -> ImfaceStatus {
    eval_points3(model, z_exp, z_id, z_detail, points, n_points, out, |m, c, p| {
        m.eval_exp_deform(c, p)
    })
}

/// Map scan-space points all the way into the shared template space. `out`
/// receives `3 * n_points` values.
///
/// # Safety
/// Same contracts as [`imface_model_eval_exp_deform`].
#[no_mangle]
pub unsafe extern "C" fn imface_model_eval_correspondence(
    model: *const ImfaceModelHandle,
    z_exp: *const f64,
    z_id: *const f64,
    z_detail: *const f64,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
) -> ImfaceStatus {
    eval_points3(model, z_exp, z_id, z_detail, points, n_points, out, |m, c, p| {
        m.eval_correspondence(c, p)
    })
}

fn reconstruct_impl(
    model: &ImFaceModel,
    codes: Option<&LatentCodes>,
    resolution: usize,
    half_size_mm: f64,
    base_only: bool,
    out_path: &Path,
) -> Result<(), ImfaceError> {
    let grid = VoxelGrid::cube(resolution, half_size_mm)?;
    let mesh = match codes {
        None => marching_cubes(&grid, |pts| Ok(model.eval_template_sdf(pts)))?,
        Some(codes) if base_only => marching_cubes(&grid, |pts| model.eval_base_sdf(codes, pts))?,
        Some(codes) => marching_cubes(&grid, |pts| model.eval_full_sdf(codes, pts))?,
    };
    imface::geom::mesh::write_obj(out_path, &mesh)
}

/// Extract the zero level set on a `resolution`^3 grid spanning
/// `[-half_size_mm, half_size_mm]` per axis and write it as an OBJ file.
/// Pass three null code pointers to extract the learned template surface.
///
/// # Safety
/// `model` must be a live handle; the code pointers must either all be null
/// or each valid for `imface_model_z_dim` reads; `out_path` must be a
/// nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn imface_model_reconstruct_obj(
    model: *const ImfaceModelHandle,
    z_exp: *const f64,
    z_id: *const f64,
    z_detail: *const f64,
    resolution: usize,
    half_size_mm: f64,
    base_only: bool,
    out_path: *const c_char,
) -> ImfaceStatus {
    let Some(handle) = model.as_ref() else {
        return null_argument("model");
    };
    let out_path = match path_arg(out_path, "out_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let codes = if z_exp.is_null() && z_id.is_null() && z_detail.is_null() {
        None
    } else {
        match codes_arg(z_exp, z_id, z_detail, handle.model.config.z_dim) {
            Ok(c) => Some(c),
            Err(s) => return s,
        }
    };
    match reconstruct_impl(
        &handle.model,
        codes.as_ref(),
        resolution,
        half_size_mm,
        base_only,
        &out_path,
    ) {
        Ok(()) => ImfaceStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Score a reconstructed OBJ mesh against a ground-truth OBJ mesh with
/// `samples` surface points per mesh and an F-score threshold of `tau_mm`.
///
/// # Safety
/// `pred_path` and `gt_path` must be nul-terminated strings; `out` must be
/// valid for one [`ImfaceMetrics`] write.
#[no_mangle]
pub unsafe extern "C" fn imface_metrics_obj(
    pred_path: *const c_char,
    gt_path: *const c_char,
    tau_mm: f64,
    samples: usize,
    abs_normals: bool,
    seed: u64,
    out: *mut ImfaceMetrics,
) -> ImfaceStatus {
    if out.is_null() {
        return null_argument("out");
    }
    let pred_path = match path_arg(pred_path, "pred_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let gt_path = match path_arg(gt_path, "gt_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let run = || -> Result<ImfaceMetrics, ImfaceError> {
        let pred = imface::geom::mesh::read_obj(&pred_path)?;
        let gt = imface::geom::mesh::read_obj(&gt_path)?;
        let report = evaluate_meshes(
            &pred,
            &gt,
            &MetricOptions {
                n_samples: samples,
                tau_mm,
                abs_normals,
                seed,
            },
        )?;
        Ok(ImfaceMetrics {
            chamfer_mm: report.chamfer_mm,
            fscore_pct: report.fscore_pct,
            tau_mm: report.tau_mm,
            normal_consistency: report.normal_consistency,
        })
    };
    match run() {
        Ok(metrics) => {
            *out = metrics;
            ImfaceStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use imface::geom::procrustes::canonical_landmarks;
    use imface::model::ModelConfig;
    use std::ffi::CString;
    use std::ptr;

    fn tiny_checkpoint(dir: &Path) -> ImFaceModel {
        let config = ModelConfig {
            k: 5,
            z_dim: 4,
            region_hidden: 10,
            detail_hidden: 10,
            fusion_hidden: 6,
            landmark_hidden: 8,
            n_freq: 2,
            w0_deform: 30.0,
            w0_detail: 60.0,
            sigma_att_mm: 5.0,
            scale_mm: 100.0,
        };
        let mut model = ImFaceModel::init(&config, 11).unwrap();
        model.set_template_landmarks(&canonical_landmarks()).unwrap();
        model.save(&dir.join("model.bin")).unwrap();
        model
    }

    fn c_path(p: &Path) -> CString {
        CString::new(p.to_str().unwrap()).unwrap()
    }

    #[test]
    fn load_eval_and_free_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_checkpoint(dir.path());

        let mut handle: *mut ImfaceModelHandle = ptr::null_mut();
        let status = unsafe { imface_model_load(c_path(dir.path()).as_ptr(), &mut handle) };
        assert_eq!(status, ImfaceStatus::Ok);
        assert_eq!(unsafe { imface_model_z_dim(handle) }, 4);
        assert_eq!(unsafe { imface_model_landmark_count(handle) }, 5);

        let codes = LatentCodes {
            z_exp: vec![0.05, -0.02, 0.01, 0.0],
            z_id: vec![-0.03, 0.04, 0.0, 0.02],
            z_detail: vec![0.01, 0.01, -0.01, 0.0],
        };
        let points = [[1.0, 2.0, 35.0], [-20.0, 4.0, 18.0], [8.0, -9.0, 40.0]];
        let flat: Vec<f64> = points.iter().flatten().copied().collect();

        let mut got = vec![0.0; points.len()];
        let status = unsafe {
            imface_model_eval_sdf(
                handle,
                codes.z_exp.as_ptr(),
                codes.z_id.as_ptr(),
                codes.z_detail.as_ptr(),
                flat.as_ptr(),
                points.len(),
                false,
                got.as_mut_ptr(),
            )
        };
        assert_eq!(status, ImfaceStatus::Ok);
        assert_eq!(got, model.eval_full_sdf(&codes, &points).unwrap());

        let mut warped = vec![0.0; 3 * points.len()];
        let status = unsafe {
            imface_model_eval_exp_deform(
                handle,
                codes.z_exp.as_ptr(),
                codes.z_id.as_ptr(),
                codes.z_detail.as_ptr(),
                flat.as_ptr(),
                points.len(),
                warped.as_mut_ptr(),
            )
        };
        assert_eq!(status, ImfaceStatus::Ok);
        let direct: Vec<f64> = model
            .eval_exp_deform(&codes, &points)
            .unwrap()
            .iter()
            .flatten()
            .copied()
            .collect();
        assert_eq!(warped, direct);

        unsafe { imface_model_free(handle) };
    }

    #[test]
    fn missing_checkpoints_and_null_arguments_report_errors() {
        let mut handle: *mut ImfaceModelHandle = ptr::null_mut();
        let missing = CString::new("/definitely/not/here").unwrap();
        let status = unsafe { imface_model_load(missing.as_ptr(), &mut handle) };
        assert_eq!(status, ImfaceStatus::Io);
        let msg = unsafe { CStr::from_ptr(imface_last_error()) };
        assert!(!msg.to_bytes().is_empty());

        let status = unsafe { imface_model_load(ptr::null(), &mut handle) };
        assert_eq!(status, ImfaceStatus::NullArgument);

        assert_eq!(unsafe { imface_model_z_dim(ptr::null()) }, 0);
        unsafe { imface_model_free(ptr::null_mut()) };
    }

    #[test]
    fn template_reconstruction_writes_a_mesh_and_metrics_score_it() {
        let dir = tempfile::tempdir().unwrap();
        tiny_checkpoint(dir.path());

        let mut handle: *mut ImfaceModelHandle = ptr::null_mut();
        unsafe { imface_model_load(c_path(dir.path()).as_ptr(), &mut handle) };

        let obj = dir.path().join("template.obj");
        let status = unsafe {
            imface_model_reconstruct_obj(
                handle,
                ptr::null(),
                ptr::null(),
                ptr::null(),
                24,
                100.0,
                false,
                c_path(&obj).as_ptr(),
            )
        };
        assert_eq!(status, ImfaceStatus::Ok);
        let mesh = imface::geom::mesh::read_obj(&obj).unwrap();
        assert!(!mesh.faces.is_empty());

        let mut metrics = ImfaceMetrics {
            chamfer_mm: -1.0,
            fscore_pct: -1.0,
            tau_mm: 0.0,
            normal_consistency: -2.0,
        };
        let status = unsafe {
            imface_metrics_obj(
                c_path(&obj).as_ptr(),
                c_path(&obj).as_ptr(),
                1.0,
                2000,
                false,
                0,
                &mut metrics,
            )
        };
        assert_eq!(status, ImfaceStatus::Ok);
        // Self-comparison is not exactly zero (the two surfaces are sampled
        // independently), but it must match the library call bit for bit.
        let direct = evaluate_meshes(
            &mesh,
            &mesh,
            &MetricOptions {
                n_samples: 2000,
                tau_mm: 1.0,
                abs_normals: false,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(metrics.chamfer_mm, direct.chamfer_mm);
        assert_eq!(metrics.fscore_pct, direct.fscore_pct);
        assert_eq!(metrics.tau_mm, direct.tau_mm);
        assert_eq!(metrics.normal_consistency, direct.normal_consistency);
        assert!(metrics.chamfer_mm.is_finite() && metrics.chamfer_mm >= 0.0);

        unsafe { imface_model_free(handle) };
    }
}
