//! The composed face model.
//!
//! Geometry flows through three spaces: an expression warp moves query
//! points into a neutral identity space, an identity warp moves them onto a
//! shared template and adds a scalar residual to the field value, and a
//! static template net supplies the signed distance there. A fourth block
//! predicts a displacement along the base field's own gradient that sharpens
//! the reconstructed surface near the zero level set.
//!
//! The two warps and the displacement field are region-blended nets whose
//! region parameters are produced per evaluation by latent-conditioned
//! generators; the gating nets, the template nets, and the landmark heads
//! are ordinary trainable tensors. Everything lives in one flat name → tensor
//! map so checkpoints, optimizer state, and tape registration stay in sync.
//!
//! All public inputs and outputs are in millimetres; coordinates are divided
//! by `scale_mm` before they reach any net and field values are scaled back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, init_mlp, MlpParams, NodeId, Tape, Tensor};
use crate::error::ImfaceError;
use crate::fields::{
    blend_deform, blend_field, hyper_generate, init_hypernet, predict_landmarks,
    zero_output_columns, BlockOutput, BlockParams, BlockSpec, HyperNetParams, HyperNetSpec,
    LandmarkNetSpec,
};
use crate::seeds;

/// Points per evaluation tape; bounds peak graph memory during inference.
const EVAL_CHUNK: usize = 4096;

/// Below this base-gradient norm the displacement direction is undefined and
/// the detail correction is skipped for that point.
pub const GRAD_NORM_EPS: f64 = 1e-8;

/// Attenuation factor for a field value `s_mm`: exp(-(s/sigma)^2). Equals 1
/// on the zero level set, is even in `s_mm`, and decays monotonically in
/// |s_mm| so displacements far from the surface vanish.
pub fn attenuation(s_mm: f64, sigma_mm: f64) -> f64 {
    let t = s_mm * (1.0 / sigma_mm);
    (-(t * t)).exp()
}

/// Widths and scales that fix every tensor shape in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of blended regions (= landmark anchors) in every block.
    pub k: usize,
    /// Width of each of the three latent codes.
    pub z_dim: usize,
    /// Hidden width of the warp and template region nets.
    pub region_hidden: usize,
    /// Hidden width of the displacement region nets.
    pub detail_hidden: usize,
    /// Hidden width of the gating nets.
    pub fusion_hidden: usize,
    /// Hidden width of the landmark heads.
    pub landmark_hidden: usize,
    /// Positional-encoding frequency count for region-net inputs.
    pub n_freq: usize,
    /// First-layer sine frequency of the warp and template nets.
    pub w0_deform: f64,
    /// First-layer sine frequency of the displacement nets.
    pub w0_detail: f64,
    /// Attenuation length scale in millimetres.
    pub sigma_att_mm: f64,
    /// Millimetres per model unit.
    pub scale_mm: f64,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn paper() -> ModelConfig {
        ModelConfig {
            k: 5,
            z_dim: 160,
            region_hidden: 128,
            detail_hidden: 256,
            fusion_hidden: 128,
            landmark_hidden: 256,
            n_freq: 6,
            w0_deform: 30.0,
            w0_detail: 60.0,
            sigma_att_mm: 5.0,
            scale_mm: 100.0,
        }
    }

    /// Shrunk configuration that trains in minutes on one CPU core.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            k: 5,
            z_dim: 32,
            region_hidden: 32,
            detail_hidden: 64,
            fusion_hidden: 32,
            landmark_hidden: 64,
            n_freq: 4,
            w0_deform: 30.0,
            w0_detail: 60.0,
            sigma_att_mm: 5.0,
            scale_mm: 100.0,
        }
    }

    pub fn validate(&self) -> Result<(), ImfaceError> {
        let positive = [
            ("k", self.k),
            ("z_dim", self.z_dim),
            ("region_hidden", self.region_hidden),
            ("detail_hidden", self.detail_hidden),
            ("fusion_hidden", self.fusion_hidden),
            ("landmark_hidden", self.landmark_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ImfaceError::Config(format!("{name} must be at least 1")));
            }
        }
        let finite_positive = [
            ("w0_deform", self.w0_deform),
            ("w0_detail", self.w0_detail),
            ("sigma_att_mm", self.sigma_att_mm),
            ("scale_mm", self.scale_mm),
        ];
        for (name, v) in finite_positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ImfaceError::Config(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Expression warp block: blended rigid motions.
    pub fn exp_block(&self) -> BlockSpec {
        let mut s = BlockSpec::new(
            self.k,
            self.n_freq,
            self.region_hidden,
            self.w0_deform,
            BlockOutput::Deformation,
        );
        s.fusion_hidden = self.fusion_hidden;
        s
    }

    /// Identity warp block: rigid motions plus the scalar field residual.
    pub fn id_block(&self) -> BlockSpec {
        let mut s = BlockSpec::new(
            self.k,
            self.n_freq,
            self.region_hidden,
            self.w0_deform,
            BlockOutput::DeformationWithResidual,
        );
        s.fusion_hidden = self.fusion_hidden;
        s
    }

    /// Template field block: blended scalars, statically parameterized.
    pub fn temp_block(&self) -> BlockSpec {
        let mut s = BlockSpec::new(
            self.k,
            self.n_freq,
            self.region_hidden,
            self.w0_deform,
            BlockOutput::Scalar,
        );
        s.fusion_hidden = self.fusion_hidden;
        s
    }

    /// Displacement block: blended scalars at a higher sine frequency.
    pub fn detail_block(&self) -> BlockSpec {
        let mut s = BlockSpec::new(
            self.k,
            self.n_freq,
            self.detail_hidden,
            self.w0_detail,
            BlockOutput::Scalar,
        );
        s.fusion_hidden = self.fusion_hidden;
        s
    }

    pub fn exp_hyper(&self) -> HyperNetSpec {
        HyperNetSpec::new(self.z_dim, self.exp_block().region_mlp())
    }

    pub fn id_hyper(&self) -> HyperNetSpec {
        HyperNetSpec::new(self.z_dim, self.id_block().region_mlp())
    }

    pub fn detail_hyper(&self) -> HyperNetSpec {
        HyperNetSpec::new(self.z_dim, self.detail_block().region_mlp())
    }

    /// Landmark head for the expression space, fed both codes.
    pub fn exp_landmark_net(&self) -> LandmarkNetSpec {
        LandmarkNetSpec::new(2 * self.z_dim, self.landmark_hidden, self.k)
    }

    /// Landmark head for the identity space, fed the identity code.
    pub fn id_landmark_net(&self) -> LandmarkNetSpec {
        LandmarkNetSpec::new(self.z_dim, self.landmark_hidden, self.k)
    }
}

/// One subject/scan's latent description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCodes {
    pub z_exp: Vec<f64>,
    pub z_id: Vec<f64>,
    pub z_detail: Vec<f64>,
}

impl LatentCodes {
    pub fn zeros(z_dim: usize) -> LatentCodes {
        LatentCodes {
            z_exp: vec![0.0; z_dim],
            z_id: vec![0.0; z_dim],
            z_detail: vec![0.0; z_dim],
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ImfaceError> {
        let parts = [
            ("z_exp", &self.z_exp),
            ("z_id", &self.z_id),
            ("z_detail", &self.z_detail),
        ];
        for (name, v) in parts {
            if v.len() != config.z_dim {
                return Err(ImfaceError::Config(format!(
                    "{name} has {} entries, model wants {}",
                    v.len(),
                    config.z_dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ImfaceError::Config(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

fn insert_mlp(map: &mut BTreeMap<String, Arc<Tensor>>, prefix: &str, layers: Vec<(Tensor, Tensor)>) {
    for (i, (w, b)) in layers.into_iter().enumerate() {
        map.insert(format!("{prefix}.l{i}.w"), Arc::new(w));
        map.insert(format!("{prefix}.l{i}.b"), Arc::new(b));
    }
}

fn insert_hyper(
    map: &mut BTreeMap<String, Arc<Tensor>>,
    prefix: &str,
    tensors: crate::fields::HyperNetTensors,
) {
    for (i, gens) in tensors.layers.into_iter().enumerate() {
        for (j, (w, b)) in gens.into_iter().enumerate() {
            map.insert(format!("{prefix}.l{i}.g{j}.w"), Arc::new(w));
            map.insert(format!("{prefix}.l{i}.g{j}.b"), Arc::new(b));
        }
    }
}

fn push_mlp_shapes(
    out: &mut BTreeMap<String, (usize, usize)>,
    prefix: &str,
    spec: &crate::diffcore::MlpSpec,
) {
    for i in 0..spec.n_layers() {
        out.insert(
            format!("{prefix}.l{i}.w"),
            (spec.widths[i], spec.widths[i + 1]),
        );
        out.insert(format!("{prefix}.l{i}.b"), (1, spec.widths[i + 1]));
    }
}

fn push_hyper_shapes(
    out: &mut BTreeMap<String, (usize, usize)>,
    prefix: &str,
    spec: &HyperNetSpec,
) {
    for i in 0..spec.n_generators() {
        let gen = spec.generator_mlp(i);
        for j in 0..gen.n_layers() {
            out.insert(
                format!("{prefix}.l{i}.g{j}.w"),
                (gen.widths[j], gen.widths[j + 1]),
            );
            out.insert(format!("{prefix}.l{i}.g{j}.b"), (1, gen.widths[j + 1]));
        }
    }
}

/// Every tensor name the configuration implies, with its (rows, cols).
fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    for n in 0..config.k {
        push_hyper_shapes(&mut out, &format!("exp.hyper.r{n}"), &config.exp_hyper());
        push_hyper_shapes(&mut out, &format!("id.hyper.r{n}"), &config.id_hyper());
        push_hyper_shapes(
            &mut out,
            &format!("detail.hyper.r{n}"),
            &config.detail_hyper(),
        );
        push_mlp_shapes(
            &mut out,
            &format!("temp.region{n}"),
            &config.temp_block().region_mlp(),
        );
    }
    push_mlp_shapes(&mut out, "exp.fusion", &config.exp_block().fusion_mlp());
    push_mlp_shapes(&mut out, "id.fusion", &config.id_block().fusion_mlp());
    push_mlp_shapes(&mut out, "temp.fusion", &config.temp_block().fusion_mlp());
    push_mlp_shapes(
        &mut out,
        "detail.fusion",
        &config.detail_block().fusion_mlp(),
    );
    push_mlp_shapes(&mut out, "lmk.exp", &config.exp_landmark_net().mlp());
    push_mlp_shapes(&mut out, "lmk.id", &config.id_landmark_net().mlp());
    out.insert("template_landmarks".to_string(), (config.k, 3));
    out
}

/// The trainable state: a configuration plus one flat name → tensor map.
/// Tensors are reference-counted so tape registration never copies data.
#[derive(Debug, Clone)]
pub struct ImFaceModel {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ImFaceModel {
    /// Fresh model. The identity warp's residual column and the whole
    /// displacement head start exactly at zero, so a new model's corrected
    /// field coincides with its base field and refinement starts from there.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ImFaceModel, ImfaceError> {
        config.validate()?;
        let mut rng = seeds::stream(seed, "model-init", &[]);
        let mut map = BTreeMap::new();

        let exp_hyper = config.exp_hyper();
        for n in 0..config.k {
            let h = init_hypernet(&exp_hyper, &mut rng);
            insert_hyper(&mut map, &format!("exp.hyper.r{n}"), h);
        }
        insert_mlp(
            &mut map,
            "exp.fusion",
            init_mlp(&config.exp_block().fusion_mlp(), &mut rng),
        );

        let id_hyper = config.id_hyper();
        let id_last = id_hyper.n_generators() - 1;
        for n in 0..config.k {
            let mut h = init_hypernet(&id_hyper, &mut rng);
            zero_output_columns(&mut h, &id_hyper, id_last, 6..7);
            insert_hyper(&mut map, &format!("id.hyper.r{n}"), h);
        }
        insert_mlp(
            &mut map,
            "id.fusion",
            init_mlp(&config.id_block().fusion_mlp(), &mut rng),
        );

        let temp_block = config.temp_block();
        for n in 0..config.k {
            insert_mlp(
                &mut map,
                &format!("temp.region{n}"),
                init_mlp(&temp_block.region_mlp(), &mut rng),
            );
        }
        insert_mlp(
            &mut map,
            "temp.fusion",
            init_mlp(&temp_block.fusion_mlp(), &mut rng),
        );

        let detail_hyper = config.detail_hyper();
        let detail_last = detail_hyper.n_generators() - 1;
        for n in 0..config.k {
            let mut h = init_hypernet(&detail_hyper, &mut rng);
            zero_output_columns(&mut h, &detail_hyper, detail_last, 0..1);
            insert_hyper(&mut map, &format!("detail.hyper.r{n}"), h);
        }
        insert_mlp(
            &mut map,
            "detail.fusion",
            init_mlp(&config.detail_block().fusion_mlp(), &mut rng),
        );

        insert_mlp(
            &mut map,
            "lmk.exp",
            init_mlp(&config.exp_landmark_net().mlp(), &mut rng),
        );
        insert_mlp(
            &mut map,
            "lmk.id",
            init_mlp(&config.id_landmark_net().mlp(), &mut rng),
        );

        map.insert(
            "template_landmarks".to_string(),
            Arc::new(Tensor::zeros(config.k, 3)),
        );

        Ok(ImFaceModel {
            config: config.clone(),
            tensors: map,
        })
    }

    /// Tensor names in sorted order; a tensor's position here is its
    /// parameter key on any tape built from this model.
    pub fn param_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    /// Overwrite the template landmark buffer (millimetre positions).
    pub fn set_template_landmarks(&mut self, mm: &[[f64; 3]]) -> Result<(), ImfaceError> {
        if mm.len() != self.config.k {
            return Err(ImfaceError::Config(format!(
                "got {} template landmarks, model wants {}",
                mm.len(),
                self.config.k
            )));
        }
        if mm.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ImfaceError::Config(
                "template landmarks must be finite".to_string(),
            ));
        }
        let mut t = Tensor::from_points(mm);
        for v in &mut t.data {
            *v /= self.config.scale_mm;
        }
        self.tensors
            .insert("template_landmarks".to_string(), Arc::new(t));
        Ok(())
    }

    /// Current template landmark buffer in millimetres.
    pub fn template_landmarks_mm(&self) -> Vec<[f64; 3]> {
        let t = &self.tensors["template_landmarks"];
        t.data
            .chunks_exact(3)
            .map(|r| {
                [
                    r[0] * self.config.scale_mm,
                    r[1] * self.config.scale_mm,
                    r[2] * self.config.scale_mm,
                ]
            })
            .collect()
    }

    fn manifest_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Write the tensor checkpoint at `path` and a JSON manifest with the
    /// configuration next to it (same stem, `.json` extension).
    pub fn save(&self, path: &Path) -> Result<(), ImfaceError> {
        let plain: BTreeMap<String, Tensor> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), (**v).clone()))
            .collect();
        checkpoint::save_tensors(path, &plain)?;
        checkpoint::save_json(&Self::manifest_path(path), &self.config)
    }

    /// Load a checkpoint and its manifest, verifying that the stored tensor
    /// set matches the shapes the manifest implies.
    pub fn load(path: &Path) -> Result<ImFaceModel, ImfaceError> {
        let config: ModelConfig = checkpoint::load_json(&Self::manifest_path(path))?;
        config.validate()?;
        let plain = checkpoint::load_tensors(path)?;
        let expected = expected_shapes(&config);
        if plain.len() != expected.len() {
            return Err(ImfaceError::Data(format!(
                "checkpoint has {} tensors, manifest implies {}",
                plain.len(),
                expected.len()
            )));
        }
        for (name, (rows, cols)) in &expected {
            match plain.get(name) {
                None => {
                    return Err(ImfaceError::Data(format!(
                        "checkpoint is missing tensor {name}"
                    )))
                }
                Some(t) if t.rows() != *rows || t.cols() != *cols => {
                    return Err(ImfaceError::Data(format!(
                        "tensor {name} is {}x{}, manifest implies {rows}x{cols}",
                        t.rows(),
                        t.cols()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(ImFaceModel {
            config,
            tensors: plain
                .into_iter()
                .map(|(k, v)| (k, Arc::new(v)))
                .collect(),
        })
    }

    fn run_chunks<T, F>(&self, codes: &LatentCodes, pts: &[[f64; 3]], chunk: usize, op: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&ModelGraph, &mut Tape, NodeId) -> Vec<T> + Sync,
    {
        let groups: Vec<Vec<T>> = pts
            .par_chunks(chunk.max(1))
            .map(|part| {
                let mut tape = Tape::new();
                let nodes = CodeNodes {
                    z_exp: tape.input(Tensor::row_vec(&codes.z_exp)),
                    z_id: tape.input(Tensor::row_vec(&codes.z_id)),
                    z_detail: tape.input(Tensor::row_vec(&codes.z_detail)),
                };
                let graph = ModelGraph::build(&mut tape, self, nodes);
                let x = tape.input(Tensor::from_points(part));
                op(&graph, &mut tape, x)
            })
            .collect();
        groups.into_iter().flatten().collect()
    }

    /// Base field values at `pts` (millimetres).
    pub fn eval_base_sdf(
        &self,
        codes: &LatentCodes,
        pts: &[[f64; 3]],
    ) -> Result<Vec<f64>, ImfaceError> {
        codes.validate(&self.config)?;
        Ok(self.run_chunks(codes, pts, EVAL_CHUNK, |g, tape, x| {
            let s = g.base_sdf(tape, x);
            tape.value(s).data.clone()
        }))
    }

    /// Corrected field values at `pts`. Points whose base gradient vanishes
    /// keep their uncorrected value; how many were skipped is logged.
    pub fn eval_full_sdf(
        &self,
        codes: &LatentCodes,
        pts: &[[f64; 3]],
    ) -> Result<Vec<f64>, ImfaceError> {
        codes.validate(&self.config)?;
        Ok(self.run_chunks(codes, pts, EVAL_CHUNK, |g, tape, x| {
            let c = g.corrected_point(tape, x);
            let s = g.base_chain(tape, c.point).value;
            let skipped = tape
                .value(c.gradient_norm)
                .data
                .iter()
                .filter(|&&v| v < GRAD_NORM_EPS)
                .count();
            if skipped > 0 {
                log::warn!(
                    "skipped the detail correction for {skipped} points with vanishing base gradients"
                );
            }
            tape.value(s).data.clone()
        }))
    }

    /// Template field values at `pts`; needs no codes.
    pub fn eval_template_sdf(&self, pts: &[[f64; 3]]) -> Vec<f64> {
        let codes = LatentCodes::zeros(self.config.z_dim);
        self.run_chunks(&codes, pts, EVAL_CHUNK, |g, tape, x| {
            let s = g.template_sdf(tape, x);
            tape.value(s).data.clone()
        })
    }

    /// Expression-space points warped into the identity space.
    pub fn eval_exp_deform(
        &self,
        codes: &LatentCodes,
        pts: &[[f64; 3]],
    ) -> Result<Vec<[f64; 3]>, ImfaceError> {
        codes.validate(&self.config)?;
        Ok(self.run_chunks(codes, pts, EVAL_CHUNK, |g, tape, x| {
            let p = g.exp_deform(tape, x);
            tensor_rows3(tape.value(p))
        }))
    }

    /// Scan-space points mapped all the way to the template space.
    pub fn eval_correspondence(
        &self,
        codes: &LatentCodes,
        pts: &[[f64; 3]],
    ) -> Result<Vec<[f64; 3]>, ImfaceError> {
        codes.validate(&self.config)?;
        Ok(self.run_chunks(codes, pts, EVAL_CHUNK, |g, tape, x| {
            let p = g.template_correspondence(tape, x);
            tensor_rows3(tape.value(p))
        }))
    }

    /// Displacement amplitudes at template-space points (millimetres).
    pub fn eval_detail_displacement(
        &self,
        codes: &LatentCodes,
        template_pts: &[[f64; 3]],
    ) -> Result<Vec<f64>, ImfaceError> {
        codes.validate(&self.config)?;
        Ok(self.run_chunks(codes, template_pts, EVAL_CHUNK, |g, tape, x| {
            let d = g.detail_displacement(tape, x);
            tape.value(d).data.clone()
        }))
    }

    /// Predicted landmark sets (expression space, identity space) in mm.
    pub fn eval_landmarks(
        &self,
        codes: &LatentCodes,
    ) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>), ImfaceError> {
        codes.validate(&self.config)?;
        let mut tape = Tape::new();
        let nodes = CodeNodes {
            z_exp: tape.input(Tensor::row_vec(&codes.z_exp)),
            z_id: tape.input(Tensor::row_vec(&codes.z_id)),
            z_detail: tape.input(Tensor::row_vec(&codes.z_detail)),
        };
        let graph = ModelGraph::build(&mut tape, self, nodes);
        let le = graph.exp_landmarks_mm(&mut tape);
        let li = graph.id_landmarks_mm(&mut tape);
        Ok((tensor_rows3(tape.value(le)), tensor_rows3(tape.value(li))))
    }
}

fn tensor_rows3(t: &Tensor) -> Vec<[f64; 3]> {
    assert_eq!(t.cols(), 3);
    t.data.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect()
}

/// Latent code nodes the caller placed on the tape (inputs for inference,
/// registered parameters during training).
#[derive(Debug, Clone, Copy)]
pub struct CodeNodes {
    pub z_exp: NodeId,
    pub z_id: NodeId,
    pub z_detail: NodeId,
}

/// The intermediate nodes of one base-field evaluation.
#[derive(Debug, Clone, Copy)]
pub struct BaseChain {
    /// Points after the expression warp (identity space, mm).
    pub identity_points: NodeId,
    /// Points after the identity warp (template space, mm).
    pub template_points: NodeId,
    /// Scalar field residual from the identity warp (n x 1, mm).
    pub residual: NodeId,
    /// Template field at the warped points (n x 1, mm).
    pub template_value: NodeId,
    /// Base field: template value plus residual (n x 1, mm).
    pub value: NodeId,
}

/// The pieces of one displacement correction.
#[derive(Debug, Clone, Copy)]
pub struct Correction {
    /// The base-field evaluation at the original points.
    pub base: BaseChain,
    /// Corrected points (n x 3, mm).
    pub point: NodeId,
    /// Raw displacement amplitude at the warped points (n x 1, mm).
    pub displacement: NodeId,
    /// Attenuation factor per point (n x 1).
    pub attenuation: NodeId,
    /// Base-gradient norms per point; rows below `GRAD_NORM_EPS` had their
    /// correction zeroed.
    pub gradient_norm: NodeId,
}

struct Registrar<'m> {
    tensors: &'m BTreeMap<String, Arc<Tensor>>,
    keys: BTreeMap<&'m str, usize>,
}

impl<'m> Registrar<'m> {
    fn new(model: &'m ImFaceModel) -> Registrar<'m> {
        let keys = model
            .tensors
            .keys()
            .enumerate()
            .map(|(i, name)| (name.as_str(), i))
            .collect();
        Registrar {
            tensors: &model.tensors,
            keys,
        }
    }

    fn node(&self, tape: &mut Tape, name: &str) -> NodeId {
        let key = *self
            .keys
            .get(name)
            .unwrap_or_else(|| panic!("model tensor {name} missing"));
        tape.param(key, Arc::clone(&self.tensors[name]))
    }

    fn mlp(&self, tape: &mut Tape, prefix: &str, n_layers: usize) -> MlpParams {
        MlpParams {
            layers: (0..n_layers)
                .map(|i| {
                    (
                        self.node(tape, &format!("{prefix}.l{i}.w")),
                        self.node(tape, &format!("{prefix}.l{i}.b")),
                    )
                })
                .collect(),
        }
    }

    fn hyper(&self, tape: &mut Tape, prefix: &str, spec: &HyperNetSpec) -> HyperNetParams {
        HyperNetParams {
            layers: (0..spec.n_generators())
                .map(|i| {
                    let gen = spec.generator_mlp(i);
                    MlpParams {
                        layers: (0..gen.n_layers())
                            .map(|j| {
                                (
                                    self.node(tape, &format!("{prefix}.l{i}.g{j}.w")),
                                    self.node(tape, &format!("{prefix}.l{i}.g{j}.b")),
                                )
                            })
                            .collect(),
                    }
                })
                .collect(),
        }
    }
}

/// One evaluation's view of the model: generated and static parameter nodes
/// plus the landmark anchors, ready to run any of the field operations.
/// Model tensors register under keys equal to their `param_names` index, so
/// gradient maps translate back to names directly.
pub struct ModelGraph {
    exp_spec: BlockSpec,
    id_spec: BlockSpec,
    temp_spec: BlockSpec,
    detail_spec: BlockSpec,
    exp_params: BlockParams,
    id_params: BlockParams,
    temp_params: BlockParams,
    detail_params: BlockParams,
    /// Landmark anchors in model units (k x 3 each).
    exp_landmarks: NodeId,
    id_landmarks: NodeId,
    template_landmarks: NodeId,
    scale: f64,
    sigma_att: f64,
}

impl ModelGraph {
    pub fn build(tape: &mut Tape, model: &ImFaceModel, codes: CodeNodes) -> ModelGraph {
        let cfg = &model.config;
        let reg = Registrar::new(model);

        let exp_spec = cfg.exp_block();
        let id_spec = cfg.id_block();
        let temp_spec = cfg.temp_block();
        let detail_spec = cfg.detail_block();

        let exp_hyper = cfg.exp_hyper();
        let exp_params = BlockParams {
            regions: (0..cfg.k)
                .map(|n| {
                    let hp = reg.hyper(tape, &format!("exp.hyper.r{n}"), &exp_hyper);
                    hyper_generate(tape, &exp_hyper, &hp, codes.z_exp)
                })
                .collect(),
            fusion: reg.mlp(tape, "exp.fusion", exp_spec.fusion_mlp().n_layers()),
        };

        let id_hyper = cfg.id_hyper();
        let id_params = BlockParams {
            regions: (0..cfg.k)
                .map(|n| {
                    let hp = reg.hyper(tape, &format!("id.hyper.r{n}"), &id_hyper);
                    hyper_generate(tape, &id_hyper, &hp, codes.z_id)
                })
                .collect(),
            fusion: reg.mlp(tape, "id.fusion", id_spec.fusion_mlp().n_layers()),
        };

        let temp_params = BlockParams {
            regions: (0..cfg.k)
                .map(|n| {
                    reg.mlp(
                        tape,
                        &format!("temp.region{n}"),
                        temp_spec.region_mlp().n_layers(),
                    )
                })
                .collect(),
            fusion: reg.mlp(tape, "temp.fusion", temp_spec.fusion_mlp().n_layers()),
        };

        let detail_hyper = cfg.detail_hyper();
        let detail_params = BlockParams {
            regions: (0..cfg.k)
                .map(|n| {
                    let hp = reg.hyper(tape, &format!("detail.hyper.r{n}"), &detail_hyper);
                    hyper_generate(tape, &detail_hyper, &hp, codes.z_detail)
                })
                .collect(),
            fusion: reg.mlp(tape, "detail.fusion", detail_spec.fusion_mlp().n_layers()),
        };

        let lmk_exp_spec = cfg.exp_landmark_net();
        let lmk_exp = reg.mlp(tape, "lmk.exp", lmk_exp_spec.mlp().n_layers());
        let both = tape.concat_cols(vec![codes.z_exp, codes.z_id]);
        let exp_landmarks = predict_landmarks(tape, &lmk_exp_spec, &lmk_exp, both);

        let lmk_id_spec = cfg.id_landmark_net();
        let lmk_id = reg.mlp(tape, "lmk.id", lmk_id_spec.mlp().n_layers());
        let id_landmarks = predict_landmarks(tape, &lmk_id_spec, &lmk_id, codes.z_id);

        let template_landmarks = reg.node(tape, "template_landmarks");

        ModelGraph {
            exp_spec,
            id_spec,
            temp_spec,
            detail_spec,
            exp_params,
            id_params,
            temp_params,
            detail_params,
            exp_landmarks,
            id_landmarks,
            template_landmarks,
            scale: cfg.scale_mm,
            sigma_att: cfg.sigma_att_mm,
        }
    }

    fn to_units(&self, tape: &mut Tape, mm: NodeId) -> NodeId {
        tape.mul_scalar(mm, 1.0 / self.scale)
    }

    fn to_mm(&self, tape: &mut Tape, units: NodeId) -> NodeId {
        tape.mul_scalar(units, self.scale)
    }

    /// Predicted expression-space landmark anchors (k x 3, mm).
    pub fn exp_landmarks_mm(&self, tape: &mut Tape) -> NodeId {
        self.to_mm(tape, self.exp_landmarks)
    }

    /// Predicted identity-space landmark anchors (k x 3, mm).
    pub fn id_landmarks_mm(&self, tape: &mut Tape) -> NodeId {
        self.to_mm(tape, self.id_landmarks)
    }

    /// Template landmark buffer (k x 3, mm).
    pub fn template_landmarks_mm(&self, tape: &mut Tape) -> NodeId {
        self.to_mm(tape, self.template_landmarks)
    }

    /// Warp expression-space points (n x 3, mm) into the identity space.
    pub fn exp_deform(&self, tape: &mut Tape, x_mm: NodeId) -> NodeId {
        let xu = self.to_units(tape, x_mm);
        let (pu, _) = blend_deform(tape, &self.exp_spec, &self.exp_params, xu, self.exp_landmarks);
        self.to_mm(tape, pu)
    }

    /// Warp identity-space points into the template space; also returns the
    /// per-point scalar field residual (n x 1, mm).
    pub fn id_deform(&self, tape: &mut Tape, x_mm: NodeId) -> (NodeId, NodeId) {
        let xu = self.to_units(tape, x_mm);
        let (pu, delta) =
            blend_deform(tape, &self.id_spec, &self.id_params, xu, self.id_landmarks);
        let delta = delta.expect("identity block carries a residual column");
        (self.to_mm(tape, pu), self.to_mm(tape, delta))
    }

    /// Template field at template-space points (n x 1, mm).
    pub fn template_sdf(&self, tape: &mut Tape, x_mm: NodeId) -> NodeId {
        let xu = self.to_units(tape, x_mm);
        let s = blend_field(
            tape,
            &self.temp_spec,
            &self.temp_params,
            xu,
            self.template_landmarks,
        );
        self.to_mm(tape, s)
    }

    /// Run both warps and the template field; exposes every intermediate the
    /// losses need.
    pub fn base_chain(&self, tape: &mut Tape, x_mm: NodeId) -> BaseChain {
        let identity_points = self.exp_deform(tape, x_mm);
        let (template_points, residual) = self.id_deform(tape, identity_points);
        let template_value = self.template_sdf(tape, template_points);
        let value = tape.add(template_value, residual);
        BaseChain {
            identity_points,
            template_points,
            residual,
            template_value,
            value,
        }
    }

    /// Base field at expression-space points (n x 1, mm).
    pub fn base_sdf(&self, tape: &mut Tape, x_mm: NodeId) -> NodeId {
        self.base_chain(tape, x_mm).value
    }

    /// Field of the identity space itself: identity warp plus template field
    /// plus residual, skipping the expression warp.
    pub fn identity_sdf(&self, tape: &mut Tape, x_mm: NodeId) -> NodeId {
        let (p, delta) = self.id_deform(tape, x_mm);
        let s = self.template_sdf(tape, p);
        tape.add(s, delta)
    }

    /// Displacement amplitude at template-space points (n x 1, mm).
    pub fn detail_displacement(&self, tape: &mut Tape, template_mm: NodeId) -> NodeId {
        let xu = self.to_units(tape, template_mm);
        let d = blend_field(
            tape,
            &self.detail_spec,
            &self.detail_params,
            xu,
            self.template_landmarks,
        );
        self.to_mm(tape, d)
    }

    /// Attenuation factor for base-field values (n x 1).
    pub fn attenuation_node(&self, tape: &mut Tape, s_mm: NodeId) -> NodeId {
        let t = tape.mul_scalar(s_mm, 1.0 / self.sigma_att);
        let t2 = tape.mul(t, t);
        let nt = tape.neg(t2);
        tape.exp(nt)
    }

    /// Move each point along the base field's own gradient direction by the
    /// attenuated displacement amplitude. Rows whose gradient norm falls
    /// below `GRAD_NORM_EPS` keep their original coordinates; a second-order
    /// pass through such a row would divide by that zero norm, which live
    /// sine nets do not produce.
    pub fn corrected_point(&self, tape: &mut Tape, x_mm: NodeId) -> Correction {
        let chain = self.base_chain(tape, x_mm);
        let displacement = self.detail_displacement(tape, chain.template_points);
        let attenuation = self.attenuation_node(tape, chain.value);

        let grad = tape.input_gradient(chain.value, x_mm);
        let gradient_norm = tape.row_norm(grad);
        let shifted = tape.add_scalar(gradient_norm, -GRAD_NORM_EPS);
        let mask = tape.step(shifted);
        // Masked rows get a unit denominator so the zeroed offset stays finite.
        let neg_mask = tape.neg(mask);
        let pad = tape.add_scalar(neg_mask, 1.0);
        let denom = tape.add(gradient_norm, pad);
        let inv = tape.recip(denom);
        let dir = tape.mul_col(grad, inv);

        let amp = tape.mul(attenuation, displacement);
        let amp = tape.mul(amp, mask);
        let offset = tape.mul_col(dir, amp);
        let point = tape.add(x_mm, offset);
        Correction {
            base: chain,
            point,
            displacement,
            attenuation,
            gradient_norm,
        }
    }

    /// Corrected field: the base chain re-run at the corrected points.
    pub fn full_sdf(&self, tape: &mut Tape, x_mm: NodeId) -> NodeId {
        let c = self.corrected_point(tape, x_mm);
        self.base_chain(tape, c.point).value
    }

    /// Template-space image of expression-space points: the two warps
    /// composed, nothing else.
    pub fn template_correspondence(&self, tape: &mut Tape, x_mm: NodeId) -> NodeId {
        let p = self.exp_deform(tape, x_mm);
        self.id_deform(tape, p).0
    }
}
