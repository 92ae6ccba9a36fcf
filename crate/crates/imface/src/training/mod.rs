//! Two-stage auto-decoder training: joint optimization of network
//! parameters and per-scan embeddings, then a detail pass that only moves
//! the displacement hypernetwork and its codes, plus test-time latent
//! fitting against a frozen model.
//!
//! Every random choice (batch order, point subsets, embedding init) is a
//! pure function of the master seed and the schedule position, so a resumed
//! run retraces an uninterrupted one bitwise.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, checkpoint, AdamConfig, OptimizerState, Tape, Tensor};
use crate::geom::{SampleTriplet, ScanRecord};
use crate::losses::{
    stage1_scan_loss, stage2_scan_loss, stage_blend_kappa, LossWeights, ScanSample,
};
use crate::model::{CodeNodes, ImFaceModel, LatentCodes, ModelConfig, ModelGraph};
use crate::seeds;
use crate::ImfaceError;

/// Bumped whenever the on-disk checkpoint layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// The standard deviation embeddings are drawn with; small so the Gaussian
/// prior starts near its optimum.
const EMBED_INIT_STD: f64 = 0.01;

/// Everything a training run needs beyond the dataset itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Scans per optimization step.
    pub batch_scans: usize,
    /// Field samples drawn from each scan per step.
    pub points_per_scan: usize,
    /// Dense correspondence points per batch, split evenly across its scans.
    pub dense_points: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of training progress at which the detail stage begins.
    pub t_m: f64,
    pub weights: LossWeights,
    /// Weight the blended objective exactly as the source schedule writes
    /// it (full detail weight at the stage boundary, decaying) instead of
    /// the default, which ramps the detail objective in.
    pub literal_kappa: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            model: ModelConfig::desk(),
            epochs: 300,
            batch_scans: 4,
            points_per_scan: 512,
            dense_points: 512,
            lr: 1e-4,
            seed: 7,
            t_m: 0.5,
            weights: LossWeights::default(),
            literal_kappa: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ImfaceError> {
        self.model.validate()?;
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_scans", self.batch_scans),
            ("points_per_scan", self.points_per_scan),
            ("dense_points", self.dense_points),
        ] {
            if v == 0 {
                return Err(ImfaceError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ImfaceError::Config(format!(
                "learning rate {} must be positive and finite",
                self.lr
            )));
        }
        if !(self.t_m > 0.0 && self.t_m < 1.0) {
            return Err(ImfaceError::Config(format!(
                "t_m {} must lie strictly inside (0, 1)",
                self.t_m
            )));
        }
        for (name, v) in self.weights.fields() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ImfaceError::Config(format!(
                    "loss weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Learnable latent codes: one expression and one detail code per scan, one
/// identity code shared by all scans of the same identity.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    /// (identity, expression) per scan, in dataset order.
    pub scans: Vec<(String, String)>,
    /// Unique identities, sorted.
    pub identities: Vec<String>,
    /// Identity slot for each scan.
    pub id_of_scan: Vec<usize>,
    pub z_exp: Vec<Arc<Tensor>>,
    pub z_id: Vec<Arc<Tensor>>,
    pub z_detail: Vec<Arc<Tensor>>,
}

impl EmbeddingTable {
    pub fn init(records: &[ScanRecord], z_dim: usize, seed: u64) -> EmbeddingTable {
        let identities: Vec<String> = records
            .iter()
            .map(|r| r.identity.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let id_of_scan = records
            .iter()
            .map(|r| identities.binary_search(&r.identity).unwrap())
            .collect();
        let draw = |kind: u64, slot: usize| -> Arc<Tensor> {
            let mut rng = seeds::stream(seed, "embeddings", &[kind, slot as u64]);
            let normal = Normal::new(0.0, EMBED_INIT_STD).unwrap();
            Arc::new(Tensor::row_vec(
                &(0..z_dim).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>(),
            ))
        };
        EmbeddingTable {
            scans: records
                .iter()
                .map(|r| (r.identity.clone(), r.expression.clone()))
                .collect(),
            z_exp: (0..records.len()).map(|i| draw(0, i)).collect(),
            z_id: (0..identities.len()).map(|j| draw(1, j)).collect(),
            z_detail: (0..records.len()).map(|i| draw(2, i)).collect(),
            identities,
            id_of_scan,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.z_exp.first().map_or(0, |t| t.len())
    }

    /// The codes attached to one scan.
    pub fn codes(&self, scan: usize) -> LatentCodes {
        LatentCodes {
            z_exp: self.z_exp[scan].data.clone(),
            z_id: self.z_id[self.id_of_scan[scan]].data.clone(),
            z_detail: self.z_detail[scan].data.clone(),
        }
    }

    /// Mean code over the table, the initialization for test-time fitting.
    pub fn mean_codes(&self) -> LatentCodes {
        fn mean(vs: &[Arc<Tensor>]) -> Vec<f64> {
            let n = vs.len().max(1) as f64;
            let dim = vs.first().map_or(0, |t| t.len());
            let mut out = vec![0.0; dim];
            for v in vs {
                for (o, x) in out.iter_mut().zip(&v.data) {
                    *o += x / n;
                }
            }
            out
        }
        LatentCodes {
            z_exp: mean(&self.z_exp),
            z_id: mean(&self.z_id),
            z_detail: mean(&self.z_detail),
        }
    }

    fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        for (i, t) in self.z_exp.iter().enumerate() {
            map.insert(format!("exp.{i:05}"), (**t).clone());
        }
        for (j, t) in self.z_id.iter().enumerate() {
            map.insert(format!("id.{j:05}"), (**t).clone());
        }
        for (i, t) in self.z_detail.iter().enumerate() {
            map.insert(format!("detail.{i:05}"), (**t).clone());
        }
        map
    }

    fn from_tensors(
        map: &BTreeMap<String, Tensor>,
        scans: Vec<(String, String)>,
        identities: Vec<String>,
        z_dim: usize,
    ) -> Result<EmbeddingTable, ImfaceError> {
        let fetch = |name: String| -> Result<Arc<Tensor>, ImfaceError> {
            let t = map
                .get(&name)
                .ok_or_else(|| ImfaceError::Data(format!("checkpoint is missing embedding {name}")))?;
            if t.len() != z_dim {
                return Err(ImfaceError::Data(format!(
                    "embedding {name} has width {} but the manifest z_dim is {z_dim}",
                    t.len()
                )));
            }
            Ok(Arc::new(t.clone()))
        };
        let id_of_scan = scans
            .iter()
            .map(|(id, _)| {
                identities.binary_search(id).map_err(|_| {
                    ImfaceError::Data(format!("scan identity {id} is not in the identity list"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EmbeddingTable {
            z_exp: (0..scans.len())
                .map(|i| fetch(format!("exp.{i:05}")))
                .collect::<Result<_, _>>()?,
            z_id: (0..identities.len())
                .map(|j| fetch(format!("id.{j:05}")))
                .collect::<Result<_, _>>()?,
            z_detail: (0..scans.len())
                .map(|i| fetch(format!("detail.{i:05}")))
                .collect::<Result<_, _>>()?,
            scans,
            identities,
            id_of_scan,
        })
    }
}

/// Which objective a step optimizes.
#[derive(Debug, Clone, Copy)]
enum StageBlend {
    /// Base-field objective alone.
    One,
    /// Blend of the base objective (weight `base`) and the corrected-field
    /// objective (weight `detail`); `detail` also scales the learning rate
    /// of the displacement parameter group.
    Two { base: f64, detail: f64 },
}

/// Sampled per-scan inputs for one step, owned so tapes can borrow slices.
struct StepData {
    points: Vec<[f64; 3]>,
    sdf: Vec<f64>,
    normals: Vec<[f64; 3]>,
    dense_scan: Vec<[f64; 3]>,
    dense_neutral: Vec<[f64; 3]>,
    dense_template: Vec<[f64; 3]>,
    landmarks_scan: Vec<[f64; 3]>,
    landmarks_neutral: Vec<[f64; 3]>,
    is_neutral: bool,
}

impl StepData {
    fn view(&self) -> ScanSample<'_> {
        ScanSample {
            points: &self.points,
            sdf: &self.sdf,
            normals: &self.normals,
            dense_scan: &self.dense_scan,
            dense_neutral: &self.dense_neutral,
            dense_template: &self.dense_template,
            landmarks_scan: &self.landmarks_scan,
            landmarks_neutral: &self.landmarks_neutral,
            is_neutral: self.is_neutral,
        }
    }
}

/// `n` indices into `0..len`: a distinct subset when possible, draws with
/// replacement when the pool is smaller than the request.
fn choose(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    if n <= len {
        rand::seq::index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..len)).collect()
    }
}

fn sample_step_data(
    rec: &ScanRecord,
    neutral_landmarks: &[[f64; 3]],
    points_n: usize,
    dense_n: usize,
    seed: u64,
    indices: &[u64],
) -> StepData {
    let mut rng = seeds::stream(seed, "batch-samples", indices);
    let idx = choose(&mut rng, rec.triplets.len(), points_n);
    let mut points = Vec::with_capacity(idx.len());
    let mut sdf = Vec::with_capacity(idx.len());
    let mut normals = Vec::with_capacity(idx.len());
    for &i in &idx {
        let t = &rec.triplets[i];
        points.push(t.point);
        sdf.push(t.sdf);
        normals.push(t.gradient);
    }
    let didx = choose(&mut rng, rec.dense.len(), dense_n);
    StepData {
        points,
        sdf,
        normals,
        dense_scan: didx.iter().map(|&i| rec.dense[i].scan).collect(),
        dense_neutral: didx.iter().map(|&i| rec.dense[i].neutral).collect(),
        dense_template: didx.iter().map(|&i| rec.dense[i].template).collect(),
        landmarks_scan: rec.landmarks.clone(),
        landmarks_neutral: neutral_landmarks.to_vec(),
        is_neutral: rec.is_neutral,
    }
}

/// One scan's contribution to a step: loss values plus raw gradients keyed
/// by tape parameter index.
struct ScanOutput {
    scan: usize,
    terms: Vec<(&'static str, f64)>,
    total: f64,
    grads: Vec<(usize, Arc<Tensor>)>,
}

/// Summed gradients for one step, ready to commit.
#[derive(Default)]
struct BatchAccum {
    model: BTreeMap<usize, Tensor>,
    exp: BTreeMap<usize, Tensor>,
    id: BTreeMap<usize, Tensor>,
    detail: BTreeMap<usize, Tensor>,
}

impl BatchAccum {
    fn add(map: &mut BTreeMap<usize, Tensor>, key: usize, g: &Tensor) {
        match map.get_mut(&key) {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => {
                map.insert(key, g.clone());
            }
        }
    }
}

/// Per-step summary for logging and epoch aggregation.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
    pub kappa: f64,
    /// The effective learning rate of the group this step trains.
    pub lr: f64,
}

/// The serialized part of a checkpoint; tensors live in sibling files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub scans: Vec<(String, String)>,
    pub identities: Vec<String>,
    pub epoch_losses: Vec<f64>,
}

/// Auto-decoder trainer over a preprocessed scan set.
pub struct Trainer<'d> {
    records: &'d [ScanRecord],
    pub config: TrainConfig,
    pub model: ImFaceModel,
    pub table: EmbeddingTable,
    /// The epoch the next `run_epoch` call executes.
    pub next_epoch: usize,
    /// Mean batch loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    adam: AdamConfig,
    opt_model: BTreeMap<String, OptimizerState>,
    opt_exp: Vec<OptimizerState>,
    opt_id: Vec<OptimizerState>,
    opt_detail: Vec<OptimizerState>,
    param_names: Vec<String>,
    /// Landmarks of each identity's neutral scan, by identity slot.
    neutral_landmarks: Vec<Vec<[f64; 3]>>,
    /// Wrapped in a mutex only so the trainer stays shareable with the
    /// batch workers; all writes happen between steps.
    log: Option<std::sync::Mutex<Box<dyn Write + Send>>>,
}

impl std::fmt::Debug for Trainer<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.config)
            .field("next_epoch", &self.next_epoch)
            .field("scans", &self.records.len())
            .finish_non_exhaustive()
    }
}

/// Per-identity neutral landmark targets, plus the dataset checks every
/// training entry point relies on.
fn neutral_landmarks_by_identity(
    records: &[ScanRecord],
    identities: &[String],
    k: usize,
) -> Result<Vec<Vec<[f64; 3]>>, ImfaceError> {
    if records.is_empty() {
        return Err(ImfaceError::Data("the dataset has no scans".into()));
    }
    for rec in records {
        if rec.triplets.is_empty() || rec.dense.is_empty() {
            return Err(ImfaceError::Data(format!(
                "scan {}/{} is missing samples",
                rec.identity, rec.expression
            )));
        }
        if rec.landmarks.len() != k {
            return Err(ImfaceError::Data(format!(
                "scan {}/{} has {} landmarks but the model expects {k}",
                rec.identity,
                rec.expression,
                rec.landmarks.len()
            )));
        }
    }
    identities
        .iter()
        .map(|id| {
            records
                .iter()
                .find(|r| r.is_neutral && &r.identity == id)
                .map(|r| r.landmarks.clone())
                .ok_or_else(|| {
                    ImfaceError::Data(format!("identity {id} has no neutral scan"))
                })
        })
        .collect()
}

impl<'d> Trainer<'d> {
    /// Fresh training state: model initialized from the seed, template
    /// landmarks set to the mean of the identities' neutral landmarks,
    /// embeddings drawn small.
    pub fn new(records: &'d [ScanRecord], config: TrainConfig) -> Result<Trainer<'d>, ImfaceError> {
        config.validate()?;
        let table = EmbeddingTable::init(records, config.model.z_dim, config.seed);
        let neutral_landmarks =
            neutral_landmarks_by_identity(records, &table.identities, config.model.k)?;

        let mut model = ImFaceModel::init(&config.model, config.seed)?;
        let k = config.model.k;
        let mut mean = vec![[0.0f64; 3]; k];
        for lms in &neutral_landmarks {
            for (m, l) in mean.iter_mut().zip(lms) {
                for a in 0..3 {
                    m[a] += l[a] / neutral_landmarks.len() as f64;
                }
            }
        }
        model.set_template_landmarks(&mean)?;

        Ok(Trainer::assemble(records, config, model, table, neutral_landmarks, 0, Vec::new()))
    }

    fn assemble(
        records: &'d [ScanRecord],
        config: TrainConfig,
        model: ImFaceModel,
        table: EmbeddingTable,
        neutral_landmarks: Vec<Vec<[f64; 3]>>,
        next_epoch: usize,
        epoch_losses: Vec<f64>,
    ) -> Trainer<'d> {
        let param_names = model.param_names();
        let opt_model = param_names
            .iter()
            .map(|n| (n.clone(), OptimizerState::like(&model.tensors[n])))
            .collect();
        Trainer {
            records,
            adam: AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            opt_model,
            opt_exp: table.z_exp.iter().map(|t| OptimizerState::like(t)).collect(),
            opt_id: table.z_id.iter().map(|t| OptimizerState::like(t)).collect(),
            opt_detail: table
                .z_detail
                .iter()
                .map(|t| OptimizerState::like(t))
                .collect(),
            config,
            model,
            table,
            next_epoch,
            epoch_losses,
            param_names,
            neutral_landmarks,
            log: None,
        }
    }

    /// Route per-step CSV rows (long format: one row per term) to `w`.
    pub fn attach_log(&mut self, mut w: Box<dyn Write + Send>) -> Result<(), ImfaceError> {
        writeln!(w, "epoch,step,kappa,lr,term,value")
            .map_err(|e| ImfaceError::Io(format!("training log: {e}")))?;
        self.log = Some(std::sync::Mutex::new(w));
        Ok(())
    }

    /// Training progress in [0, 1] at the given epoch.
    pub fn epoch_progress(&self, epoch: usize) -> f64 {
        if self.config.epochs <= 1 {
            0.0
        } else {
            epoch as f64 / (self.config.epochs - 1) as f64
        }
    }

    /// Number of leading epochs that train the base field alone.
    pub fn stage1_epoch_count(&self) -> usize {
        (0..self.config.epochs)
            .find(|&e| self.epoch_progress(e) >= self.config.t_m)
            .unwrap_or(self.config.epochs)
    }

    fn blend_for_epoch(&self, epoch: usize) -> StageBlend {
        let t = self.epoch_progress(epoch);
        if t < self.config.t_m {
            return StageBlend::One;
        }
        let kappa = stage_blend_kappa(t, self.config.t_m);
        if self.config.literal_kappa {
            StageBlend::Two {
                base: 1.0 - kappa,
                detail: kappa,
            }
        } else {
            StageBlend::Two {
                base: kappa,
                detail: 1.0 - kappa,
            }
        }
    }

    /// One scan's forward/backward pass against the current snapshot.
    fn scan_pass(
        &self,
        scan: usize,
        data: &StepData,
        blend: StageBlend,
    ) -> Result<ScanOutput, ImfaceError> {
        let names_len = self.param_names.len();
        let mut tape = Tape::new();
        let codes = CodeNodes {
            z_exp: tape.param(names_len, Arc::clone(&self.table.z_exp[scan])),
            z_id: tape.param(
                names_len + 1,
                Arc::clone(&self.table.z_id[self.table.id_of_scan[scan]]),
            ),
            z_detail: tape.param(names_len + 2, Arc::clone(&self.table.z_detail[scan])),
        };
        let graph = ModelGraph::build(&mut tape, &self.model, codes);
        let sample = data.view();

        let mut terms: Vec<(&'static str, f64)> = Vec::new();
        let total_node = match blend {
            StageBlend::One => {
                let one = stage1_scan_loss(&mut tape, &graph, codes, &sample, &self.config.weights);
                for (name, node) in one.parts() {
                    terms.push((name, tape.value(node).data[0]));
                }
                one.total
            }
            StageBlend::Two { base, detail } => {
                let one = stage1_scan_loss(&mut tape, &graph, codes, &sample, &self.config.weights);
                let two = stage2_scan_loss(&mut tape, &graph, codes, &sample, &self.config.weights);
                for (name, node) in one.parts() {
                    terms.push((name, tape.value(node).data[0]));
                }
                for ((name, node), label) in two.parts().into_iter().zip([
                    "full_sdf",
                    "full_eikonal",
                    "full_embedding",
                ]) {
                    debug_assert!(!name.is_empty());
                    terms.push((label, tape.value(node).data[0]));
                }
                let a = tape.mul_scalar(one.total, base);
                let b = tape.mul_scalar(two.total, detail);
                tape.add(a, b)
            }
        };

        let total = tape.value(total_node).data[0];
        if !total.is_finite() {
            return Err(ImfaceError::Numeric(format!(
                "non-finite loss {total} on scan {}/{}",
                self.records[scan].identity, self.records[scan].expression
            )));
        }
        let adj = tape.backward(total_node, None);
        let grads = tape.param_gradients(&adj);
        Ok(ScanOutput {
            scan,
            terms,
            total,
            grads,
        })
    }

    /// Forward/backward over a batch (scans in parallel) without touching
    /// any state. Gradients arrive summed per parameter and per code slot.
    fn compute_batch(
        &self,
        epoch: usize,
        step: usize,
        scans: &[usize],
        blend: StageBlend,
    ) -> Result<(StepStats, BatchAccum), ImfaceError> {
        let names_len = self.param_names.len();
        let dense_per_scan = (self.config.dense_points / self.config.batch_scans).max(1);
        let outputs: Vec<Result<ScanOutput, ImfaceError>> = scans
            .par_iter()
            .map(|&s| {
                let rec = &self.records[s];
                let data = sample_step_data(
                    rec,
                    &self.neutral_landmarks[self.table.id_of_scan[s]],
                    self.config.points_per_scan,
                    dense_per_scan,
                    self.config.seed,
                    &[epoch as u64, step as u64, s as u64],
                );
                self.scan_pass(s, &data, blend)
            })
            .collect();

        let mut accum = BatchAccum::default();
        let mut terms: Vec<(&'static str, f64)> = Vec::new();
        let mut total = 0.0;
        for out in outputs {
            let out = out?;
            total += out.total;
            if terms.is_empty() {
                terms = out.terms.clone();
            } else {
                for (t, (_, v)) in terms.iter_mut().zip(&out.terms) {
                    t.1 += v;
                }
            }
            for (key, g) in &out.grads {
                if *key < names_len {
                    BatchAccum::add(&mut accum.model, *key, g);
                } else {
                    match key - names_len {
                        0 => BatchAccum::add(&mut accum.exp, out.scan, g),
                        1 => BatchAccum::add(&mut accum.id, self.table.id_of_scan[out.scan], g),
                        _ => BatchAccum::add(&mut accum.detail, out.scan, g),
                    }
                }
            }
        }
        let (kappa, lr) = match blend {
            StageBlend::One => (1.0, self.adam.lr),
            StageBlend::Two { detail, .. } => {
                let kappa = if self.config.literal_kappa {
                    detail
                } else {
                    1.0 - detail
                };
                (kappa, self.adam.lr * detail)
            }
        };
        Ok((
            StepStats {
                terms,
                total,
                kappa,
                lr,
            },
            accum,
        ))
    }

    /// Apply one step's summed gradients. Stage one moves everything except
    /// the template-landmark buffer; stage two moves only the displacement
    /// hypernetwork and the detail codes, with the learning rate scaled by
    /// the detail blend weight.
    fn commit(&mut self, accum: &BatchAccum, blend: StageBlend) {
        let (detail_only, scale) = match blend {
            StageBlend::One => (false, 1.0),
            StageBlend::Two { detail, .. } => (true, detail),
        };
        for (&key, g) in &accum.model {
            let name = &self.param_names[key];
            if name == "template_landmarks" {
                continue;
            }
            if detail_only && !name.starts_with("detail.") {
                continue;
            }
            let tensor = self.model.tensors.get_mut(name).unwrap();
            adam_step(
                Arc::make_mut(tensor),
                g,
                self.opt_model.get_mut(name).unwrap(),
                &self.adam,
                scale,
            );
        }
        if !detail_only {
            for (&slot, g) in &accum.exp {
                adam_step(
                    Arc::make_mut(&mut self.table.z_exp[slot]),
                    g,
                    &mut self.opt_exp[slot],
                    &self.adam,
                    1.0,
                );
            }
            for (&slot, g) in &accum.id {
                adam_step(
                    Arc::make_mut(&mut self.table.z_id[slot]),
                    g,
                    &mut self.opt_id[slot],
                    &self.adam,
                    1.0,
                );
            }
        }
        for (&slot, g) in &accum.detail {
            adam_step(
                Arc::make_mut(&mut self.table.z_detail[slot]),
                g,
                &mut self.opt_detail[slot],
                &self.adam,
                scale,
            );
        }
    }

    fn write_log(&mut self, epoch: usize, step: usize, stats: &StepStats) -> Result<(), ImfaceError> {
        if let Some(lock) = self.log.as_mut() {
            let w = lock.get_mut().unwrap();
            let mut emit = |term: &str, v: f64| {
                writeln!(
                    w,
                    "{epoch},{step},{},{},{term},{v}",
                    stats.kappa, stats.lr
                )
            };
            for (term, v) in &stats.terms {
                emit(term, *v).map_err(|e| ImfaceError::Io(format!("training log: {e}")))?;
            }
            emit("total", stats.total)
                .map_err(|e| ImfaceError::Io(format!("training log: {e}")))?;
        }
        Ok(())
    }

    /// Run the next scheduled epoch and return its mean batch loss.
    ///
    /// A non-finite loss aborts *before* the step commits, so the trainer
    /// still holds the last good state and can be checkpointed as-is.
    pub fn run_epoch(&mut self) -> Result<f64, ImfaceError> {
        let epoch = self.next_epoch;
        if epoch >= self.config.epochs {
            return Err(ImfaceError::Config(format!(
                "epoch {epoch} is past the configured {} epochs",
                self.config.epochs
            )));
        }
        let blend = self.blend_for_epoch(epoch);
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut seeds::stream(
            self.config.seed,
            "epoch-order",
            &[epoch as u64],
        ));

        let mut sum = 0.0;
        let mut batches = 0usize;
        let chunks: Vec<Vec<usize>> = order
            .chunks(self.config.batch_scans)
            .map(|c| c.to_vec())
            .collect();
        for (step, batch) in chunks.iter().enumerate() {
            let (stats, accum) = self.compute_batch(epoch, step, batch, blend)?;
            self.commit(&accum, blend);
            self.write_log(epoch, step, &stats)?;
            sum += stats.total;
            batches += 1;
        }
        if let Some(lock) = self.log.as_mut() {
            lock.get_mut()
                .unwrap()
                .flush()
                .map_err(|e| ImfaceError::Io(format!("training log: {e}")))?;
        }
        let mean = sum / batches as f64;
        self.epoch_losses.push(mean);
        self.next_epoch += 1;
        Ok(mean)
    }

    /// Run every remaining base-stage epoch.
    pub fn run_stage1(&mut self) -> Result<(), ImfaceError> {
        while self.next_epoch < self.stage1_epoch_count() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Run every remaining epoch (detail stage included).
    pub fn run_all(&mut self) -> Result<(), ImfaceError> {
        while self.next_epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn optimizer_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        let mut put = |prefix: String, st: &OptimizerState| {
            map.insert(format!("{prefix}.m"), st.m.clone());
            map.insert(format!("{prefix}.v"), st.v.clone());
            map.insert(format!("{prefix}.t"), Tensor::scalar(st.step as f64));
        };
        for (name, st) in &self.opt_model {
            put(format!("model.{name}"), st);
        }
        for (i, st) in self.opt_exp.iter().enumerate() {
            put(format!("emb.exp.{i:05}"), st);
        }
        for (j, st) in self.opt_id.iter().enumerate() {
            put(format!("emb.id.{j:05}"), st);
        }
        for (i, st) in self.opt_detail.iter().enumerate() {
            put(format!("emb.detail.{i:05}"), st);
        }
        map
    }

    fn optimizer_from_tensors(
        map: &BTreeMap<String, Tensor>,
        prefix: &str,
    ) -> Result<OptimizerState, ImfaceError> {
        let get = |suffix: &str| -> Result<&Tensor, ImfaceError> {
            map.get(&format!("{prefix}.{suffix}")).ok_or_else(|| {
                ImfaceError::Data(format!("checkpoint is missing optimizer entry {prefix}.{suffix}"))
            })
        };
        Ok(OptimizerState {
            m: get("m")?.clone(),
            v: get("v")?.clone(),
            step: get("t")?.data[0] as u64,
        })
    }

    /// Write the complete training state under `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), ImfaceError> {
        std::fs::create_dir_all(dir).map_err(|e| ImfaceError::io(dir, e))?;
        self.model.save(&dir.join("model.bin"))?;
        checkpoint::save_tensors(&dir.join("embeddings.bin"), &self.table.to_tensors())?;
        checkpoint::save_tensors(&dir.join("optimizer.bin"), &self.optimizer_tensors())?;
        checkpoint::save_json(
            &dir.join("train.json"),
            &CheckpointManifest {
                version: CHECKPOINT_VERSION,
                config: self.config.clone(),
                next_epoch: self.next_epoch,
                scans: self.table.scans.clone(),
                identities: self.table.identities.clone(),
                epoch_losses: self.epoch_losses.clone(),
            },
        )
    }

    /// Restore a trainer from `dir` against the same dataset. The next step
    /// after a resume is bit-identical to the uninterrupted run's.
    pub fn resume(records: &'d [ScanRecord], dir: &Path) -> Result<Trainer<'d>, ImfaceError> {
        let manifest: CheckpointManifest = checkpoint::load_json(&dir.join("train.json"))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(ImfaceError::Config(format!(
                "checkpoint version {} is not the supported {CHECKPOINT_VERSION}",
                manifest.version
            )));
        }
        manifest.config.validate()?;

        let model = ImFaceModel::load(&dir.join("model.bin"))?;
        if model.config != manifest.config.model {
            return Err(ImfaceError::Data(
                "the checkpoint's model config disagrees with its train config".into(),
            ));
        }
        for (i, rec) in records.iter().enumerate() {
            let expect = manifest.scans.get(i);
            if expect.map(|(id, ex)| (id.as_str(), ex.as_str()))
                != Some((rec.identity.as_str(), rec.expression.as_str()))
            {
                return Err(ImfaceError::Data(format!(
                    "scan {i} is {}/{} but the checkpoint was trained on a different scan list",
                    rec.identity, rec.expression
                )));
            }
        }
        if records.len() != manifest.scans.len() {
            return Err(ImfaceError::Data(format!(
                "the dataset has {} scans but the checkpoint stores {}",
                records.len(),
                manifest.scans.len()
            )));
        }

        let emb = checkpoint::load_tensors(&dir.join("embeddings.bin"))?;
        let table = EmbeddingTable::from_tensors(
            &emb,
            manifest.scans.clone(),
            manifest.identities.clone(),
            manifest.config.model.z_dim,
        )?;
        let neutral_landmarks =
            neutral_landmarks_by_identity(records, &table.identities, manifest.config.model.k)?;

        let opt = checkpoint::load_tensors(&dir.join("optimizer.bin"))?;
        let mut trainer = Trainer::assemble(
            records,
            manifest.config,
            model,
            table,
            neutral_landmarks,
            manifest.next_epoch,
            manifest.epoch_losses,
        );
        for name in &trainer.param_names {
            *trainer.opt_model.get_mut(name).unwrap() =
                Trainer::optimizer_from_tensors(&opt, &format!("model.{name}"))?;
        }
        for (i, st) in trainer.opt_exp.iter_mut().enumerate() {
            *st = Trainer::optimizer_from_tensors(&opt, &format!("emb.exp.{i:05}"))?;
        }
        for (j, st) in trainer.opt_id.iter_mut().enumerate() {
            *st = Trainer::optimizer_from_tensors(&opt, &format!("emb.id.{j:05}"))?;
        }
        for (i, st) in trainer.opt_detail.iter_mut().enumerate() {
            *st = Trainer::optimizer_from_tensors(&opt, &format!("emb.detail.{i:05}"))?;
        }
        Ok(trainer)
    }
}

/// Test-time fitting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub points_per_step: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for FitConfig {
    fn default() -> FitConfig {
        FitConfig {
            steps: 300,
            lr: 3e-3,
            points_per_step: 512,
            seed: 7,
            weights: LossWeights::default(),
        }
    }
}

/// Outcome of a latent fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub codes: LatentCodes,
    /// Loss value before each step.
    pub losses: Vec<f64>,
    /// True when the first attempt diverged and the zero restart succeeded.
    pub restarted: bool,
}

/// Fit latent codes to field samples against a frozen model, minimizing the
/// value, gradient-alignment, unit-gradient, and prior terms over the three
/// codes only. A run whose loss exceeds ten times its starting value
/// restarts once from zero codes before reporting failure.
pub fn fit_latents(
    model: &ImFaceModel,
    samples: &[SampleTriplet],
    init: &LatentCodes,
    cfg: &FitConfig,
) -> Result<FitResult, ImfaceError> {
    if cfg.steps == 0 || cfg.points_per_step == 0 {
        return Err(ImfaceError::Config(
            "fit steps and points per step must be positive".into(),
        ));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(ImfaceError::Config(format!(
            "fit learning rate {} must be positive and finite",
            cfg.lr
        )));
    }
    if samples.is_empty() {
        return Err(ImfaceError::Data("no samples to fit against".into()));
    }
    init.validate(&model.config)?;

    let names_len = model.param_names().len();
    let z = model.config.z_dim;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };

    let mut start = init.clone();
    for attempt in 0..2u64 {
        let mut codes = [
            Arc::new(Tensor::row_vec(&start.z_exp)),
            Arc::new(Tensor::row_vec(&start.z_id)),
            Arc::new(Tensor::row_vec(&start.z_detail)),
        ];
        let mut opt = [
            OptimizerState::new(1, z),
            OptimizerState::new(1, z),
            OptimizerState::new(1, z),
        ];
        let mut losses = Vec::with_capacity(cfg.steps);
        let mut diverged = false;

        for step in 0..cfg.steps {
            let mut rng = seeds::stream(cfg.seed, "fit-points", &[attempt, step as u64]);
            let idx = choose(&mut rng, samples.len(), cfg.points_per_step);
            let mut points = Vec::with_capacity(idx.len());
            let mut sdf = Vec::with_capacity(idx.len());
            let mut normals = Vec::with_capacity(idx.len());
            for &i in &idx {
                points.push(samples[i].point);
                sdf.push(samples[i].sdf);
                normals.push(samples[i].gradient);
            }

            let mut tape = Tape::new();
            let nodes = CodeNodes {
                z_exp: tape.param(names_len, Arc::clone(&codes[0])),
                z_id: tape.param(names_len + 1, Arc::clone(&codes[1])),
                z_detail: tape.param(names_len + 2, Arc::clone(&codes[2])),
            };
            let graph = ModelGraph::build(&mut tape, model, nodes);
            let sample = ScanSample {
                points: &points,
                sdf: &sdf,
                normals: &normals,
                dense_scan: &[],
                dense_neutral: &[],
                dense_template: &[],
                landmarks_scan: &[],
                landmarks_neutral: &[],
                is_neutral: false,
            };
            let terms = stage2_scan_loss(&mut tape, &graph, nodes, &sample, &cfg.weights);
            let total = tape.value(terms.total).data[0];
            if !total.is_finite() || (!losses.is_empty() && total > 10.0 * losses[0] + 1e-9) {
                diverged = true;
                break;
            }
            losses.push(total);

            let adj = tape.backward(terms.total, None);
            let grads = tape.param_gradients(&adj);
            drop(tape);
            for (key, g) in grads {
                if key >= names_len {
                    let slot = key - names_len;
                    adam_step(Arc::make_mut(&mut codes[slot]), &g, &mut opt[slot], &adam, 1.0);
                }
            }
        }

        if !diverged {
            return Ok(FitResult {
                codes: LatentCodes {
                    z_exp: codes[0].data.clone(),
                    z_id: codes[1].data.clone(),
                    z_detail: codes[2].data.clone(),
                },
                losses,
                restarted: attempt == 1,
            });
        }
        start = LatentCodes::zeros(z);
    }
    Err(ImfaceError::Numeric(
        "latent fitting diverged from both the given and the zero initialization".into(),
    ))
}
