//! Command-line front end: dataset synthesis, scan preprocessing, two-stage
//! training, latent fitting, surface reconstruction, evaluation, and the
//! latent-space utilities (correspondence, interpolation, PCA edits).
//!
//! Every subcommand is a pure function of its flags and input files: outputs
//! land only in the requested locations, a resolved-configuration snapshot is
//! written next to them, and identical invocations produce identical bytes.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use imface::diffcore::checkpoint::{load_json, load_tensors, save_json};
use imface::geom::{
    mesh::{read_landmark_indices, read_obj, write_obj},
    preprocess_mesh, MeshSdf, ScanRecord, TriangleMesh,
};
use imface::model::{ImFaceModel, LatentCodes};
use imface::recon::{
    correspondence_map, ede_tde, evaluate_meshes, interpolate_codes, marching_cubes,
    pca_embeddings, sample_surface, vertex_distances, CodeSubset, MetricOptions, Pca, VoxelGrid,
};
use imface::synth::{generate_dataset, save_dataset, DatasetManifest, SynthConfig};
use imface::training::{fit_latents, FitConfig, TrainConfig, Trainer};
use imface::ImfaceError;

#[derive(Parser)]
#[command(
    name = "imface",
    version,
    about = "Implicit morphable face models: train, fit, reconstruct, evaluate",
    propagate_version = true
)]
struct Cli {
    /// Increase log verbosity (-v: debug, -vv: trace)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face dataset with exact correspondence ground truth
    Synth(SynthCmd),
    /// Turn a raw scan (OBJ + landmark sidecar) into a training record
    Preprocess(PreprocessCmd),
    /// Train the model on a preprocessed dataset
    Train(TrainCmd),
    /// Fit latent codes for a new scan against a frozen checkpoint
    Fit(FitCmd),
    /// Extract a surface mesh from a checkpoint and latent codes
    Reconstruct(ReconstructCmd),
    /// Compare a reconstructed mesh against ground truth
    Metrics(MetricsCmd),
    /// Match points across two scans through the template space
    Correspond(CorrespondCmd),
    /// Interpolate between two latent code sets
    Interp(InterpCmd),
    /// Fit a PCA basis over trained embeddings
    Pca(PcaCmd),
    /// Walk latent codes along a PCA component
    Edit(EditCmd),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    All,
    Expression,
    Identity,
    Detail,
}

impl From<SubsetArg> for CodeSubset {
    fn from(s: SubsetArg) -> CodeSubset {
        match s {
            SubsetArg::All => CodeSubset::All,
            SubsetArg::Expression => CodeSubset::Expression,
            SubsetArg::Identity => CodeSubset::Identity,
            SubsetArg::Detail => CodeSubset::Detail,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BlockArg {
    Exp,
    Id,
    Detail,
}

impl BlockArg {
    fn prefix(self) -> &'static str {
        match self {
            BlockArg::Exp => "exp.",
            BlockArg::Id => "id.",
            BlockArg::Detail => "detail.",
        }
    }

    fn of<'a>(self, codes: &'a mut LatentCodes) -> &'a mut Vec<f64> {
        match self {
            BlockArg::Exp => &mut codes.z_exp,
            BlockArg::Id => &mut codes.z_id,
            BlockArg::Detail => &mut codes.z_detail,
        }
    }
}

#[derive(Args)]
struct SynthCmd {
    /// Number of identities
    #[arg(long, default_value_t = 20)]
    identities: usize,
    /// Expressions per identity (the first is always neutral)
    #[arg(long, default_value_t = 4)]
    expressions: usize,
    /// Heightfield grid resolution per axis
    #[arg(long, default_value_t = 128)]
    grid_res: usize,
    /// Near-surface training samples per scan
    #[arg(long, default_value_t = 4000)]
    near: usize,
    /// Uniform-in-sphere training samples per scan
    #[arg(long, default_value_t = 4000)]
    uniform: usize,
    /// Dense ground-truth correspondence sites per scan
    #[arg(long, default_value_t = 400)]
    dense: usize,
    /// Master RNG seed
    #[arg(long)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PreprocessCmd {
    /// Raw scan mesh (OBJ)
    #[arg(long)]
    mesh: PathBuf,
    /// Landmark vertex index sidecar; defaults to <mesh>.landmarks.txt
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Identity label stored in the record
    #[arg(long)]
    identity: String,
    /// Expression label stored in the record
    #[arg(long)]
    expression: String,
    /// Mark the scan as the identity's neutral expression
    #[arg(long)]
    neutral: bool,
    #[arg(long, default_value_t = 4000)]
    near: usize,
    #[arg(long, default_value_t = 4000)]
    uniform: usize,
    /// Gaussian radius for near-surface samples (mm)
    #[arg(long, default_value_t = 10.0)]
    sigma_near_mm: f64,
    /// Sampling sphere radius (mm)
    #[arg(long, default_value_t = 100.0)]
    radius_mm: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output record file
    #[arg(long)]
    out: PathBuf,
    /// Optionally write the aligned, retriangulated mesh here
    #[arg(long)]
    aligned_mesh: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    /// Dataset directory produced by `synth` (or holding a manifest.json)
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint and log directory
    #[arg(long)]
    out_dir: PathBuf,
    /// RNG seed (ignored with --resume, which keeps the stored run)
    #[arg(long)]
    seed: u64,
    /// Full TrainConfig JSON; flags below override single fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_scans: Option<usize>,
    /// Field samples per scan per step
    #[arg(long)]
    points: Option<usize>,
    /// Dense correspondence samples per step (split across the batch)
    #[arg(long)]
    dense_points: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stage switch point as a fraction of training progress
    #[arg(long)]
    t_m: Option<f64>,
    /// Blend the stage-2 objective with rising instead of falling weight
    #[arg(long)]
    literal_kappa: bool,
    /// Loss-weight overrides as JSON, e.g. '{"residual": 50.0}'
    #[arg(long)]
    weights: Option<String>,
    /// Which part of the schedule to run
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    stage: StageArg,
    /// Continue from an existing checkpoint directory
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FitCmd {
    /// Checkpoint directory from `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessed scan record to fit
    #[arg(long)]
    record: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Field samples per step
    #[arg(long, default_value_t = 512)]
    points: usize,
    /// Loss-weight overrides as JSON
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    seed: u64,
    /// Output latent codes (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructCmd {
    /// Checkpoint directory from `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Latent codes JSON; omit to extract the learned template surface
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Grid resolution per axis
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Half extent of the sampling cube (mm)
    #[arg(long, default_value_t = 100.0)]
    half_size_mm: f64,
    /// Skip the detail displacement field
    #[arg(long)]
    base_only: bool,
    /// Output mesh (OBJ)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsCmd {
    /// Reconstructed mesh (OBJ)
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth mesh (OBJ)
    #[arg(long)]
    gt: PathBuf,
    /// F-score threshold (mm)
    #[arg(long, default_value_t = 1.0)]
    tau_mm: f64,
    /// Surface samples per mesh
    #[arg(long, default_value_t = 50000)]
    samples: usize,
    /// Ignore normal orientation in the consistency score
    #[arg(long)]
    abs_normals: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scan record with dense ground truth (enables deformation errors)
    #[arg(long)]
    record: Option<PathBuf>,
    /// Checkpoint directory (with --record)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Latent codes JSON (with --record)
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Write per-vertex distance to ground truth as CSV
    #[arg(long)]
    error_map: Option<PathBuf>,
    /// Output report (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrespondCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    codes_a: PathBuf,
    #[arg(long)]
    mesh_a: PathBuf,
    #[arg(long)]
    codes_b: PathBuf,
    #[arg(long)]
    mesh_b: PathBuf,
    /// Surface samples per mesh
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output pair list (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpCmd {
    #[arg(long)]
    codes_a: PathBuf,
    #[arg(long)]
    codes_b: PathBuf,
    /// Single interpolation parameter in [0, 1]; omit for a sequence
    #[arg(long)]
    t: Option<f64>,
    /// Sequence length when --t is absent (steps + 1 code sets)
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Latent blocks to interpolate
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    subset: SubsetArg,
    /// Output codes JSON (single object with --t, else an array)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embedding block to analyze
    #[arg(long, value_enum)]
    block: BlockArg,
    #[arg(long, default_value_t = 4)]
    components: usize,
    /// Output basis (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditCmd {
    /// PCA basis from `pca`
    #[arg(long)]
    pca: PathBuf,
    /// Latent codes to edit
    #[arg(long)]
    codes: PathBuf,
    /// Block the basis was fitted on
    #[arg(long, value_enum)]
    block: BlockArg,
    #[arg(long, default_value_t = 0)]
    component: usize,
    /// Step along the component in standard deviations
    #[arg(long)]
    amount: f64,
    /// Output codes (JSON)
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    init_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// IMFACE_THREADS caps the worker pool; default is hardware concurrency.
fn init_threads() {
    let Ok(raw) = std::env::var("IMFACE_THREADS") else {
        return;
    };
    match raw.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not apply IMFACE_THREADS={n}: {e}");
            }
        }
        _ => log::warn!("ignoring unparsable IMFACE_THREADS={raw:?}"),
    }
}

fn run(cmd: Command) -> Result<(), ImfaceError> {
    match cmd {
        Command::Synth(c) => cmd_synth(c),
        Command::Preprocess(c) => cmd_preprocess(c),
        Command::Train(c) => cmd_train(c),
        Command::Fit(c) => cmd_fit(c),
        Command::Reconstruct(c) => cmd_reconstruct(c),
        Command::Metrics(c) => cmd_metrics(c),
        Command::Correspond(c) => cmd_correspond(c),
        Command::Interp(c) => cmd_interp(c),
        Command::Pca(c) => cmd_pca(c),
        Command::Edit(c) => cmd_edit(c),
    }
}

/// Snapshot path for a single-file output: `<file>.config.json` next to it.
fn sibling_snapshot(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

fn read_mesh(path: &Path) -> Result<TriangleMesh, ImfaceError> {
    read_obj(path)
}

fn load_codes(path: &Path) -> Result<LatentCodes, ImfaceError> {
    load_json(path)
}

fn load_model(checkpoint: &Path) -> Result<ImFaceModel, ImfaceError> {
    ImFaceModel::load(&checkpoint.join("model.bin"))
}

fn load_records(data_dir: &Path) -> Result<(DatasetManifest, Vec<ScanRecord>), ImfaceError> {
    let manifest: DatasetManifest = load_json(&data_dir.join("manifest.json"))?;
    let records = manifest
        .scans
        .iter()
        .map(|s| ScanRecord::load(&data_dir.join(&s.record)))
        .collect::<Result<_, _>>()?;
    Ok((manifest, records))
}

/// Merge a JSON object of loss-weight overrides over the given base.
fn merge_weights(
    base: imface::losses::LossWeights,
    overrides: &Option<String>,
) -> Result<imface::losses::LossWeights, ImfaceError> {
    let Some(raw) = overrides else {
        return Ok(base);
    };
    let mut value = serde_json::to_value(&base)
        .map_err(|e| ImfaceError::Config(format!("weights are not serializable: {e}")))?;
    let patch: serde_json::Value = serde_json::from_str(raw)
        .map_err(|e| ImfaceError::Config(format!("--weights is not valid JSON: {e}")))?;
    let (Some(obj), Some(patch)) = (value.as_object_mut(), patch.as_object()) else {
        return Err(ImfaceError::Config(
            "--weights must be a JSON object of weight names to numbers".into(),
        ));
    };
    for (k, v) in patch {
        if !obj.contains_key(k) {
            return Err(ImfaceError::Config(format!("unknown loss weight {k:?}")));
        }
        if !v.is_number() {
            return Err(ImfaceError::Config(format!(
                "loss weight {k:?} must be a number"
            )));
        }
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(value)
        .map_err(|e| ImfaceError::Config(format!("invalid loss weights: {e}")))
}

fn cmd_synth(c: SynthCmd) -> Result<(), ImfaceError> {
    let config = SynthConfig {
        n_identities: c.identities,
        n_expressions: c.expressions,
        grid_res: c.grid_res,
        seed: c.seed,
        n_dense: c.dense,
        n_near: c.near,
        n_uniform: c.uniform,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&config)?;
    let manifest = save_dataset(&ds, &c.out_dir)?;
    save_json(&c.out_dir.join("config.json"), &config)?;
    log::info!(
        "wrote {} scans ({} identities x {} expressions) to {}",
        manifest.scans.len(),
        c.identities,
        c.expressions,
        c.out_dir.display()
    );
    Ok(())
}

fn cmd_preprocess(c: PreprocessCmd) -> Result<(), ImfaceError> {
    let mut mesh = read_mesh(&c.mesh)?;
    let sidecar = c
        .landmarks
        .clone()
        .unwrap_or_else(|| c.mesh.with_extension("landmarks.txt"));
    mesh.landmark_indices = Some(read_landmark_indices(&sidecar)?);
    let raw_landmarks = mesh.landmark_positions()?;

    let (sheet, transform) = preprocess_mesh(&mesh, c.radius_mm)?;
    let sdf = MeshSdf::new(&sheet)?;
    let triplets =
        sdf.sample_training_points(c.near, c.uniform, c.sigma_near_mm, c.radius_mm, c.seed);
    let record = ScanRecord {
        identity: c.identity.clone(),
        expression: c.expression.clone(),
        is_neutral: c.neutral,
        landmarks: raw_landmarks.iter().map(|&p| transform.apply(p)).collect(),
        // dense correspondence ground truth cannot be derived from a raw scan
        dense: Vec::new(),
        triplets,
    };
    record.save(&c.out)?;
    if let Some(path) = &c.aligned_mesh {
        write_obj(path, &sheet)?;
    }
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "preprocess",
            "mesh": c.mesh,
            "landmarks": sidecar,
            "identity": c.identity,
            "expression": c.expression,
            "neutral": c.neutral,
            "near": c.near,
            "uniform": c.uniform,
            "sigma_near_mm": c.sigma_near_mm,
            "radius_mm": c.radius_mm,
            "seed": c.seed,
        }),
    )?;
    log::info!(
        "preprocessed {} -> {} ({} vertices, {} samples)",
        c.mesh.display(),
        c.out.display(),
        sheet.vertices.len(),
        record.triplets.len()
    );
    Ok(())
}

fn cmd_train(c: TrainCmd) -> Result<(), ImfaceError> {
    let (_, records) = load_records(&c.data_dir)?;
    let mut trainer = if let Some(resume_dir) = &c.resume {
        log::info!("resuming from {}", resume_dir.display());
        Trainer::resume(&records, resume_dir)?
    } else {
        let mut config = match &c.config {
            Some(path) => load_json::<TrainConfig>(path)?,
            None => TrainConfig::default(),
        };
        config.seed = c.seed;
        if let Some(v) = c.epochs {
            config.epochs = v;
        }
        if let Some(v) = c.batch_scans {
            config.batch_scans = v;
        }
        if let Some(v) = c.points {
            config.points_per_scan = v;
        }
        if let Some(v) = c.dense_points {
            config.dense_points = v;
        }
        if let Some(v) = c.lr {
            config.lr = v;
        }
        if let Some(v) = c.t_m {
            config.t_m = v;
        }
        if c.literal_kappa {
            config.literal_kappa = true;
        }
        config.weights = merge_weights(config.weights, &c.weights)?;
        Trainer::new(&records, config)?
    };

    std::fs::create_dir_all(&c.out_dir).map_err(|e| ImfaceError::io(&c.out_dir, e))?;
    let log_path = c.out_dir.join("train_log.csv");
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| ImfaceError::io(&log_path, e))?;
    trainer.attach_log(Box::new(log_file))?;

    let stage1 = trainer.stage1_epoch_count();
    match c.stage {
        StageArg::One => trainer.run_stage1()?,
        StageArg::Two => {
            if trainer.next_epoch < stage1 {
                return Err(ImfaceError::Config(format!(
                    "stage 2 starts at epoch {stage1}; resume a checkpoint that finished \
                     stage 1 or run --stage both"
                )));
            }
            trainer.run_all()?;
        }
        StageArg::Both => trainer.run_all()?,
    }

    trainer.save_checkpoint(&c.out_dir)?;
    save_json(&c.out_dir.join("config.json"), &trainer.config)?;
    log::info!(
        "trained to epoch {} (stage 1 ends at {}); mean loss {:.6}; checkpoint in {}",
        trainer.next_epoch,
        stage1,
        trainer.epoch_losses.last().copied().unwrap_or(f64::NAN),
        c.out_dir.display()
    );
    Ok(())
}

/// Mean over all embedding rows stored under `prefix` in a checkpoint.
fn mean_embedding(
    tensors: &BTreeMap<String, imface::diffcore::Tensor>,
    prefix: &str,
    z_dim: usize,
) -> Vec<f64> {
    let rows: Vec<&imface::diffcore::Tensor> = tensors
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, t)| t)
        .collect();
    let mut mean = vec![0.0; z_dim];
    if rows.is_empty() {
        return mean;
    }
    for t in &rows {
        for (m, x) in mean.iter_mut().zip(&t.data) {
            *m += x / rows.len() as f64;
        }
    }
    mean
}

fn cmd_fit(c: FitCmd) -> Result<(), ImfaceError> {
    let model = load_model(&c.checkpoint)?;
    let record = ScanRecord::load(&c.record)?;
    let z = model.config.z_dim;
    // start from the population mean of the trained embeddings
    let init = match load_tensors(&c.checkpoint.join("embeddings.bin")) {
        Ok(tensors) => LatentCodes {
            z_exp: mean_embedding(&tensors, "exp.", z),
            z_id: mean_embedding(&tensors, "id.", z),
            z_detail: mean_embedding(&tensors, "detail.", z),
        },
        Err(_) => {
            log::warn!("checkpoint has no embeddings; starting the fit from zero codes");
            LatentCodes::zeros(z)
        }
    };
    let cfg = FitConfig {
        steps: c.steps,
        lr: c.lr,
        points_per_step: c.points,
        seed: c.seed,
        weights: merge_weights(imface::losses::LossWeights::default(), &c.weights)?,
    };
    let result = fit_latents(&model, &record.triplets, &init, &cfg)?;
    save_json(&c.out, &result.codes)?;
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "fit",
            "checkpoint": c.checkpoint,
            "record": c.record,
            "config": cfg,
            "restarted": result.restarted,
            "first_loss": result.losses.first(),
            "final_loss": result.losses.last(),
        }),
    )?;
    log::info!(
        "fit {} in {} steps: loss {:.4} -> {:.4}{}",
        record.identity,
        c.steps,
        result.losses.first().copied().unwrap_or(f64::NAN),
        result.losses.last().copied().unwrap_or(f64::NAN),
        if result.restarted {
            " (restarted from zero)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_reconstruct(c: ReconstructCmd) -> Result<(), ImfaceError> {
    let model = load_model(&c.checkpoint)?;
    let grid = VoxelGrid::cube(c.resolution, c.half_size_mm)?;
    let codes = c.codes.as_deref().map(load_codes).transpose()?;
    let mesh = match &codes {
        None => marching_cubes(&grid, |pts| Ok(model.eval_template_sdf(pts)))?,
        Some(codes) if c.base_only => {
            marching_cubes(&grid, |pts| model.eval_base_sdf(codes, pts))?
        }
        Some(codes) => marching_cubes(&grid, |pts| model.eval_full_sdf(codes, pts))?,
    };
    write_obj(&c.out, &mesh)?;
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "reconstruct",
            "checkpoint": c.checkpoint,
            "codes": c.codes,
            "grid": grid,
            "base_only": c.base_only,
        }),
    )?;
    log::info!(
        "extracted {} vertices / {} faces at {}^3 into {}",
        mesh.vertices.len(),
        mesh.faces.len(),
        c.resolution,
        c.out.display()
    );
    Ok(())
}

fn cmd_metrics(c: MetricsCmd) -> Result<(), ImfaceError> {
    let pred = read_mesh(&c.pred)?;
    let gt = read_mesh(&c.gt)?;
    let opts = MetricOptions {
        n_samples: c.samples,
        tau_mm: c.tau_mm,
        abs_normals: c.abs_normals,
        seed: c.seed,
    };
    let mut report = evaluate_meshes(&pred, &gt, &opts)?;

    match (&c.record, &c.checkpoint, &c.codes) {
        (Some(record), Some(checkpoint), Some(codes)) => {
            let rec = ScanRecord::load(record)?;
            let model = load_model(checkpoint)?;
            let codes = load_codes(codes)?;
            let (ede, tde) = ede_tde(&model, &codes, &rec.dense)?;
            report.ede_mm = Some(ede);
            report.tde_mm = Some(tde);
        }
        (None, None, None) => {}
        _ => {
            return Err(ImfaceError::Config(
                "deformation errors need --record, --checkpoint and --codes together".into(),
            ))
        }
    }

    if let Some(path) = &c.error_map {
        let dists = vertex_distances(&pred, &gt);
        let mut csv = String::from("vertex,distance_mm\n");
        for (i, d) in dists.iter().enumerate() {
            csv.push_str(&format!("{i},{d}\n"));
        }
        std::fs::write(path, csv).map_err(|e| ImfaceError::io(path, e))?;
    }

    save_json(&c.out, &report)?;
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "metrics",
            "pred": c.pred,
            "gt": c.gt,
            "options": opts,
            "record": c.record,
            "checkpoint": c.checkpoint,
            "codes": c.codes,
        }),
    )?;

    println!("chamfer distance      {:>10.4} mm", report.chamfer_mm);
    println!(
        "f-score @ {:.1} mm      {:>10.2} %",
        report.tau_mm, report.fscore_pct
    );
    println!("normal consistency    {:>10.4}", report.normal_consistency);
    if let (Some(ede), Some(tde)) = (report.ede_mm, report.tde_mm) {
        println!("expression deform err {ede:>10.4} mm");
        println!("total deform err      {tde:>10.4} mm");
    }
    Ok(())
}

fn cmd_correspond(c: CorrespondCmd) -> Result<(), ImfaceError> {
    let model = load_model(&c.checkpoint)?;
    let codes_a = load_codes(&c.codes_a)?;
    let codes_b = load_codes(&c.codes_b)?;
    let mesh_a = read_mesh(&c.mesh_a)?;
    let mesh_b = read_mesh(&c.mesh_b)?;
    let points_a: Vec<[f64; 3]> = sample_surface(&mesh_a, c.samples, c.seed)?
        .iter()
        .map(|s| s.point)
        .collect();
    let points_b: Vec<[f64; 3]> = sample_surface(&mesh_b, c.samples, c.seed.wrapping_add(1))?
        .iter()
        .map(|s| s.point)
        .collect();
    let pairs = correspondence_map(&model, &codes_a, &points_a, &codes_b, &points_b)?;
    let mean: f64 = pairs.iter().map(|p| p.distance).sum::<f64>() / pairs.len() as f64;
    save_json(&c.out, &pairs)?;
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "correspond",
            "checkpoint": c.checkpoint,
            "codes_a": c.codes_a,
            "mesh_a": c.mesh_a,
            "codes_b": c.codes_b,
            "mesh_b": c.mesh_b,
            "samples": c.samples,
            "seed": c.seed,
        }),
    )?;
    log::info!(
        "matched {} points; mean template-space distance {:.4} mm",
        pairs.len(),
        mean
    );
    Ok(())
}

fn cmd_interp(c: InterpCmd) -> Result<(), ImfaceError> {
    let a = load_codes(&c.codes_a)?;
    let b = load_codes(&c.codes_b)?;
    let subset: CodeSubset = c.subset.into();
    match c.t {
        Some(t) => save_json(&c.out, &interpolate_codes(&a, &b, t, subset)?)?,
        None => {
            if c.steps == 0 {
                return Err(ImfaceError::Config("--steps must be positive".into()));
            }
            let seq = (0..=c.steps)
                .map(|i| interpolate_codes(&a, &b, i as f64 / c.steps as f64, subset))
                .collect::<Result<Vec<_>, _>>()?;
            save_json(&c.out, &seq)?;
        }
    }
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "interp",
            "codes_a": c.codes_a,
            "codes_b": c.codes_b,
            "t": c.t,
            "steps": c.steps,
            "subset": subset,
        }),
    )?;
    Ok(())
}

fn cmd_pca(c: PcaCmd) -> Result<(), ImfaceError> {
    let tensors = load_tensors(&c.checkpoint.join("embeddings.bin"))?;
    let rows: Vec<Vec<f64>> = tensors
        .iter()
        .filter(|(k, _)| k.starts_with(c.block.prefix()))
        .map(|(_, t)| t.data.clone())
        .collect();
    let pca = pca_embeddings(&rows, c.components)?;
    save_json(&c.out, &pca)?;
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "pca",
            "checkpoint": c.checkpoint,
            "block": c.block.prefix(),
            "components": c.components,
            "rows": rows.len(),
        }),
    )?;
    log::info!(
        "fitted {} components over {} embeddings; strongest sigma {:.4}",
        pca.components.len(),
        pca.n_samples,
        pca.sigma(0)
    );
    Ok(())
}

fn cmd_edit(c: EditCmd) -> Result<(), ImfaceError> {
    let pca: Pca = load_json(&c.pca)?;
    let mut codes = load_codes(&c.codes)?;
    if c.component >= pca.components.len() {
        return Err(ImfaceError::Config(format!(
            "component {} is out of range; the basis has {}",
            c.component,
            pca.components.len()
        )));
    }
    let block = c.block.of(&mut codes);
    if block.len() != pca.dim() {
        return Err(ImfaceError::Config(format!(
            "the basis covers dimension {} but the {} block has {}",
            pca.dim(),
            c.block.prefix().trim_end_matches('.'),
            block.len()
        )));
    }
    let step = c.amount * pca.sigma(c.component);
    for (x, dir) in block.iter_mut().zip(&pca.components[c.component]) {
        *x += step * dir;
    }
    save_json(&c.out, &codes)?;
    save_json(
        &sibling_snapshot(&c.out),
        &json!({
            "command": "edit",
            "pca": c.pca,
            "codes": c.codes,
            "block": c.block.prefix(),
            "component": c.component,
            "amount": c.amount,
            "step": step,
        }),
    )?;
    log::info!(
        "moved {} block by {:+.4} along component {}",
        c.block.prefix().trim_end_matches('.'),
        step,
        c.component
    );
    Ok(())
}
