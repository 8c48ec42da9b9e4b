//! Run configuration and the `demf` binary's commands.
//!
//! Configuration is a flat `key = value` file with `#` comments; unknown
//! keys are errors. All commands are deterministic: the same config (and
//! `DEMF_SEED`, if set) produces byte-identical outputs.
//!
//! Exit codes: 0 success, 2 configuration or I/O error, 3 numerical
//! failure (gradient check or non-finite loss), 4 checkpoint mismatch.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::attention::{DeformAttnParams, FeaturePyramid, OffsetMode};
use crate::diffcore::{
    grad_check, load_checkpoint, save_checkpoint, set_precision, CheckpointError, Precision,
    StreamRng, Tensor,
};
use crate::eval::BoxRecord;
use crate::geometry::write_camera_file;
use crate::toydet::{
    evaluate_model, metrics_csv, synth_scene, train, ToyError, ToyModel, TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Scene(s) => CliError::Config(s.to_string()),
            TrainError::Model(m) => CliError::Numerical(m.to_string()),
            TrainError::Optim(o) => CliError::Numerical(o.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

/// Everything a run needs: precision mode, the training configuration,
/// and gradient-check settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub precision: Precision,
    pub train: TrainConfig,
    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
    pub gradcheck_seeds: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F64,
            train: TrainConfig::toy(0),
            gradcheck_h: 1e-5,
            gradcheck_tol: 1e-6,
            gradcheck_seeds: 20,
        }
    }
}

fn parse_u64(key: &str, v: &str) -> Result<u64, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("key '{key}': expected integer, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("key '{key}': expected integer, got '{v}'")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("key '{key}': expected number, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(CliError::Config(format!(
            "key '{key}': expected true or false, got '{v}'"
        ))),
    }
}

/// Parses a run config from flat `key = value` lines. Unknown keys and
/// malformed values are configuration errors; missing keys keep their
/// defaults.
pub fn parse_run_config(text: &str) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected 'key = value'", ln + 1))
        })?;
        let (key, v) = (key.trim(), value.trim());
        let t = &mut c.train;
        match key {
            "seed" => t.seed = parse_u64(key, v)?,
            "precision" => {
                c.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => {
                        return Err(CliError::Config(format!(
                            "precision must be f64 or f32, got '{v}'"
                        )))
                    }
                }
            }
            "scene.classes" => {
                t.scene.num_classes = parse_usize(key, v)?;
                t.demf.num_classes = t.scene.num_classes;
            }
            "scene.objects" => t.scene.objects_per_scene = parse_usize(key, v)?,
            "scene.ambiguity" => t.scene.ambiguity_fraction = parse_f64(key, v)?,
            "scene.points" => t.scene.num_points = parse_usize(key, v)?,
            "scene.image_width" => t.scene.image_width = parse_usize(key, v)?,
            "scene.image_height" => t.scene.image_height = parse_usize(key, v)?,
            "scene.min_points" => t.scene.min_points = parse_usize(key, v)?,
            "scene.clutter" => t.scene.clutter_fraction = parse_f64(key, v)?,
            "model.candidates" => t.candidates = parse_usize(key, v)?,
            "model.stat_radius" => t.stat_radius = parse_f64(key, v)?,
            "model.width" => t.demf.width = parse_usize(key, v)?,
            "model.heads" => t.demf.heads = parse_usize(key, v)?,
            "model.samples" => t.demf.samples = parse_usize(key, v)?,
            "model.levels" => t.demf.levels = parse_usize(key, v)?,
            "model.depth" => t.demf.depth = parse_usize(key, v)?,
            "model.dropout" => t.demf.dropout = parse_f64(key, v)?,
            "model.offsets" => {
                t.demf.offset_mode = match v {
                    "learned" => OffsetMode::Learned,
                    "grid" => OffsetMode::Grid,
                    _ => {
                        return Err(CliError::Config(format!(
                            "model.offsets must be learned or grid, got '{v}'"
                        )))
                    }
                }
            }
            "model.fusion" => t.demf.fusion_enabled = parse_bool(key, v)?,
            "model.freeze_image" => t.freeze_image = parse_bool(key, v)?,
            "model.ensemble" => t.ensemble = parse_bool(key, v)?,
            "optim.lr" => t.optim.lr = parse_f64(key, v)?,
            "optim.beta1" => t.optim.beta1 = parse_f64(key, v)?,
            "optim.beta2" => t.optim.beta2 = parse_f64(key, v)?,
            "optim.eps" => t.optim.eps = parse_f64(key, v)?,
            "optim.weight_decay" => t.optim.weight_decay = parse_f64(key, v)?,
            "train.steps" => t.steps = parse_usize(key, v)?,
            "train.eval_every" => t.eval_every = parse_usize(key, v)?,
            "train.eval_scenes" => t.eval_scenes = parse_usize(key, v)?,
            "train.resample" => t.resample_scenes = parse_bool(key, v)?,
            "loss.class_ce" => t.loss.class_ce = parse_f64(key, v)?,
            "loss.center_l1" => t.loss.center_l1 = parse_f64(key, v)?,
            "loss.size_l1" => t.loss.size_l1 = parse_f64(key, v)?,
            "loss.assign_radius" => t.loss.assign_radius = parse_f64(key, v)?,
            "eval.iou" => t.iou_threshold = parse_f64(key, v)?,
            "gradcheck.h" => c.gradcheck_h = parse_f64(key, v)?,
            "gradcheck.tol" => c.gradcheck_tol = parse_f64(key, v)?,
            "gradcheck.seeds" => c.gradcheck_seeds = parse_u64(key, v)?,
            _ if key.starts_with("optim.lr_mult.") => {
                let prefix = key.trim_start_matches("optim.lr_mult.").to_string();
                t.lr_multipliers.push((prefix, parse_f64(key, v)?));
            }
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
    }
    validate_run_config(&c)?;
    Ok(c)
}

fn validate_run_config(c: &RunConfig) -> Result<(), CliError> {
    let t = &c.train;
    let d = &t.demf;
    if d.width == 0 || d.heads == 0 || !d.width.is_multiple_of(d.heads) {
        return Err(CliError::Config(format!(
            "model.width ({}) must be a positive multiple of model.heads ({})",
            d.width, d.heads
        )));
    }
    if d.samples == 0 || d.levels == 0 || d.depth == 0 {
        return Err(CliError::Config(
            "model.samples, model.levels and model.depth must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&d.dropout) {
        return Err(CliError::Config(format!(
            "model.dropout must be in [0,1), got {}",
            d.dropout
        )));
    }
    if d.offset_mode == OffsetMode::Grid {
        let side = (d.samples as f64).sqrt().round() as usize;
        if side * side != d.samples {
            return Err(CliError::Config(format!(
                "grid offsets require a perfect-square model.samples, got {}",
                d.samples
            )));
        }
    }
    if t.candidates == 0 {
        return Err(CliError::Config("model.candidates must be positive".into()));
    }
    if !(t.stat_radius.is_finite() && t.stat_radius > 0.0) {
        return Err(CliError::Config("model.stat_radius must be positive".into()));
    }
    if !(t.iou_threshold > 0.0 && t.iou_threshold < 1.0) {
        return Err(CliError::Config("eval.iou must be in (0,1)".into()));
    }
    if !(c.gradcheck_h > 0.0 && c.gradcheck_h <= 1e-3) {
        return Err(CliError::Config("gradcheck.h must be in (0, 1e-3]".into()));
    }
    t.scene
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(())
}

/// Loads the config file (or defaults when absent) and applies the
/// `DEMF_SEED` environment override.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut c = match path {
        Some(p) => parse_run_config(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("DEMF_SEED") {
        c.train.seed = s
            .parse()
            .map_err(|_| CliError::Config(format!("DEMF_SEED must be an integer, got '{s}'")))?;
    }
    Ok(c)
}

#[derive(Parser)]
#[command(name = "demf", about = "Deformable multi-modal fusion toy pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate one synthetic scene and write its camera and ground truths.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients of the fusion block against finite
    /// differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; writes metrics.csv, confusion.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out scenes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional directory for confusion.csv and detections.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare learned offsets against a fixed grid on the same run.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out } => {
            let c = load_and_apply(config.as_deref())?;
            cmd_synth(&c, &out)
        }
        Command::Gradcheck { config } => {
            let c = load_and_apply(config.as_deref())?;
            cmd_gradcheck(&c)
        }
        Command::Train { config, out } => {
            let c = load_and_apply(config.as_deref())?;
            cmd_train(&c, &out)
        }
        Command::Eval {
            config,
            checkpoint,
            out,
        } => {
            let c = load_and_apply(config.as_deref())?;
            cmd_eval(&c, &checkpoint, out.as_deref())
        }
        Command::Ablate { config } => {
            let c = load_and_apply(config.as_deref())?;
            cmd_ablate(&c)
        }
    }
}

fn load_and_apply(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let c = load_run_config(path)?;
    set_precision(c.precision);
    Ok(c)
}

fn cmd_synth(c: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scene = synth_scene(c.train.seed, &c.train.scene).map_err(|e: ToyError| {
        CliError::Config(e.to_string())
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("camera.txt"), write_camera_file(std::slice::from_ref(&scene.cam)))?;
    let records: Vec<BoxRecord> = scene
        .gts
        .iter()
        .map(|g| BoxRecord {
            scene_id: c.train.seed,
            class_id: g.class_id,
            bbox: g.bbox,
            score: None,
        })
        .collect();
    fs::write(out.join("gt_boxes.txt"), crate::eval::write_box_file(&records))?;
    println!(
        "synth: seed={} objects={} points={} ambiguous={}",
        c.train.seed,
        scene.gts.len(),
        scene.points.len(),
        scene.ambiguous.iter().filter(|a| **a).count()
    );
    Ok(())
}

fn cmd_gradcheck(c: &RunConfig) -> Result<(), CliError> {
    let mut worst = 0.0_f64;
    for seed in 0..c.gradcheck_seeds {
        let report = gradcheck_fusion_block(seed, c.gradcheck_h, c.gradcheck_tol);
        worst = worst.max(report.max_rel_err);
        println!(
            "gradcheck seed={seed}: max_rel_err={:.3e} {}",
            report.max_rel_err,
            if report.pass { "PASS" } else { "FAIL" }
        );
        if !report.pass {
            return Err(CliError::Numerical(format!(
                "gradient check failed at seed {seed}: max relative error {:.3e} > {:.3e}",
                report.max_rel_err, c.gradcheck_tol
            )));
        }
    }
    println!(
        "gradcheck: {} seeds, worst max_rel_err={worst:.3e} <= tol={:.3e}",
        c.gradcheck_seeds, c.gradcheck_tol
    );
    Ok(())
}

/// Finite-difference check of a small deformable-attention block: the
/// loss is the sum of outputs, gradients are checked for the queries and
/// both pyramid levels.
pub fn gradcheck_fusion_block(seed: u64, h: f64, tol: f64) -> crate::diffcore::GradReport {
    let mut rng = StreamRng::new(seed, "cli-gradcheck");
    let (n, cdim, m, k, l) = (2, 8, 2, 2, 2);
    let params = DeformAttnParams::init("gc", cdim, m, k, l, OffsetMode::Learned, &mut rng);
    let refs = vec![
        crate::geometry::Unit2 { a: 0.4, b: 0.5 },
        crate::geometry::Unit2 { a: 0.7, b: 0.3 },
    ];
    let feats = Tensor::new(
        &[n, cdim],
        (0..n * cdim).map(|_| rng.normal() * 0.5).collect(),
    )
    .requires_grad(true);
    let map0 = Tensor::new(
        &[cdim, 6, 6],
        (0..cdim * 36).map(|_| rng.normal() * 0.5).collect(),
    )
    .requires_grad(true);
    let map1 = Tensor::new(
        &[cdim, 4, 4],
        (0..cdim * 16).map(|_| rng.normal() * 0.5).collect(),
    )
    .requires_grad(true);
    grad_check(
        |ins| {
            let pyramid =
                FeaturePyramid::new(vec![ins[1].clone(), ins[2].clone()]).unwrap();
            let out = crate::attention::ms_deform_attn_batch(
                &ins[0], &refs, None, &pyramid, &params,
            )
            .unwrap();
            crate::diffcore::sum(&out)
        },
        &[feats, map0, map1],
        h,
        tol,
    )
}

fn cmd_train(c: &RunConfig, out: &Path) -> Result<(), CliError> {
    let outcome = train(&c.train)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&outcome))?;
    fs::write(
        out.join("model.ckpt"),
        save_checkpoint(&outcome.model.parameters()),
    )?;
    let summary = evaluate_model(&outcome.model, &c.train)?;
    fs::write(out.join("confusion.csv"), summary.confusion.to_csv())?;
    let acc = summary
        .ambiguous_accuracy()
        .map(|a| format!("{a:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "train: steps={} final_loss={:.6} map={:.4} ambiguous_accuracy={acc}",
        c.train.steps,
        outcome.records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        summary.map
    );
    Ok(())
}

fn cmd_eval(c: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let model = ToyModel::init(&c.train);
    let bytes = fs::read(checkpoint)?;
    load_checkpoint(&bytes, &model.parameters())?;
    let summary = evaluate_model(&model, &c.train)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("confusion.csv"), summary.confusion.to_csv())?;
    }
    let acc = summary
        .ambiguous_accuracy()
        .map(|a| format!("{a:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "eval: scenes={} map={:.4} ambiguous_accuracy={acc}",
        c.train.eval_scenes, summary.map
    );
    Ok(())
}

fn cmd_ablate(c: &RunConfig) -> Result<(), CliError> {
    let mut learned_cfg = c.train.clone();
    learned_cfg.demf.offset_mode = OffsetMode::Learned;
    let mut grid_cfg = c.train.clone();
    grid_cfg.demf.offset_mode = OffsetMode::Grid;
    let side = (grid_cfg.demf.samples as f64).sqrt().round() as usize;
    if side * side != grid_cfg.demf.samples {
        return Err(CliError::Config(format!(
            "ablation needs a perfect-square model.samples for the grid arm, got {}",
            grid_cfg.demf.samples
        )));
    }
    let learned = train(&learned_cfg)?;
    let grid = train(&grid_cfg)?;
    let ls = evaluate_model(&learned.model, &learned_cfg)?;
    let gs = evaluate_model(&grid.model, &grid_cfg)?;
    let acc = |s: &crate::toydet::EvalSummary| {
        s.ambiguous_accuracy()
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into())
    };
    println!(
        "ablate: learned map={:.4} ambiguous_accuracy={} | grid map={:.4} ambiguous_accuracy={}",
        ls.map,
        acc(&ls),
        gs.map,
        acc(&gs)
    );
    Ok(())
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
