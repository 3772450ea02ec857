//! Subcommand implementations. Each returns its result as a value so that
//! tests can inspect it; the human-readable summary goes to stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rpose_core::data::{load_annotations, read_image, resolve_image, write_pgm, Dataset};
use rpose_core::eval::{decode_head, metrics_csv, pr_csv, write_json, write_text, Detection};
use rpose_core::model::{
    count_parameters, end_to_end_gradcheck, receptive_field, Checkpoint, GroupCheck, ModelConfig, PoseNet, Preset,
    OUTPUT_STRIDE,
};
use rpose_core::supervision::{OcclusionScenario, SkeletonSpec};
use rpose_core::train::{evaluate, predict_heads, EvalReport, TrainLog, Trainer, CHECKPOINT_FILE};
use rpose_core::util::atomic_write;
use rpose_core::Error;
use rpose_tensor::gradcheck::{primitive_suite, PrimitiveCheck};
use rpose_tensor::io::write_tensor;
use rpose_tensor::Tensor;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, CliResult, Common, EXIT_CONFIG, EXIT_FAILURE, EXIT_INCOMPATIBLE, EXIT_MISSING, EXIT_REFUSED};

/// Expected parameter total of the full preset, printed alongside the computed one.
pub const REFERENCE_TOTAL: f64 = 15.4e6;
/// Name of the resolved configuration written next to every command's outputs.
pub const RESOLVED_FILE: &str = "resolved.toml";

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::new(EXIT_CONFIG, msg)
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::new(EXIT_MISSING, format!("config file {} does not exist", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.generate.seed = seed;
    }
    Ok(cfg)
}

fn require_out(common: &Common, command: &str) -> CliResult<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| config_err(format!("{command} needs --out <dir>")))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(Error::from)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::new(
                EXIT_REFUSED,
                format!("output directory {} is not empty; pass --force to write into it", dir.display()),
            ));
        }
    }
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    atomic_write(&dir.join(RESOLVED_FILE), cfg.resolved()?.to_text().as_bytes())?;
    Ok(())
}

/// Accepts an annotation file or a dataset directory containing `annotations.jsonl`.
fn annotations_path(path: &Path) -> CliResult<PathBuf> {
    let p = if path.is_dir() { path.join("annotations.jsonl") } else { path.to_path_buf() };
    if !p.exists() {
        return Err(CliError::new(EXIT_MISSING, format!("annotation file {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_dataset(path: &Path, skel: &SkeletonSpec) -> CliResult<Dataset> {
    Ok(Dataset::load(&annotations_path(path)?, skel)?)
}

fn check_size(data: &Dataset, model: &ModelConfig, what: &str) -> CliResult<()> {
    if !data.is_empty() && data.size != model.input_size {
        return Err(config_err(format!(
            "{what} images are {0}x{0} but the model expects {1}x{1}",
            data.size, model.input_size
        )));
    }
    Ok(())
}

fn synthesize(cfg: &RunConfig, skel: &SkeletonSpec, size: usize, count: usize, seed: u64) -> CliResult<Dataset> {
    let g = &cfg.generate;
    Ok(Dataset::synthetic_with(skel, g.size.unwrap_or(size), count, g.occlusion_rate, g.distractor_prob, seed)?)
}

/// Loads a checkpoint and checks it against the skeleton and, when given, the configured model.
fn load_checkpoint(path: &Path, skel: &SkeletonSpec, expected: Option<&ModelConfig>) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::new(EXIT_MISSING, format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::new(EXIT_INCOMPATIBLE, format!("{}: {e}", path.display())))?;
    let m = ckpt.model.config();
    if m.keypoints != skel.num_keypoints() || m.parts != skel.num_parts() {
        return Err(CliError::new(
            EXIT_INCOMPATIBLE,
            format!(
                "checkpoint {} predicts {} keypoints and {} parts, skeleton `{}` has {} and {}",
                path.display(),
                m.keypoints,
                m.parts,
                skel.name,
                skel.num_keypoints(),
                skel.num_parts()
            ),
        ));
    }
    if let Some(e) = expected {
        let same = m.input_size == e.input_size && m.channels == e.channels && m.large_kernel == e.large_kernel;
        if !same {
            return Err(CliError::new(
                EXIT_INCOMPATIBLE,
                format!(
                    "checkpoint {} has input {} channels {:?} kernel {}, configuration asks for input {} channels {:?} kernel {}",
                    path.display(),
                    m.input_size,
                    m.channels,
                    m.large_kernel,
                    e.input_size,
                    e.channels,
                    e.large_kernel
                ),
            ));
        }
    }
    Ok(ckpt)
}

/// The configured skeleton when a config file is given, otherwise the one stored in the checkpoint.
fn skeleton_for(common: &Common, cfg: &RunConfig, checkpoint: &Path) -> CliResult<SkeletonSpec> {
    if common.config.is_none() && checkpoint.exists() {
        if let Ok(Checkpoint { skeleton: Some(s), .. }) = Checkpoint::load(checkpoint) {
            return Ok(s);
        }
    }
    Ok(cfg.skeleton()?)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, Default, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of scenes.
    #[arg(long)]
    pub count: Option<usize>,
    /// Probability that each keypoint of the main figure is occluded.
    #[arg(long)]
    pub occlusion_rate: Option<f64>,
    /// Probability of a second, non-active figure.
    #[arg(long)]
    pub distractor_prob: Option<f64>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Skeleton preset or file.
    #[arg(long)]
    pub skeleton: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VisibilityStats {
    pub names: Vec<String>,
    pub present: Vec<usize>,
    pub occluded: Vec<usize>,
}

impl VisibilityStats {
    pub fn of(data: &Dataset) -> Self {
        let k = data.skeleton.num_keypoints();
        let (mut present, mut occluded) = (vec![0; k], vec![0; k]);
        for s in &data.samples {
            let p = s.annotation.active_person();
            for i in 0..k {
                present[i] += p.present[i] as usize;
                occluded[i] += p.is_occluded(i) as usize;
            }
        }
        Self {
            names: data.skeleton.keypoints.clone(),
            present,
            occluded,
        }
    }

    /// Occluded share of all present keypoints.
    pub fn occluded_fraction(&self) -> f64 {
        let p: usize = self.present.iter().sum();
        if p == 0 {
            0.0
        } else {
            self.occluded.iter().sum::<usize>() as f64 / p as f64
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>9} {:>9}\n", "keypoint", "present", "occluded", "fraction");
        for i in 0..self.names.len() {
            let f = if self.present[i] == 0 { 0.0 } else { self.occluded[i] as f64 / self.present[i] as f64 };
            let _ = writeln!(s, "{:<12} {:>8} {:>9} {:>9.3}", self.names[i], self.present[i], self.occluded[i], f);
        }
        let _ = writeln!(s, "{:<12} {:>8} {:>9} {:>9.3}", "all", self.present.iter().sum::<usize>(), self.occluded.iter().sum::<usize>(), self.occluded_fraction());
        s
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<VisibilityStats> {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = args.count {
        cfg.generate.count = c;
    }
    if let Some(r) = args.occlusion_rate {
        cfg.generate.occlusion_rate = r;
    }
    if let Some(d) = args.distractor_prob {
        cfg.generate.distractor_prob = d;
    }
    if let Some(s) = args.size {
        cfg.generate.size = Some(s);
    }
    if let Some(s) = &args.skeleton {
        cfg.data.skeleton = s.clone();
    }
    let out = require_out(&args.common, "generate")?;
    let skel = cfg.skeleton()?;
    let model = cfg.model_config(&skel)?;
    let data = synthesize(&cfg, &skel, model.input_size, cfg.generate.count, cfg.generate.seed)?;
    prepare_out(&out, args.common.force)?;
    data.save(&out)?;
    write_resolved(&out, &cfg)?;
    let stats = VisibilityStats::of(&data);
    println!("wrote {} scenes to {}", data.len(), out.display());
    print!("{}", stats.table());
    Ok(stats)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training annotations (file or dataset directory).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation annotations (file or dataset directory).
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// ignore, include or exclude.
    #[arg(long)]
    pub scenario: Option<OcclusionScenario>,
    /// Recurrent passes T.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub val_pckh: Option<f64>,
}

fn read_log(dir: &Path) -> CliResult<TrainLog> {
    let steps = dir.join("train_steps.csv");
    let epochs = dir.join("train_epochs.csv");
    if !(steps.exists() && epochs.exists()) {
        return Ok(TrainLog::default());
    }
    let s = std::fs::read_to_string(steps).map_err(Error::from)?;
    let e = std::fs::read_to_string(epochs).map_err(Error::from)?;
    Ok(TrainLog::from_csv(&s, &e)?)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let mut cfg = load_config(&args.common)?;
    if let Some(d) = &args.data {
        cfg.data.train = Some(d.clone());
    }
    if let Some(v) = &args.val {
        cfg.data.val = Some(v.clone());
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    if let Some(s) = args.scenario {
        cfg.train.scenario = s;
    }
    if let Some(t) = args.iterations {
        cfg.model.iterations = Some(t);
    }
    if args.quiet {
        cfg.train.progress = false;
    }
    cfg.train.validate()?;
    let out = require_out(&args.common, "train")?;
    let skel = cfg.skeleton()?;
    let model_cfg = cfg.model_config(&skel)?;

    let data = match &cfg.data.train {
        Some(p) => load_dataset(p, &skel)?,
        None => synthesize(&cfg, &skel, model_cfg.input_size, cfg.generate.count, cfg.generate.seed)?,
    };
    let (train, val) = match &cfg.data.val {
        Some(p) => (data, Some(load_dataset(p, &skel)?)),
        None if cfg.data.holdout > 0 => {
            let (t, v) = data.split(cfg.data.holdout);
            (t, Some(v))
        }
        None => (data, None),
    };
    if train.is_empty() {
        return Err(config_err("training set is empty"));
    }
    check_size(&train, &model_cfg, "training")?;
    if let Some(v) = &val {
        check_size(v, &model_cfg, "validation")?;
    }

    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, &skel, Some(&model_cfg))?;
            let log = read_log(path.parent().unwrap_or(Path::new(".")))?;
            Trainer::resume(ckpt, cfg.train.clone(), log)?
        }
        None => Trainer::new(PoseNet::new(model_cfg, cfg.train.seed)?, cfg.train.clone())?,
    };
    prepare_out(&out, args.common.force)?;
    write_resolved(&out, &cfg)?;
    trainer.fit(&train, val.as_ref(), Some(&out))?;
    trainer.save(&out, Some(&skel))?;

    let log = trainer.log();
    let summary = TrainSummary {
        checkpoint: out.join(CHECKPOINT_FILE),
        steps: trainer.state().step,
        epochs: trainer.state().epoch,
        final_loss: log.steps().last().map(|s| s.loss),
        val_pckh: log.epochs().last().and_then(|e| e.val_pckh),
    };
    println!(
        "trained {} epochs, {} steps; checkpoint {}",
        summary.epochs,
        summary.steps,
        summary.checkpoint.display()
    );
    Ok(summary)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotations (file or dataset directory); synthesized from `[generate]` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Average heatmaps over input scales 0.9, 1.0 and 1.1.
    #[arg(long)]
    pub scale_aug: bool,
    /// Recurrent passes to run.
    #[arg(long)]
    pub passes: Option<usize>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let mut cfg = load_config(&args.common)?;
    if args.scale_aug {
        cfg.eval.scale_augmentation = true;
    }
    if args.passes.is_some() {
        cfg.eval.passes = args.passes;
    }
    let skel = skeleton_for(&args.common, &cfg, &args.checkpoint)?;
    let expected = match &args.common.config {
        Some(_) => Some(cfg.model_config(&skel)?),
        None => None,
    };
    let ckpt = load_checkpoint(&args.checkpoint, &skel, expected.as_ref())?;
    let model = ckpt.model;
    let data_path = args.data.clone().or_else(|| cfg.data.val.clone()).or_else(|| cfg.data.train.clone());
    let data = match &data_path {
        Some(p) => load_dataset(p, &skel)?,
        None => synthesize(&cfg, &skel, model.config().input_size, cfg.generate.count, cfg.generate.seed)?,
    };
    if data.is_empty() {
        return Err(config_err("evaluation set is empty"));
    }
    check_size(&data, model.config(), "evaluation")?;
    let mut opts = cfg.eval_options();
    opts.passes = Some(cfg.eval.passes.unwrap_or(model.config().iterations));
    let report = evaluate(&model, &data, &opts)?;

    if let Some(out) = &args.common.out {
        prepare_out(out, args.common.force)?;
        write_resolved(out, &cfg)?;
        write_json(&out.join("metrics.json"), &report)?;
        write_text(&out.join("pckh.csv"), &metrics_csv(&skel.keypoints, &report.pckh))?;
        write_text(&out.join("pck.csv"), &metrics_csv(&skel.keypoints, &report.pck))?;
        if let Some(pr) = &report.visibility {
            write_text(&out.join("visibility_pr.csv"), &pr_csv(pr))?;
        }
    }
    println!("samples      {}", data.len());
    println!("PCKh@{}     {:.4} (AUC {:.4})", opts.alpha, report.pckh.overall, report.pckh.auc);
    println!("PCK@{}      {:.4}", opts.torso_alpha, report.pck.overall);
    let passes: Vec<String> = report.pckh_per_pass.iter().map(|p| format!("{p:.4}")).collect();
    println!("per pass     {}", passes.join(" "));
    println!("loss         {:.6}", report.loss.total);
    if let Some(pr) = &report.visibility {
        let note = if pr.trivial { " (no occluded keypoints)" } else { "" };
        println!("visibility AP {:.4}{note}", pr.ap);
    }
    Ok(report)
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Clone, Default, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation file or dataset directory whose images to run on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Recurrent passes to run; may exceed the trained count.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Write per-pass heatmap tensors and PGM overlays.
    #[arg(long)]
    pub heatmaps: bool,
    /// Image files (PPM or PNG) at the model's input size.
    pub images: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeypointPrediction {
    pub name: String,
    /// Input pixels.
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImagePrediction {
    pub image: String,
    /// Final pass.
    pub keypoints: Vec<KeypointPrediction>,
    /// Every pass, first to last.
    pub passes: Vec<Vec<KeypointPrediction>>,
}

fn keypoints(dets: &[Detection], skel: &SkeletonSpec) -> Vec<KeypointPrediction> {
    let s = OUTPUT_STRIDE as f64;
    dets.iter()
        .zip(&skel.keypoints)
        .map(|(d, name)| KeypointPrediction {
            name: name.clone(),
            x: d.position[0] * s,
            y: d.position[1] * s,
            response: d.response,
        })
        .collect()
}

/// Grey image with the strongest keypoint response per cell blended on top.
fn overlay(image: &Tensor<f32>, head: &[f32], keypoints: usize, side: usize) -> Vec<u8> {
    let size = image.shape()[2];
    let plane = size * size;
    let hplane = side * side;
    let px = image.data();
    let mut out = Vec::with_capacity(plane);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let grey = 0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i];
            let cell = (y / OUTPUT_STRIDE).min(side - 1) * side + (x / OUTPUT_STRIDE).min(side - 1);
            let heat = (0..keypoints).map(|k| head[k * hplane + cell]).fold(0.0f32, f32::max);
            let heat = (heat / 12.0).clamp(0.0, 1.0) * 255.0;
            out.push((0.4 * grey + 0.6 * heat).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<Vec<ImagePrediction>> {
    let cfg = load_config(&args.common)?;
    let out = require_out(&args.common, "predict")?;
    let skel = skeleton_for(&args.common, &cfg, &args.checkpoint)?;
    let model = load_checkpoint(&args.checkpoint, &skel, None)?.model;
    let mc = model.config().clone();
    let passes = args.iterations.unwrap_or(mc.iterations);
    if passes > mc.max_iterations {
        return Err(config_err(format!(
            "--iterations {passes} exceeds the model's max_iterations {}",
            mc.max_iterations
        )));
    }

    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    if let Some(d) = &args.data {
        let ann = annotations_path(d)?;
        for r in load_annotations(&ann)? {
            inputs.push((r.image.clone(), resolve_image(&ann, &r.image)));
        }
    }
    inputs.extend(args.images.iter().map(|p| (p.display().to_string(), p.clone())));
    if inputs.is_empty() {
        return Err(config_err("predict needs --data or image paths"));
    }
    let mut images = Vec::with_capacity(inputs.len());
    for (name, path) in &inputs {
        if !path.exists() {
            return Err(CliError::new(EXIT_MISSING, format!("image {} does not exist", path.display())));
        }
        let img = read_image(path)?;
        if img.shape()[1] != mc.input_size || img.shape()[2] != mc.input_size {
            return Err(config_err(format!(
                "image {name} is {}x{}, the model expects {2}x{2}",
                img.shape()[2],
                img.shape()[1],
                mc.input_size
            )));
        }
        images.push(img);
    }

    prepare_out(&out, args.common.force)?;
    write_resolved(&out, &cfg)?;
    let side = mc.heatmap_size();
    let channels = mc.heads_channels();
    let mut results = Vec::with_capacity(images.len());
    for (i, ((name, _), img)) in inputs.iter().zip(&images).enumerate() {
        let heads = predict_heads(&model, &[img], &[1.0], Some(passes))?;
        let mut per_pass = Vec::with_capacity(heads.per_pass.len());
        for (p, head) in heads.per_pass.iter().enumerate() {
            let dets = decode_head(head, mc.keypoints)?.remove(0);
            per_pass.push(keypoints(&dets, &skel));
            if args.heatmaps {
                let single = Tensor::new([channels, side, side], head.data().to_vec())?;
                let mut bytes = Vec::new();
                write_tensor(&mut bytes, &single)?;
                atomic_write(&out.join(format!("heatmaps/{i:04}_pass{p}.rhnt")), &bytes)?;
                let pixels = overlay(img, head.data(), mc.keypoints, side);
                write_pgm(&out.join(format!("overlays/{i:04}_pass{p}.pgm")), mc.input_size, mc.input_size, &pixels)?;
            }
        }
        results.push(ImagePrediction {
            image: name.clone(),
            keypoints: per_pass.last().cloned().unwrap_or_default(),
            passes: per_pass,
        });
    }
    write_json(&out.join("predictions.json"), &results)?;
    println!(
        "predicted {} images with {} passes; results in {}",
        results.len(),
        passes + 1,
        out.display()
    );
    Ok(results)
}

// ---------------------------------------------------------------- inspect

#[derive(Debug, Clone, Default, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Inspect the model stored in a checkpoint instead of the configured one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Model preset (desk or full) when no config is given.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Recurrent passes T shown in the receptive-field table.
    #[arg(long)]
    pub iterations: Option<usize>,
}

/// Parameter table, reference total for the full network and receptive field per pass.
pub fn inspect_text(model: &ModelConfig) -> CliResult<String> {
    let net = PoseNet::<f32>::new(model.clone(), 0)?;
    let report = count_parameters(&net);
    let mut s = String::new();
    let preset = match model.preset {
        Preset::Desk => "desk",
        Preset::Full => "full",
        Preset::Custom => "custom",
    };
    let _ = writeln!(
        s,
        "model: {preset}, input {0}x{0}, {1} keypoints, {2} parts, T = {3}",
        model.input_size, model.keypoints, model.parts, model.iterations
    );
    let _ = writeln!(s, "{report}");
    if model.preset == Preset::Full {
        let dev = (report.total as f64 - REFERENCE_TOTAL) / REFERENCE_TOTAL * 100.0;
        let _ = writeln!(s, "reference total: {:.1}M ({dev:+.1}%)", REFERENCE_TOTAL / 1e6);
    }
    let _ = writeln!(s, "\nreceptive field (input pixels)");
    let _ = writeln!(s, "{:<8} {:>10} {:>6}", "head", "traversals", "size");
    let _ = writeln!(s, "{:<8} {:>10} {:>6}", "aux", 0, receptive_field(model, 0));
    for p in 0..=model.iterations {
        let _ = writeln!(s, "{:<8} {:>10} {:>6}", format!("pass {p}"), p + 1, receptive_field(model, p + 1));
    }
    Ok(s)
}

pub fn cmd_inspect(args: &InspectArgs) -> CliResult<String> {
    let mut model = match &args.checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::new(EXIT_MISSING, format!("checkpoint {} does not exist", path.display())));
            }
            Checkpoint::load(path)?.model.config().clone()
        }
        None => {
            let mut cfg = load_config(&args.common)?;
            if let Some(p) = args.preset {
                if args.common.config.is_some() {
                    cfg.model.preset = p;
                } else {
                    cfg = RunConfig::for_preset(p);
                }
            }
            cfg.model_config(&cfg.skeleton()?)?
        }
    };
    if let Some(t) = args.iterations {
        model.iterations = t;
        model.max_iterations = model.max_iterations.max(t);
        model.validate()?;
    }
    let text = inspect_text(&model)?;
    if let Some(out) = &args.common.out {
        prepare_out(out, args.common.force)?;
        atomic_write(&out.join("inspect.txt"), text.as_bytes())?;
        if args.checkpoint.is_none() {
            write_resolved(out, &load_config(&args.common)?)?;
        }
    }
    Ok(text)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Coordinates checked per parameter tensor of the end-to-end model.
    #[arg(long, default_value_t = 6)]
    pub per_group: usize,
}

/// Relative-error bounds for the primitive and whole-network checks.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSummary {
    pub primitives: Vec<PrimitiveCheck>,
    pub end_to_end: Vec<GroupCheck>,
    pub seconds: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.primitives.iter().all(|c| c.max_rel_error < PRIMITIVE_TOLERANCE)
            && self.end_to_end.iter().all(|c| c.max_rel_error < END_TO_END_TOLERANCE)
    }
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<GradcheckSummary> {
    let seed = args.common.seed.unwrap_or(0);
    let start = Instant::now();
    let primitives = primitive_suite(seed, 1e-5)?;
    let end_to_end = end_to_end_gradcheck(seed, args.per_group.max(1))?;
    let summary = GradcheckSummary {
        primitives,
        end_to_end,
        seconds: start.elapsed().as_secs_f64(),
    };
    let mark = |ok: bool| if ok { "ok  " } else { "FAIL" };
    for c in &summary.primitives {
        println!("{} {:<40} {:.3e}", mark(c.max_rel_error < PRIMITIVE_TOLERANCE), c.name, c.max_rel_error);
    }
    for c in &summary.end_to_end {
        println!(
            "{} end-to-end {:<29} {:.3e} ({} coords)",
            mark(c.max_rel_error < END_TO_END_TOLERANCE),
            c.name,
            c.max_rel_error,
            c.checked
        );
    }
    println!("{:.2} s", summary.seconds);
    if let Some(out) = &args.common.out {
        prepare_out(out, args.common.force)?;
        let mut text = String::new();
        for c in &summary.primitives {
            let _ = writeln!(text, "{},{}", c.name, c.max_rel_error);
        }
        for c in &summary.end_to_end {
            let _ = writeln!(text, "end-to-end {},{}", c.name, c.max_rel_error);
        }
        atomic_write(&out.join("gradcheck.csv"), text.as_bytes())?;
    }
    if !summary.passed() {
        return Err(CliError::new(EXIT_FAILURE, "gradient check failed"));
    }
    Ok(summary)
}
