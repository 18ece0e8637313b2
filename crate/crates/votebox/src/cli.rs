//! Command line interface of the `votebox` binary.
//!
//! Subcommands cover the whole workflow: `generate` synthetic scenes,
//! `train` a model, `detect` objects, `eval` detection quality, `count`
//! instances, `gradcheck` the differentiable ops, and `ablate` the
//! context modules. Every run with a fixed seed and fixed inputs writes
//! byte-identical output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use crate::checks::gradient_suite;
use crate::config::{load_config, PipelineConfig};
use crate::context::ContextConfig;
use crate::evaluation::{
    count_by_detection, count_ground_truth, counting_metrics, evaluate_detections, EvalReport,
    ScenePair, DEFAULT_COUNT_CONFIDENCE,
};
use crate::pipeline::{detect_scene, train_toy, ModelParams};
use crate::scenes::{
    read_predictions, read_scene_dir, pair_scenes, synth_scenes, write_predictions,
    write_scene_dir, Scene,
};

#[derive(Parser)]
#[command(
    name = "votebox",
    about = "Desk-scale 3D object detection and counting on synthetic point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that builds a pipeline configuration.
#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the cascade IoU thresholds (comma-separated, non-decreasing).
    #[arg(long, value_name = "LIST")]
    stages: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(stages) = &self.stages {
            cfg.cascade.thresholds = parse_stage_list(stages)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_stage_list(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .with_context(|| format!("invalid stage threshold `{t}`"))
        })
        .collect()
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes into a directory.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory to fill with `.scene` files.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Index of the first scene; disjoint ranges give disjoint sets.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Train a model on a scene directory and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of training scenes.
        #[arg(long)]
        scenes: PathBuf,
        /// Output checkpoint path; the loss log goes to `<path>.loss`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run detection over a scene directory and write predictions.
    Detect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory of scenes to detect in.
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output predictions file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth (AP and mAP).
    Eval {
        /// Directory of scenes with ground truth.
        #[arg(long)]
        scenes: PathBuf,
        /// Predictions file produced by `detect`.
        #[arg(long)]
        pred: PathBuf,
        /// Restrict the report to one IoU threshold (0.25 or 0.5).
        #[arg(long)]
        iou: Option<f64>,
        /// Optional configuration file, used only for class display names.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare predicted and ground-truth instance counts per class.
    Count {
        /// Directory of scenes with ground truth.
        #[arg(long)]
        scenes: PathBuf,
        /// Predictions file produced by `detect`.
        #[arg(long)]
        pred: PathBuf,
        /// Confidence threshold for counting a detection.
        #[arg(long, default_value_t = DEFAULT_COUNT_CONFIDENCE)]
        conf: f64,
        /// Optional configuration file, used only for class display names.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every differentiable operation against finite differences.
    Gradcheck {
        /// Random trials per operation.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Seed for the random trial inputs.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train and score every combination of the three context modules.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scenes to train each combination on.
        #[arg(long, default_value_t = 40)]
        train_count: usize,
        /// Held-out scenes scored in the comparison table.
        #[arg(long, default_value_t = 10)]
        eval_count: usize,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point for the `votebox` binary.
pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out, count, start } => cmd_generate(&config, &out, count, start),
        Command::Train { config, scenes, checkpoint } => cmd_train(&config, &scenes, &checkpoint),
        Command::Detect { config, scenes, checkpoint, out } => {
            cmd_detect(&config, &scenes, &checkpoint, &out)
        }
        Command::Eval { scenes, pred, iou, config, out } => {
            cmd_eval(&scenes, &pred, iou, config.as_deref(), out.as_deref())
        }
        Command::Count { scenes, pred, conf, config, out } => {
            cmd_count(&scenes, &pred, conf, config.as_deref(), out.as_deref())
        }
        Command::Gradcheck { trials, tolerance, seed } => cmd_gradcheck(trials, tolerance, seed),
        Command::Ablate { config, train_count, eval_count, out } => {
            cmd_ablate(&config, train_count, eval_count, out.as_deref())
        }
    }
}

fn cmd_generate(config: &ConfigArgs, out: &Path, count: usize, start: usize) -> anyhow::Result<()> {
    let cfg = config.resolve()?;
    let scenes = synth_scenes(&cfg.synth, start, count)?;
    write_scene_dir(out, &scenes)
        .with_context(|| format!("writing scenes to {}", out.display()))?;
    println!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_train(config: &ConfigArgs, scenes_dir: &Path, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = config.resolve()?;
    let scenes = load_scenes(scenes_dir, Some(cfg.num_classes()))?;
    let started = Instant::now();
    let (params, report) = train_toy(&scenes, &cfg)?;
    params
        .save(checkpoint)
        .with_context(|| format!("writing checkpoint {}", checkpoint.display()))?;
    let log_path = loss_log_path(checkpoint);
    let mut log = String::new();
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        writeln!(log, "{epoch} {loss}")?;
    }
    std::fs::write(&log_path, log)
        .with_context(|| format!("writing loss log {}", log_path.display()))?;
    println!(
        "trained {} epochs on {} scenes in {:.1}s; final loss {:.6}",
        report.epoch_losses.len(),
        scenes.len(),
        started.elapsed().as_secs_f64(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
    );
    println!("checkpoint {}", checkpoint.display());
    Ok(())
}

fn cmd_detect(
    config: &ConfigArgs,
    scenes_dir: &Path,
    checkpoint: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = config.resolve()?;
    let scenes = load_scenes(scenes_dir, Some(cfg.num_classes()))?;
    let params = ModelParams::load_checkpoint(checkpoint, &cfg)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut predictions = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let dets = detect_scene(&scene.points, &params, &cfg)
            .with_context(|| format!("detecting in scene {}", scene.id))?;
        predictions.push((scene.id.clone(), dets));
    }
    write_predictions(out, &predictions)
        .with_context(|| format!("writing predictions {}", out.display()))?;
    let total: usize = predictions.iter().map(|(_, d)| d.len()).sum();
    println!(
        "wrote {total} detections across {} scenes to {}",
        predictions.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    scenes_dir: &Path,
    pred: &Path,
    iou: Option<f64>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let scenes = load_scenes(scenes_dir, None)?;
    let num_classes = scenes[0].num_classes;
    let predictions =
        read_predictions(pred).with_context(|| format!("reading predictions {}", pred.display()))?;
    let pairs = pair_scenes(&scenes, &predictions)?;
    let report = evaluate_detections(&pairs, num_classes)?;
    let names = display_names(config)?;
    let text = render_eval(&report, &names, iou)?;
    print!("{text}");
    write_optional(out, &text)
}

fn cmd_count(
    scenes_dir: &Path,
    pred: &Path,
    conf: f64,
    config: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let scenes = load_scenes(scenes_dir, None)?;
    let num_classes = scenes[0].num_classes;
    let predictions =
        read_predictions(pred).with_context(|| format!("reading predictions {}", pred.display()))?;
    let pairs = pair_scenes(&scenes, &predictions)?;
    let mut predicted = Vec::with_capacity(pairs.len());
    let mut truth = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        predicted.push(count_by_detection(&pair.detections, num_classes, conf)?);
        truth.push(count_ground_truth(&pair.ground_truth, num_classes)?);
    }
    let report = counting_metrics(&predicted, &truth)?;
    let names = display_names(config)?;
    let text = report.table(&names);
    print!("{text}");
    write_optional(out, &text)
}

fn cmd_gradcheck(trials: usize, tolerance: f64, seed: u64) -> anyhow::Result<()> {
    let started = Instant::now();
    let reports = gradient_suite(trials, tolerance, seed)?;
    let mut all_passed = true;
    for report in &reports {
        println!("{report}");
        all_passed &= report.passed;
    }
    println!(
        "{} operations x {trials} trials in {:.1}s",
        reports.len(),
        started.elapsed().as_secs_f64()
    );
    if !all_passed {
        bail!("gradient checks failed; see the report above");
    }
    Ok(())
}

fn cmd_ablate(
    config: &ConfigArgs,
    train_count: usize,
    eval_count: usize,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let base = config.resolve()?;
    if train_count == 0 || eval_count == 0 {
        bail!("--train-count and --eval-count must both be positive");
    }
    let train_scenes = synth_scenes(&base.synth, 0, train_count)?;
    let eval_scenes = synth_scenes(&base.synth, train_count, eval_count)?;
    let num_classes = base.num_classes();

    let mut table = String::new();
    writeln!(
        table,
        "{:<5} {:<5} {:<5} {:>10} {:>10} {:>10}",
        "gcm", "pcm", "hcm", "mAP@0.25", "mAP@0.50", "m-RMSE"
    )?;
    for ctx in ContextConfig::all_combinations() {
        let mut cfg = base.clone();
        cfg.context.enable_gcm = ctx.enable_gcm;
        cfg.context.enable_pcm = ctx.enable_pcm;
        cfg.context.enable_hcm = ctx.enable_hcm;
        let (params, _) = train_toy(&train_scenes, &cfg)?;
        let mut pairs = Vec::with_capacity(eval_scenes.len());
        let mut predicted = Vec::with_capacity(eval_scenes.len());
        let mut truth = Vec::with_capacity(eval_scenes.len());
        for scene in &eval_scenes {
            let dets = detect_scene(&scene.points, &params, &cfg)
                .with_context(|| format!("detecting in scene {}", scene.id))?;
            predicted.push(count_by_detection(&dets, num_classes, cfg.count_confidence)?);
            truth.push(count_ground_truth(&scene.gt, num_classes)?);
            pairs.push(ScenePair {
                scene_id: scene.id.clone(),
                detections: dets,
                ground_truth: scene.gt.clone(),
            });
        }
        let eval = evaluate_detections(&pairs, num_classes)?;
        let counts = counting_metrics(&predicted, &truth)?;
        writeln!(
            table,
            "{:<5} {:<5} {:<5} {:>10.4} {:>10.4} {:>10.4}",
            on_off(ctx.enable_gcm),
            on_off(ctx.enable_pcm),
            on_off(ctx.enable_hcm),
            eval.map_25,
            eval.map_50,
            counts.m_rmse,
        )?;
    }
    print!("{table}");
    write_optional(out, &table)
}

fn on_off(flag: bool) -> &'static str {
    if flag { "on" } else { "off" }
}

/// Reads a scene directory and checks that every scene declares the same
/// class count (and, if given, the one the configuration expects).
fn load_scenes(dir: &Path, expected_classes: Option<usize>) -> anyhow::Result<Vec<Scene>> {
    let scenes =
        read_scene_dir(dir).with_context(|| format!("reading scenes from {}", dir.display()))?;
    if scenes.is_empty() {
        bail!("no .scene files found in {}", dir.display());
    }
    let expected = expected_classes.unwrap_or(scenes[0].num_classes);
    for scene in &scenes {
        if scene.num_classes != expected {
            bail!(
                "scene {} declares {} classes but {} were expected",
                scene.id,
                scene.num_classes,
                expected
            );
        }
    }
    Ok(scenes)
}

fn display_names(config: Option<&Path>) -> anyhow::Result<Vec<String>> {
    match config {
        Some(path) => {
            let cfg = load_config(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Ok(cfg.class_names())
        }
        None => Ok(Vec::new()),
    }
}

fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".loss");
    PathBuf::from(name)
}

fn write_optional(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    if let Some(path) = path {
        std::fs::write(path, text)
            .with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

/// Renders the AP table, optionally restricted to a single IoU threshold.
fn render_eval(report: &EvalReport, names: &[String], iou: Option<f64>) -> anyhow::Result<String> {
    let Some(threshold) = iou else {
        return Ok(report.table(names));
    };
    let index = report
        .iou_thresholds
        .iter()
        .position(|&t| (t - threshold).abs() < 1e-9)
        .ok_or_else(|| {
            anyhow::anyhow!(
                "--iou must be one of {:?}, got {threshold}",
                report.iou_thresholds
            )
        })?;
    let name = |id: usize| -> String {
        names
            .get(id)
            .cloned()
            .unwrap_or_else(|| format!("class{id}"))
    };
    let mut out = String::new();
    write!(out, "{:<12}", "metric")?;
    for class in &report.classes {
        write!(out, "{:>12}", name(class.class_id))?;
    }
    writeln!(out, "{:>12}", "mAP")?;
    write!(out, "{:<12}", format!("AP@{:.2}", report.iou_thresholds[index]))?;
    for class in &report.classes {
        write!(out, "{:>12.4}", class.ap[index])?;
    }
    let mean = if index == 0 { report.map_25 } else { report.map_50 };
    writeln!(out, "{mean:>12.4}")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists_parse_and_reject_garbage() {
        assert_eq!(parse_stage_list("0.5,0.55, 0.6").unwrap(), vec![0.5, 0.55, 0.6]);
        assert!(parse_stage_list("0.5,oops").is_err());
    }

    #[test]
    fn eval_rendering_can_focus_on_one_threshold() {
        let report = EvalReport {
            iou_thresholds: vec![0.25, 0.50],
            classes: vec![crate::evaluation::ClassEval {
                class_id: 0,
                gt_count: 3,
                ap: vec![0.75, 0.5],
                pr_curves: vec![Vec::new(), Vec::new()],
            }],
            excluded_classes: vec![],
            map_25: 0.75,
            map_50: 0.5,
        };
        let full = render_eval(&report, &[], None).unwrap();
        assert!(full.contains("AP@0.25") && full.contains("AP@0.50"));
        let only = render_eval(&report, &["mug".to_string()], Some(0.5)).unwrap();
        assert!(only.contains("AP@0.50") && !only.contains("AP@0.25"));
        assert!(only.contains("mug"));
        assert!(render_eval(&report, &[], Some(0.4)).is_err());
    }
}
