use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use setpredict_core::dataset::{export_coco, ingest, write_atomic, CocoAnnotations, CocoResult};
use setpredict_core::eval::{ap_vs_iou_sweep, coco_summary, write_pr_csv, write_sweep_csv, EvalImage, MetricsReport, ScoredDetection};
use setpredict_core::geometry::BoundingBox;
use setpredict_core::gradcore::{checkpoint_bytes, read_checkpoint};
use setpredict_core::losses::LossBreakdown;
use setpredict_core::model::{Detection, ImageInput, Model};
use setpredict_core::preprocess::{preprocess_pipeline, read_image, write_image, DistanceMetric, PreprocessMode, SmudgeConfig};
use setpredict_core::synth::generate;

use crate::config::RunConfig;
use crate::experiment::{self, RunOutcome, RunSpec};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "setpredict", version, about = "NMS-free set-prediction detection for document pages")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single-key override, `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig, CliError> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic page dataset (images/ and annotations.json).
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_objects: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Binarize, dilate and/or smudge one image.
    Preprocess {
        #[arg(long, default_value = "raw")]
        mode: PreprocessMode,
        #[arg(long, default_value_t = 4.0)]
        decay: f64,
        #[arg(long, default_value = "l2")]
        metric: DistanceMetric,
        input: PathBuf,
        output: PathBuf,
    },
    /// Train a model; writes logs and checkpoints into `checkpoint.path`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a checkpoint on images, or on every image of an annotation file.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<checkpoint.path>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `detect.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        /// Emit a COCO results file for every image of this annotation file.
        #[arg(long, conflicts_with = "images")]
        coco: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        images: Vec<PathBuf>,
    },
    /// COCO-style metrics of a results file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "csv")]
        report: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Plot-ready CSVs: AP over IoU 0.50..1.00 and precision/recall curves.
    Plot {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    match cli.command {
        Command::Synth {
            count,
            seed,
            max_objects,
            out,
            cfg,
        } => {
            let mut c = cfg.load()?;
            if let Some(v) = count {
                c.set("synth.count", &v.to_string())?;
            }
            if let Some(v) = seed {
                c.set("synth.seed", &v.to_string())?;
            }
            if let Some(v) = max_objects {
                c.set("synth.max_objects", &v.to_string())?;
            }
            let path = cmd_synth(&c, &out)?;
            println!("{}", path.display());
        }
        Command::Preprocess {
            mode,
            decay,
            metric,
            input,
            output,
        } => cmd_preprocess(mode, &SmudgeConfig { decay, metric }, &input, &output)?,
        Command::Train { cfg } => {
            let c = cfg.load()?;
            let out = cmd_train(&c)?;
            if let Some(r) = out.final_report() {
                println!("final mAP {:.4} AP50 {:.4} AP75 {:.4}", r.map, r.ap50, r.ap75);
            }
        }
        Command::Detect {
            cfg,
            checkpoint,
            threshold,
            coco,
            out,
            images,
        } => {
            let mut c = cfg.load()?;
            if let Some(t) = threshold {
                c.set("detect.threshold", &t.to_string())?;
            }
            let ckpt = checkpoint.unwrap_or_else(|| c.run_dir().join("final.ckpt"));
            let json = match coco {
                Some(ann) => serde_json::to_string_pretty(&cmd_detect_coco(&c, &ckpt, &ann)?)?,
                None => {
                    if images.is_empty() {
                        return Err(CliError::Usage("detect needs image paths or --coco".into()));
                    }
                    serde_json::to_string_pretty(&cmd_detect(&c, &ckpt, &images)?)?
                }
            };
            emit(out.as_deref(), json.as_bytes())?;
        }
        Command::Eval {
            pred,
            gt,
            report,
            out,
            cfg,
        } => {
            let c = cfg.load()?;
            let r = cmd_eval(&c, &pred, &gt)?;
            let mut buf = Vec::new();
            match report {
                ReportFormat::Csv => r.write_csv(&mut buf)?,
                ReportFormat::Json => buf = serde_json::to_vec_pretty(&r)?,
            }
            emit(out.as_deref(), &buf)?;
        }
        Command::Plot {
            pred,
            gt,
            out_dir,
            cfg,
        } => {
            let c = cfg.load()?;
            for p in cmd_plot(&c, &pred, &gt, &out_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => write_atomic(p, bytes)?,
        None => {
            let mut o = std::io::stdout().lock();
            o.write_all(bytes)?;
            o.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let synth = generate(&cfg.scene()?, cfg.get("synth.count")?)?;
    let short: usize = synth.shortfall.iter().sum();
    if short > 0 {
        eprintln!(
            "{short} requested objects could not be placed on {} pages",
            synth.shortfall.iter().filter(|&&s| s > 0).count()
        );
    }
    Ok(export_coco(&synth.dataset, out)?)
}

pub fn cmd_preprocess(mode: PreprocessMode, smudge: &SmudgeConfig, input: &Path, output: &Path) -> Result<(), CliError> {
    let img = read_image(input)?;
    write_image(&preprocess_pipeline(&img, mode, smudge)?, output)?;
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.effective";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

pub fn run_spec(cfg: &RunConfig) -> Result<RunSpec, CliError> {
    Ok(RunSpec {
        model: cfg.model()?,
        train: cfg.train()?,
        exec: cfg.execution()?,
        steps: cfg.get("train.steps")?,
        eval_every: cfg.get("train.eval_every")?,
        eval: cfg.eval_options()?,
    })
}

/// Trains per `cfg`. The run directory receives the effective config,
/// `metrics.csv` (one row per step), `eval.csv` (one row per evaluation on
/// the held-out tail, or on the training set when `train.holdout = 0`),
/// `best.ckpt` and `final.ckpt`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let spec = run_spec(cfg)?;
    let holdout: f64 = cfg.get("train.holdout")?;
    if !(0.0..1.0).contains(&holdout) {
        return Err(CliError::Usage(format!("train.holdout must be in [0, 1), got {holdout}")));
    }
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_string().as_bytes())?;

    let (mode, smudge) = cfg.preprocess()?;
    let ds = experiment::load_dataset(cfg)?;
    let (train_ds, held_ds) = ds.split_tail(holdout);
    if train_ds.is_empty() {
        return Err(CliError::Data("no training images".into()));
    }
    let patch = spec.model.patch;
    let train = experiment::prepare(&train_ds, mode, &smudge, patch)?;
    let held = if holdout > 0.0 {
        experiment::prepare(&held_ds, mode, &smudge, patch)?
    } else {
        train.clone()
    };

    let metrics = RefCell::new(BufWriter::new(File::create(dir.join(METRICS_FILE))?));
    writeln!(metrics.borrow_mut(), "step,{},grad_norm", LossBreakdown::CSV_HEADER)?;
    let mut evals = BufWriter::new(File::create(dir.join(EVAL_FILE))?);
    writeln!(evals, "step,mAP,AP50,AP75,AR,precision,recall,F1")?;
    let outcome = experiment::run(
        &spec,
        &train,
        &held,
        |r| {
            writeln!(metrics.borrow_mut(), "{},{},{}", r.step, r.loss.csv_row(), r.grad_norm)?;
            Ok(())
        },
        |p, model, improved| {
            let m = &p.report;
            writeln!(
                evals,
                "{},{},{},{},{},{},{},{}",
                p.step, m.map, m.ap50, m.ap75, m.ar, m.precision, m.recall, m.f1
            )?;
            evals.flush()?;
            metrics.borrow_mut().flush()?;
            if improved {
                write_atomic(&dir.join(BEST_CKPT), &checkpoint_bytes(&model.params))?;
            }
            Ok(())
        },
    );
    metrics.into_inner().flush()?;
    evals.flush()?;
    let outcome = outcome?;
    write_atomic(&dir.join(FINAL_CKPT), &checkpoint_bytes(&outcome.model.params))?;
    Ok(outcome)
}

/// Loads a checkpoint into the model `cfg` describes.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model, CliError> {
    let file = File::open(checkpoint).map_err(|e| CliError::Data(format!("{}: {e}", checkpoint.display())))?;
    let params = read_checkpoint(std::io::BufReader::new(file))?;
    Ok(Model::from_params(cfg.model()?, params)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    /// Index of the matching query that produced this entry.
    pub query: usize,
    pub class_id: usize,
    pub class: String,
    pub score: f64,
    /// Normalized `cx, cy, w, h` on the input image.
    pub bbox: [f64; 4],
    /// Absolute pixels, top-left `x, y, w, h`.
    pub bbox_xywh: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub threshold: f64,
    pub detections: Vec<DetectedObject>,
}

/// Whether a query's output is reported. At threshold 0 every query is
/// reported; otherwise queries won by the no-object class are dropped and
/// the score must reach the threshold. There is no suppression step.
pub fn keep_detection(d: &Detection, threshold: f64) -> bool {
    threshold <= 0.0 || (!d.is_no_object && d.score >= threshold)
}

/// Raw per-query detections on one image file, boxes normalized to the
/// original (unpadded) image.
pub fn detect_image(cfg: &RunConfig, model: &Model, path: &Path) -> Result<(usize, usize, Vec<Detection>), CliError> {
    let (mode, smudge) = cfg.preprocess()?;
    let img = preprocess_pipeline(&read_image(path)?, mode, &smudge)?;
    let padded = experiment::pad_to_multiple(&img, model.cfg.patch);
    let input = ImageInput::from_gray(&padded, model.cfg.patch)?;
    let from = (padded.width, padded.height);
    let to = (img.width, img.height);
    let dets = model
        .detect(&input)?
        .into_iter()
        .map(|mut d| {
            d.bbox = experiment::rescale_box(d.bbox, from, to);
            d
        })
        .collect();
    Ok((img.width, img.height, dets))
}

pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf]) -> Result<Vec<ImageDetections>, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let threshold: f64 = cfg.get("detect.threshold")?;
    let names = cfg.class_names();
    images
        .iter()
        .map(|path| {
            let (w, h, dets) = detect_image(cfg, &model, path)?;
            let detections = dets
                .iter()
                .enumerate()
                .filter(|(_, d)| keep_detection(d, threshold))
                .map(|(q, d)| DetectedObject {
                    query: q,
                    class_id: d.class_id,
                    class: names[d.class_id].clone(),
                    score: d.score,
                    bbox: d.bbox.to_array(),
                    bbox_xywh: d.bbox.to_xywh_pixels(w as f64, h as f64),
                })
                .collect();
            Ok(ImageDetections {
                image: path.display().to_string(),
                width: w,
                height: h,
                threshold,
                detections,
            })
        })
        .collect()
}

/// COCO results for every image of an annotation file.
pub fn cmd_detect_coco(cfg: &RunConfig, checkpoint: &Path, annotations: &Path) -> Result<Vec<CocoResult>, CliError> {
    let model = load_model(cfg, checkpoint)?;
    let threshold: f64 = cfg.get("detect.threshold")?;
    let (mode, smudge) = cfg.preprocess()?;
    let ds = ingest(annotations)?;
    let mut out = Vec::new();
    for s in &ds.samples {
        let img = preprocess_pipeline(&s.image, mode, &smudge)?;
        let padded = experiment::pad_to_multiple(&img, model.cfg.patch);
        let dets = model.detect(&ImageInput::from_gray(&padded, model.cfg.patch)?)?;
        for d in dets.iter().filter(|d| keep_detection(d, threshold)) {
            let b = experiment::rescale_box(d.bbox, (padded.width, padded.height), (img.width, img.height));
            out.push(CocoResult {
                image_id: s.id,
                category_id: d.class_id as u64 + 1,
                bbox: b.to_xywh_pixels(img.width as f64, img.height as f64),
                score: d.score,
            });
        }
    }
    Ok(out)
}

/// Pairs a results file with its ground truth, image by image in
/// annotation order.
pub fn load_eval_images(pred: &Path, gt: &Path) -> Result<(Vec<EvalImage>, usize), CliError> {
    let coco = CocoAnnotations::read(gt)?;
    let text = fs::read_to_string(pred).map_err(|e| CliError::Data(format!("{}: {e}", pred.display())))?;
    let results: Vec<CocoResult> =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", pred.display())))?;
    let num_classes = coco.categories.len();
    let mut objects = coco.objects_by_image();
    let index: std::collections::HashMap<u64, usize> = coco.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut images: Vec<EvalImage> = coco
        .images
        .iter()
        .map(|im| EvalImage {
            detections: Vec::new(),
            ground_truth: objects.remove(&im.id).unwrap_or_default(),
        })
        .collect();
    for (n, r) in results.iter().enumerate() {
        let &i = index
            .get(&r.image_id)
            .ok_or_else(|| CliError::Data(format!("result {n} references missing image id {}", r.image_id)))?;
        if r.category_id == 0 || r.category_id > num_classes as u64 {
            return Err(CliError::Data(format!("result {n} references missing category id {}", r.category_id)));
        }
        if !r.score.is_finite() || r.bbox.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Data(format!("result {n} has a non-finite score or bbox")));
        }
        let im = &coco.images[i];
        images[i].detections.push(ScoredDetection {
            class_id: (r.category_id - 1) as usize,
            score: r.score,
            bbox: BoundingBox::from_xywh_pixels(r.bbox, im.width as f64, im.height as f64),
        });
    }
    Ok((images, num_classes))
}

pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<MetricsReport, CliError> {
    let (images, nc) = load_eval_images(pred, gt)?;
    Ok(coco_summary(&images, nc, &cfg.eval_options()?)?)
}

pub const SWEEP_FILE: &str = "ap_vs_iou.csv";
pub const PR_FILE: &str = "pr_curve.csv";

/// Writes the AP-vs-IoU sweep and the PR curves at `eval.iou`.
pub fn cmd_plot(cfg: &RunConfig, pred: &Path, gt: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (images, nc) = load_eval_images(pred, gt)?;
    let opts = cfg.eval_options()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let mut sweep = Vec::new();
    write_sweep_csv(&ap_vs_iou_sweep(&images, nc, &opts)?, &mut sweep)?;
    let mut pr = Vec::new();
    write_pr_csv(&images, nc, opts.pr_iou, &mut pr)?;
    let paths = vec![out_dir.join(SWEEP_FILE), out_dir.join(PR_FILE)];
    write_atomic(&paths[0], &sweep)?;
    write_atomic(&paths[1], &pr)?;
    Ok(paths)
}
