//! Dataset preparation and the training loop shared by `train` and the
//! acceptance experiments.

use setpredict_core::dataset::{ingest, Dataset, Sample};
use setpredict_core::eval::{coco_summary, EvalOptions, MetricsReport};
use setpredict_core::exec::Execution;
use setpredict_core::geometry::BoundingBox;
use setpredict_core::matching::GroundTruthObject;
use setpredict_core::model::{BatchSampler, Model, ModelConfig, StepReport, TrainConfig, TrainExample, Trainer};
use setpredict_core::preprocess::{preprocess_pipeline, GrayImage, PreprocessMode, SmudgeConfig};
use setpredict_core::synth::{generate, SceneSpec};
use setpredict_core::Result;

use crate::config::RunConfig;
use crate::CliError;

/// The configured dataset: ingested from `data.path` or synthesized from
/// `synth.*`, not yet preprocessed.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let ds = match cfg.data_path() {
        Some(p) => ingest(&p)?,
        None => generate(&cfg.scene()?, cfg.get("synth.count")?)?.dataset,
    };
    let names = cfg.class_names();
    if ds.class_names.len() != names.len() {
        return Err(CliError::Data(format!(
            "dataset has {} categories {:?} but data.classes lists {}",
            ds.class_names.len(),
            ds.class_names,
            names.len()
        )));
    }
    Ok(ds)
}

/// Pads with white on the right and bottom up to a multiple of `patch`.
pub fn pad_to_multiple(img: &GrayImage, patch: usize) -> GrayImage {
    let w = img.width.div_ceil(patch) * patch;
    let h = img.height.div_ceil(patch) * patch;
    if (w, h) == (img.width, img.height) {
        return img.clone();
    }
    let mut out = GrayImage::filled(w, h, 255);
    for y in 0..img.height {
        out.pixels[y * w..y * w + img.width].copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
    }
    out
}

/// Maps a box normalized to a `from` frame into the `to` frame, both
/// anchored at the top-left corner.
pub fn rescale_box(b: BoundingBox, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
    let sx = from.0 as f64 / to.0 as f64;
    let sy = from.1 as f64 / to.1 as f64;
    BoundingBox::new(b.cx * sx, b.cy * sy, b.w * sx, b.h * sy)
}

/// Preprocesses and pads one image; the boxes follow the padding.
pub fn prepare_sample(
    sample: &Sample,
    mode: PreprocessMode,
    smudge: &SmudgeConfig,
    patch: usize,
) -> Result<TrainExample> {
    let img = preprocess_pipeline(&sample.image, mode, smudge)?;
    let padded = pad_to_multiple(&img, patch);
    let from = (img.width, img.height);
    let to = (padded.width, padded.height);
    let objects = sample
        .objects
        .iter()
        .map(|o| GroundTruthObject::new(o.class_id, rescale_box(o.bbox, from, to)))
        .collect();
    TrainExample::from_sample(
        &Sample {
            id: sample.id,
            file_name: sample.file_name.clone(),
            image: padded,
            objects,
        },
        patch,
    )
}

pub fn prepare(ds: &Dataset, mode: PreprocessMode, smudge: &SmudgeConfig, patch: usize) -> Result<Vec<TrainExample>> {
    ds.samples.iter().map(|s| prepare_sample(s, mode, smudge, patch)).collect()
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub exec: Execution,
    pub steps: u64,
    /// 0 evaluates only after the last step.
    pub eval_every: u64,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone)]
pub struct EvalPoint {
    /// Optimizer steps taken before this evaluation.
    pub step: u64,
    pub report: MetricsReport,
}

pub struct RunOutcome {
    pub model: Model,
    pub history: Vec<StepReport>,
    pub evals: Vec<EvalPoint>,
    /// Parameters at the evaluation with the highest AP50 (earliest on ties).
    pub best: Option<(u64, Model)>,
}

impl RunOutcome {
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.evals.last().map(|e| &e.report)
    }

    /// First evaluated step whose AP50 reaches `target`.
    pub fn steps_to_ap50(&self, target: f64) -> Option<u64> {
        self.evals.iter().find(|e| e.report.ap50 >= target).map(|e| e.step)
    }
}

pub fn evaluate(model: &Model, examples: &[TrainExample], opts: &EvalOptions, exec: Execution) -> Result<MetricsReport> {
    coco_summary(&model.eval_images(examples, exec)?, model.cfg.num_classes, opts)
}

/// Trains from a fresh model seeded with `train.seed`. `on_step` and
/// `on_eval` see every step report and evaluation as they happen.
pub fn run(
    spec: &RunSpec,
    train: &[TrainExample],
    held_out: &[TrainExample],
    mut on_step: impl FnMut(&StepReport) -> Result<()>,
    mut on_eval: impl FnMut(&EvalPoint, &Model, bool) -> Result<()>,
) -> Result<RunOutcome> {
    let model = Model::new(spec.model, spec.train.seed)?;
    let mut trainer = Trainer::new(model, spec.train, spec.exec)?;
    let sampler = BatchSampler::new(train.len(), spec.train.batch, spec.train.seed)?;
    let mut history = Vec::with_capacity(spec.steps as usize);
    let mut evals = Vec::new();
    let mut best: Option<(u64, Model, f64)> = None;
    for step in 0..spec.steps {
        let batch: Vec<&TrainExample> = sampler.batch(step).into_iter().map(|i| &train[i]).collect();
        let report = trainer.train_step(&batch)?;
        on_step(&report)?;
        history.push(report);
        let taken = step + 1;
        let due = taken == spec.steps || (spec.eval_every > 0 && taken % spec.eval_every == 0);
        if due && !held_out.is_empty() {
            let point = EvalPoint {
                step: taken,
                report: evaluate(&trainer.model, held_out, &spec.eval, spec.exec)?,
            };
            let improved = best.as_ref().is_none_or(|b| point.report.ap50 > b.2);
            if improved {
                best = Some((taken, trainer.model.clone(), point.report.ap50));
            }
            on_eval(&point, &trainer.model, improved)?;
            evals.push(point);
        }
    }
    Ok(RunOutcome {
        model: trainer.model,
        history,
        evals,
        best: best.map(|(s, m, _)| (s, m)),
    })
}

/// Scene used by the desk-scale experiments: smaller pages than the
/// `synth.*` defaults so 2000 steps fit on one core.
pub fn desk_scene(max_objects: usize) -> SceneSpec {
    SceneSpec {
        page_width: 64,
        page_height: 64,
        max_objects,
        ..SceneSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_keeps_pixels_and_boxes() {
        let mut img = GrayImage::filled(10, 6, 0);
        img.set(9, 5, 7);
        let p = pad_to_multiple(&img, 4);
        assert_eq!((p.width, p.height), (12, 8));
        assert_eq!(p.get(9, 5), 7);
        assert_eq!(p.get(10, 5), 255);
        assert_eq!(p.get(0, 6), 255);
        // the box covering the whole original page
        let b = rescale_box(BoundingBox::new(0.5, 0.5, 1.0, 1.0), (10, 6), (12, 8));
        let px = b.to_xywh_pixels(12.0, 8.0);
        for (a, e) in px.iter().zip([0.0, 0.0, 10.0, 6.0]) {
            assert!((a - e).abs() < 1e-12, "{px:?}");
        }
        let back = rescale_box(b, (12, 8), (10, 6));
        assert!((back.w - 1.0).abs() < 1e-12 && (back.cy - 0.5).abs() < 1e-12);
    }
}
