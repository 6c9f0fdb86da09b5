use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, ImageInput, Model};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::BoundingBox;
use crate::gradcore::{clip_grad_norm, AdamState, AdamW, GradcheckReport, StepOutcome, Tape};
use crate::losses::{total_loss_with_grad, LossBreakdown, LossConfig};
use crate::matching::GroundTruthObject;
use crate::querygen::{build_query_groups, NoiseConfig, QuerySet};
use crate::synth::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            lr: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 0.0,
            seed: 0,
            noise: NoiseConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument(
                "train.batch must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite())
            || self.weight_decay < 0.0
            || self.clip_norm < 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "bad optimizer settings lr={} weight_decay={} clip_norm={}",
                self.lr, self.weight_decay, self.clip_norm
            )));
        }
        self.noise.validate()?;
        self.loss.validate()
    }
}

/// One page ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: u64,
    pub input: ImageInput,
    pub objects: Vec<GroundTruthObject>,
}

/// Loss and parameter gradients of one page.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrads {
    pub loss: LossBreakdown,
    /// Indexed like the model's parameter store.
    pub grads: Vec<Vec<f64>>,
}

/// Forward, loss over every decoder layer (or just the last without
/// auxiliary losses) and backward, for a fixed query set.
pub fn image_loss_and_grads(
    model: &Model,
    input: &ImageInput,
    objects: &[GroundTruthObject],
    qs: &QuerySet,
    loss_cfg: &LossConfig,
) -> Result<ImageGrads> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let out = forward(&mut tape, model, &bound, input, qs)?;
    let first = if loss_cfg.aux_layers {
        0
    } else {
        out.layers.len() - 1
    };
    let mut loss = LossBreakdown::default();
    let mut seeds = Vec::new();
    for layer in &out.layers[first..] {
        let lv = tape.value(layer.logits);
        let logits: Vec<Vec<f64>> = (0..lv.rows()).map(|r| lv.row(r).to_vec()).collect();
        let bv = tape.value(layer.boxes);
        let boxes: Vec<BoundingBox> = (0..bv.rows())
            .map(|r| {
                let b = bv.row(r);
                BoundingBox::new(b[0], b[1], b[2], b[3])
            })
            .collect();
        let (l, g, _) = total_loss_with_grad(&logits, &boxes, qs, objects, loss_cfg)?;
        loss.add(&l);
        seeds.push((layer.logits, g.logits.concat()));
        seeds.push((layer.boxes, g.boxes.concat()));
    }
    if !loss.is_finite() {
        return Ok(ImageGrads {
            loss,
            grads: Vec::new(),
        });
    }
    tape.backward_seeded(&seeds)?;
    Ok(ImageGrads {
        grads: bound.grads(&tape, &model.params),
        loss,
    })
}

/// Epoch-wise shuffled batches; the permutation of epoch `e` depends only
/// on `(seed, e)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::InvalidArgument(
                "cannot sample batches from an empty dataset".into(),
            ));
        }
        Ok(Self { len, batch, seed })
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.len).collect();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed, epoch,
        )));
        p
    }

    /// Dataset indices of batch `step`.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let start = step as usize * self.batch;
        let mut perm_epoch = u64::MAX;
        let mut perm = Vec::new();
        (start..start + self.batch)
            .map(|i| {
                let epoch = (i / self.len) as u64;
                if epoch != perm_epoch {
                    perm = self.permutation(epoch);
                    perm_epoch = epoch;
                }
                perm[i % self.len]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// 0-based index of the step just taken.
    pub step: u64,
    /// Batch mean.
    pub loss: LossBreakdown,
    /// Before clipping.
    pub grad_norm: f64,
    pub outcome: StepOutcome,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub exec: Execution,
    opt: AdamW,
    state: AdamState,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        let state = AdamState::new(&model.params);
        Ok(Self {
            model,
            cfg,
            exec,
            opt,
            state,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// The query set image `slot` of step `step` trains with.
    pub fn query_set(
        &self,
        step: u64,
        slot: usize,
        objects: &[GroundTruthObject],
    ) -> Result<QuerySet> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.cfg.seed, step), slot as u64));
        build_query_groups(
            objects,
            &self.model.matching_anchors(),
            self.model.cfg.variant,
            &self.cfg.noise,
            &mut rng,
        )
    }

    /// One optimizer step on `batch`. Per-image gradients may be computed
    /// in parallel; they are summed in batch order, so the result does not
    /// depend on the execution mode.
    pub fn train_step(&mut self, batch: &[&TrainExample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step;
        let sets: Vec<QuerySet> = batch
            .iter()
            .enumerate()
            .map(|(slot, ex)| self.query_set(step, slot, &ex.objects))
            .collect::<Result<_>>()?;
        let model = &self.model;
        let loss_cfg = self.cfg.loss;
        let results = exec::map_ordered(self.exec, batch, |i, ex| {
            image_loss_and_grads(model, &ex.input, &ex.objects, &sets[i], &loss_cfg)
        });
        let scale = 1.0 / batch.len() as f64;
        let mut loss = LossBreakdown::default();
        let mut grads: Vec<Vec<f64>> = self
            .model
            .params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        for (ex, r) in batch.iter().zip(results) {
            let r = r.map_err(|e| match e {
                Error::NanCost { .. } | Error::Numeric(_) => {
                    Error::Numeric(format!("step {step}, image id {}: {e}", ex.id))
                }
                other => other,
            })?;
            if !r.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} on image id {}: {}={}",
                    ex.id,
                    LossBreakdown::CSV_HEADER,
                    r.loss.csv_row()
                )));
            }
            loss.add(&r.loss);
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x * scale;
                }
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip_norm);
        let outcome = self
            .opt
            .step(&mut self.model.params, &grads, &mut self.state)?;
        self.step += 1;
        Ok(StepReport {
            step,
            loss: loss.scaled(scale),
            grad_norm,
            outcome,
        })
    }
}

impl TrainExample {
    pub fn from_sample(sample: &crate::dataset::Sample, patch: usize) -> Result<Self> {
        Ok(Self {
            id: sample.id,
            input: ImageInput::from_gray(&sample.image, patch)?,
            objects: sample.objects.clone(),
        })
    }
}

/// Directional derivatives below this magnitude are compared in absolute
/// terms; central differences cannot resolve them (the key bias of an
/// attention block, for one, has an exactly zero gradient).
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// Central-difference check of every parameter gradient of one page's
/// loss. Each parameter tensor is probed along `directions` random
/// directions confined to that tensor.
pub fn gradcheck_model(
    model: &Model,
    example: &TrainExample,
    qs: &QuerySet,
    loss_cfg: &LossConfig,
    h: f64,
    directions: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let analytic = image_loss_and_grads(model, &example.input, &example.objects, qs, loss_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut max_rel: f64 = 0.0;
    let mut count = 0;
    for (p, grad) in analytic.grads.iter().enumerate() {
        for _ in 0..directions {
            let dir: Vec<f64> = (0..grad.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expected: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let mut eval = |sign: f64| -> Result<f64> {
                let base = model.params.tensors()[p].data();
                let t = &mut probe.params.tensors_mut()[p];
                for ((x, b), d) in t.data_mut().iter_mut().zip(base).zip(&dir) {
                    *x = b + sign * h * d;
                }
                let r =
                    image_loss_and_grads(&probe, &example.input, &example.objects, qs, loss_cfg)?;
                Ok(r.loss.total)
            };
            let numeric = (eval(1.0)? - eval(-1.0)?) / (2.0 * h);
            let scale = expected.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            max_rel = max_rel.max((expected - numeric).abs() / scale);
            count += 1;
        }
        probe.params.tensors_mut()[p] = model.params.tensors()[p].clone();
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        directions: count,
    })
}
