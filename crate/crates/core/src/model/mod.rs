//! Detection transformer: patch embedding, dense encoder, decoder with
//! deformable cross-attention and per-layer anchor refinement.
//!
//! There is no suppression stage: every matching query yields exactly one
//! detection.

mod forward;
mod train;

pub use forward::{
    deformable_attention, encode, forward, image_position_embedding, patchify, DeformableOutput,
    DeformableParams, FeatureLevel, ForwardOutput, ImageInput, LayerOutput,
};
pub use train::{
    gradcheck_model, image_loss_and_grads, BatchSampler, ImageGrads, StepReport, TrainConfig,
    TrainExample, Trainer, GRADCHECK_FLOOR,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::geometry::BoundingBox;
use crate::gradcore::{inverse_sigmoid, sigmoid, ParamStore, Tape, Tensor};
use crate::matching::softmax;
use crate::querygen::{grid_points, PositionalEncodingSpec, QuerySet, QueryVariant, POINT_EXTENT};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub levels: usize,
    /// Sample points per head per level.
    pub sample_points: usize,
    pub patch: usize,
    pub ffn_dim: usize,
    /// Object classes, excluding no-object.
    pub num_classes: usize,
    /// Matching queries.
    pub num_queries: usize,
    pub variant: QueryVariant,
    pub pe: PositionalEncodingSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            levels: 2,
            sample_points: 4,
            patch: 8,
            ffn_dim: 64,
            num_classes: 3,
            num_queries: 10,
            variant: QueryVariant::AnchorsPosNegNoise,
            pe: PositionalEncodingSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad(format!(
                "model.d_model must be a positive multiple of 4, got {}",
                self.d_model
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "model.heads={} must divide model.d_model={}",
                self.heads, self.d_model
            ));
        }
        if self.dec_layers == 0 {
            return bad("model.dec_layers must be at least 1".into());
        }
        if self.levels == 0 || self.sample_points == 0 || self.patch == 0 || self.ffn_dim == 0 {
            return bad(
                "model.levels, model.sample_points, model.patch and model.ffn_dim must be positive"
                    .into(),
            );
        }
        if self.num_classes == 0 || self.num_queries == 0 {
            return bad("need at least one class and one query".into());
        }
        self.pe.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Ordered parameter names and shapes. The order is the checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.ffn_dim;
        let hlk = self.heads * self.levels * self.sample_points;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut linear = |name: String, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        linear("patch".into(), self.patch * self.patch, d);
        for l in 0..self.enc_layers {
            for p in ["q", "k", "v", "o"] {
                linear(format!("enc.{l}.attn.{p}"), d, d);
            }
            linear(format!("enc.{l}.ffn.1"), d, f);
            linear(format!("enc.{l}.ffn.2"), f, d);
        }
        linear("query.pos.1".into(), self.pe.anchor_width(), d);
        linear("query.pos.2".into(), d, d);
        for l in 0..self.dec_layers {
            for p in ["q", "k", "v", "o"] {
                linear(format!("dec.{l}.self.{p}"), d, d);
            }
            linear(format!("dec.{l}.cross.offset"), d, hlk * 2);
            linear(format!("dec.{l}.cross.weight"), d, hlk);
            linear(format!("dec.{l}.cross.value"), d, d);
            linear(format!("dec.{l}.cross.out"), d, d);
            linear(format!("dec.{l}.ffn.1"), d, f);
            linear(format!("dec.{l}.ffn.2"), f, d);
            linear(format!("dec.{l}.box.1"), d, d);
            linear(format!("dec.{l}.box.2"), d, 4);
        }
        linear("head.class".into(), d, self.num_classes + 1);
        out.push(("query.content".into(), vec![self.num_queries, d]));
        out.push(("query.label".into(), vec![self.num_classes, d]));
        match self.variant {
            QueryVariant::GridPoints => {}
            QueryVariant::LearnedPoints => {
                out.push(("query.point".into(), vec![self.num_queries, 2]))
            }
            _ => out.push(("query.anchor".into(), vec![self.num_queries, 4])),
        }
        out
    }
}

/// Parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// One matching query's output on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// `C + 1` probabilities, no-object last.
    pub class_probs: Vec<f64>,
    pub bbox: BoundingBox,
    /// Arg-max over the object classes.
    pub class_id: usize,
    /// Largest object-class probability.
    pub score: f64,
    /// True when no-object beats every object class.
    pub is_no_object: bool,
}

impl Detection {
    pub fn from_logits(logits: &[f64], bbox: BoundingBox) -> Self {
        let class_probs = softmax(logits);
        let c = class_probs.len() - 1;
        let (class_id, score) =
            class_probs[..c]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                });
        let is_no_object = class_probs[c] > score;
        Self {
            class_probs,
            bbox,
            class_id,
            score,
            is_no_object,
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect()
}

/// Logit-space matching anchors on the query grid, `w = h = extent`.
fn grid_anchor_logits(n: usize, extent: f64) -> Result<Vec<f64>> {
    let pts = grid_points(n)?;
    Ok(pts
        .iter()
        .flat_map(|&(x, y)| [x, y, extent, extent].map(inverse_sigmoid))
        .collect())
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes() {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                if name.ends_with("cross.offset.b") {
                    offset_ring_bias(&cfg)
                } else {
                    vec![0.0; numel]
                }
            } else if name.ends_with("box.2.w")
                || name.ends_with("cross.offset.w")
                || name.ends_with("cross.weight.w")
            {
                vec![0.0; numel]
            } else if name == "query.anchor" {
                grid_anchor_logits(cfg.num_queries, POINT_EXTENT)?
            } else if name == "query.point" {
                grid_points(cfg.num_queries)?
                    .iter()
                    .flat_map(|&(x, y)| [inverse_sigmoid(x), inverse_sigmoid(y)])
                    .collect()
            } else if name == "query.content" || name == "query.label" {
                (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()
            } else {
                xavier(&mut rng, shape[0], shape[1])
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Self { cfg, params })
    }

    /// Wraps loaded parameters, rejecting any missing or misshapen entry.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.param_shapes();
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} missing from checkpoint (model expects shape {shape:?})"
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: checkpoint shape {:?}, model shape {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != expected.len() {
            let extra: Vec<&str> = params
                .iter()
                .map(|(n, _)| n)
                .filter(|n| !expected.iter().any(|(e, _)| e == n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint has unexpected parameters {extra:?}"
            )));
        }
        Ok(Self { cfg, params })
    }

    pub(crate) fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("model parameter {name} missing"))
    }

    /// Current matching anchors (before any refinement).
    pub fn matching_anchors(&self) -> Vec<BoundingBox> {
        let n = self.cfg.num_queries;
        let logits = match self.cfg.variant {
            QueryVariant::GridPoints => {
                grid_anchor_logits(n, POINT_EXTENT).expect("validated query count")
            }
            QueryVariant::LearnedPoints => {
                let p = self.param("query.point").data();
                let wh = inverse_sigmoid(POINT_EXTENT);
                (0..n)
                    .flat_map(|i| [p[2 * i], p[2 * i + 1], wh, wh])
                    .collect()
            }
            _ => self.param("query.anchor").data().to_vec(),
        };
        logits
            .chunks(4)
            .map(|z| BoundingBox::new(sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]), sigmoid(z[3])))
            .collect()
    }

    /// The inference query set: matching queries only.
    pub fn inference_queries(&self) -> QuerySet {
        let n = self.cfg.num_queries;
        QuerySet {
            content: (0..n).map(crate::querygen::ContentRef::Learned).collect(),
            anchors: self.matching_anchors(),
            group_of: vec![crate::querygen::QueryGroup::Matching; n],
            gt_index: vec![None; n],
            dn_group: vec![None; n],
        }
    }

    /// One detection per matching query, from the last decoder layer.
    pub fn detect(&self, input: &ImageInput) -> Result<Vec<Detection>> {
        let qs = self.inference_queries();
        self.detect_with_queries(input, &qs)
    }

    /// Runs `qs` and returns detections for its matching queries only.
    pub fn detect_with_queries(&self, input: &ImageInput, qs: &QuerySet) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = forward(&mut tape, self, &bound, input, qs)?;
        let last = out.layers.last().expect("at least one decoder layer");
        let logits = tape.value(last.logits);
        let boxes = tape.value(last.boxes);
        Ok((0..qs.num_matching())
            .map(|q| {
                let b = boxes.row(q);
                Detection::from_logits(logits.row(q), BoundingBox::new(b[0], b[1], b[2], b[3]))
            })
            .collect())
    }

    /// Detections for many images, in input order.
    pub fn detect_batch(
        &self,
        inputs: &[ImageInput],
        exec: Execution,
    ) -> Result<Vec<Vec<Detection>>> {
        exec::map_ordered(exec, inputs, |_, input| self.detect(input))
            .into_iter()
            .collect()
    }
}

/// Initial sampling offsets: point `k` of head `h` sits on a ring around
/// the reference center, at a radius growing with `k`.
fn offset_ring_bias(cfg: &ModelConfig) -> Vec<f64> {
    let (heads, levels, k) = (cfg.heads, cfg.levels, cfg.sample_points);
    let mut out = Vec::with_capacity(heads * levels * k * 2);
    for h in 0..heads {
        let theta = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let norm = dx.abs().max(dy.abs());
        for _ in 0..levels {
            for p in 0..k {
                let r = 0.5 * p as f64 / k as f64;
                out.push(r * dx / norm);
                out.push(r * dy / norm);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;

impl Detection {
    pub fn scored(&self) -> crate::eval::ScoredDetection {
        crate::eval::ScoredDetection {
            class_id: self.class_id,
            score: self.score,
            bbox: self.bbox,
        }
    }
}

impl Model {
    /// Every matching query of every example, paired with its ground truth,
    /// ready for the evaluator. Nothing is filtered or suppressed.
    pub fn eval_images(&self, examples: &[TrainExample], exec: Execution) -> Result<Vec<crate::eval::EvalImage>> {
        exec::map_ordered(exec, examples, |_, ex| {
            Ok(crate::eval::EvalImage {
                detections: self.detect(&ex.input)?.iter().map(Detection::scored).collect(),
                ground_truth: ex.objects.clone(),
            })
        })
        .into_iter()
        .collect()
    }
}
