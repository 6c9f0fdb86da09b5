//! Decoder object queries: grid/learned points, anchor boxes and the
//! positive/negative noised anchors used for denoising training.
//!
//! A [`QuerySet`] lays queries out as `[matching | group 0 | group 1 | ...]`
//! where every denoising group holds one positive query per ground truth
//! followed by (optionally) one negative query per ground truth.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{l1_distance, BoundingBox};
use crate::gradcore::{Tape, Tensor, Var};
use crate::matching::GroundTruthObject;

/// Extent given to point queries when they are lifted to boxes.
pub const POINT_EXTENT: f64 = 0.1;

/// Smallest width/height a noised anchor may take.
pub const MIN_NOISED_EXTENT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryVariant {
    GridPoints,
    LearnedPoints,
    AnchorBoxes,
    AnchorsPositiveNoise,
    AnchorsPosNegNoise,
}

impl QueryVariant {
    pub const ALL: [QueryVariant; 5] = [
        QueryVariant::GridPoints,
        QueryVariant::LearnedPoints,
        QueryVariant::AnchorBoxes,
        QueryVariant::AnchorsPositiveNoise,
        QueryVariant::AnchorsPosNegNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QueryVariant::GridPoints => "GridPoints",
            QueryVariant::LearnedPoints => "LearnedPoints",
            QueryVariant::AnchorBoxes => "AnchorBoxes",
            QueryVariant::AnchorsPositiveNoise => "AnchorsPositiveNoise",
            QueryVariant::AnchorsPosNegNoise => "AnchorsPosNegNoise",
        }
    }

    /// Point variants carry a fixed extent; the rest learn full boxes.
    pub fn is_point(self) -> bool {
        matches!(self, QueryVariant::GridPoints | QueryVariant::LearnedPoints)
    }

    pub fn uses_positive_noise(self) -> bool {
        matches!(
            self,
            QueryVariant::AnchorsPositiveNoise | QueryVariant::AnchorsPosNegNoise
        )
    }

    pub fn uses_negative_noise(self) -> bool {
        self == QueryVariant::AnchorsPosNegNoise
    }
}

impl fmt::Display for QueryVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = QueryVariant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown query variant {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub groups: usize,
    /// `k` for the distance filter on positive anchors; 0 disables it.
    pub amd_k: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.8,
            groups: 1,
            amd_k: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1 < self.lambda2 && self.lambda2 <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "noise scales need 0 < lambda1 < lambda2 <= 1, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.groups == 0 {
            return Err(Error::InvalidArgument(
                "noise.groups must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryGroup {
    Matching,
    PositiveDN,
    NegativeDN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseSign {
    Positive,
    Negative,
}

/// Where a query's content vector comes from: a learned slot embedding or
/// the label embedding of a ground-truth class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContentRef {
    Learned(usize),
    Label(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub content: Vec<ContentRef>,
    pub anchors: Vec<BoundingBox>,
    pub group_of: Vec<QueryGroup>,
    pub gt_index: Vec<Option<usize>>,
    /// Denoising group number of each DN query.
    pub dn_group: Vec<Option<usize>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn num_matching(&self) -> usize {
        self.group_of
            .iter()
            .filter(|g| **g == QueryGroup::Matching)
            .count()
    }

    /// Indices of the denoising queries, in layout order.
    pub fn dn_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.group_of[i] != QueryGroup::Matching)
            .collect()
    }

    /// Checks the bookkeeping invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.content.len() != n
            || self.group_of.len() != n
            || self.gt_index.len() != n
            || self.dn_group.len() != n
        {
            return Err(Error::shape(
                "query_set",
                "per-query vectors differ in length",
            ));
        }
        for i in 0..n {
            let is_dn = self.group_of[i] != QueryGroup::Matching;
            if is_dn != self.gt_index[i].is_some() || is_dn != self.dn_group[i].is_some() {
                return Err(Error::InvalidArgument(format!(
                    "query {i} has inconsistent group tags"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalEncodingSpec {
    pub dim_per_coordinate: usize,
    pub temperature: f64,
}

impl Default for PositionalEncodingSpec {
    fn default() -> Self {
        Self {
            dim_per_coordinate: 8,
            temperature: 20.0,
        }
    }
}

impl PositionalEncodingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim_per_coordinate == 0 || self.dim_per_coordinate % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "pe.dim must be even and positive, got {}",
                self.dim_per_coordinate
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pe.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn anchor_width(&self) -> usize {
        4 * self.dim_per_coordinate
    }

    /// Angular frequency of sin/cos pair `j`.
    fn frequency(&self, j: usize) -> f64 {
        2.0 * PI
            * self
                .temperature
                .powf(-2.0 * j as f64 / self.dim_per_coordinate as f64)
    }
}

/// Cell centers of the smallest square lattice holding `n` points, row-major.
pub fn grid_points(n: usize) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("grid_points needs n >= 1".into()));
    }
    let side = (n as f64).sqrt().ceil() as usize;
    let side = if (side - 1) * (side - 1) >= n {
        side - 1
    } else {
        side
    };
    let mut out = Vec::with_capacity(n);
    'outer: for r in 0..side {
        for c in 0..side {
            if out.len() == n {
                break 'outer;
            }
            out.push((
                (c as f64 + 0.5) / side as f64,
                (r as f64 + 0.5) / side as f64,
            ));
        }
    }
    Ok(out)
}

pub fn point_anchor(x: f64, y: f64) -> BoundingBox {
    BoundingBox::new(x, y, POINT_EXTENT, POINT_EXTENT)
}

pub fn sinusoidal_pe(v: f64, spec: &PositionalEncodingSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.dim_per_coordinate);
    for j in 0..spec.dim_per_coordinate / 2 {
        let arg = v * spec.frequency(j);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// `PE(cx) ++ PE(cy) ++ PE(w) ++ PE(h)`.
pub fn encode_anchor(a: &BoundingBox, spec: &PositionalEncodingSpec) -> Vec<f64> {
    a.to_array()
        .iter()
        .flat_map(|&v| sinusoidal_pe(v, spec))
        .collect()
}

/// Tape version of [`encode_anchor`] over a `[Q, 4]` anchor matrix.
pub fn encode_anchors_tape(
    tape: &mut Tape,
    anchors: Var,
    spec: &PositionalEncodingSpec,
) -> Result<Var> {
    let shape = tape.shape(anchors).to_vec();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(Error::shape(
            "encode_anchors",
            format!("anchors must be [Q, 4], got {shape:?}"),
        ));
    }
    let half = spec.dim_per_coordinate / 2;
    // One column per (coordinate, frequency) pair.
    let coord_index: Vec<usize> = (0..4)
        .flat_map(|c| std::iter::repeat(c).take(half))
        .collect();
    let freqs: Vec<f64> = (0..4)
        .flat_map(|_| (0..half).map(|j| spec.frequency(j)))
        .collect();
    let spread = tape.gather_cols(anchors, &coord_index)?;
    let f = tape.constant(Tensor::vector(freqs));
    let args = tape.mul_row(spread, f)?;
    let s = tape.sin(args);
    let c = tape.cos(args);
    let both = tape.concat_cols(&[s, c])?;
    // Interleave back into sin, cos, sin, cos, ...
    let n = 4 * half;
    let order: Vec<usize> = (0..n).flat_map(|k| [k, n + k]).collect();
    tape.gather_cols(both, &order)
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.w1.rows(), self.w1.cols());
        if self.w1.shape().len() != 2
            || self.w2.shape().len() != 2
            || self.b1.len() != h
            || self.w2.rows() != h
            || self.b2.len() != self.w2.cols()
        {
            return Err(Error::shape(
                "mlp",
                format!(
                    "w1 {:?} (input {i}), b1 [{}], w2 {:?}, b2 [{}]",
                    self.w1.shape(),
                    self.b1.len(),
                    self.w2.shape(),
                    self.b2.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.len() != self.input_width() {
            return Err(Error::shape(
                "mlp",
                format!(
                    "input width {} but the first layer expects {}",
                    x.len(),
                    self.input_width()
                ),
            ));
        }
        let hidden: Vec<f64> = (0..self.b1.len())
            .map(|j| {
                let s: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * self.w1.data()[i * self.b1.len() + j])
                    .sum();
                (s + self.b1[j]).max(0.0)
            })
            .collect();
        let out_w = self.output_width();
        Ok((0..out_w)
            .map(|k| {
                let s: f64 = hidden
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v * self.w2.data()[j * out_w + k])
                    .sum();
                s + self.b2[k]
            })
            .collect())
    }
}

pub fn positional_query(
    a: &BoundingBox,
    mlp: &Mlp,
    spec: &PositionalEncodingSpec,
) -> Result<Vec<f64>> {
    let enc = encode_anchor(a, spec);
    if mlp.input_width() != enc.len() {
        return Err(Error::shape(
            "positional_query",
            format!(
                "encoding width {} but MLP input width {}",
                enc.len(),
                mlp.input_width()
            ),
        ));
    }
    mlp.forward(&enc)
}

/// Tape handles of a two-layer perceptron.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, self.w2)?;
        tape.add_row(o, self.b2)
    }
}

/// Positional queries for a `[Q, 4]` anchor matrix.
pub fn positional_query_tape(
    tape: &mut Tape,
    anchors: Var,
    mlp: &MlpVars,
    spec: &PositionalEncodingSpec,
) -> Result<Var> {
    let enc = encode_anchors_tape(tape, anchors, spec)?;
    mlp.forward(tape, enc)
}

fn signed_shell<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    // Magnitude in (lo, hi], random sign.
    let m = hi - rng.gen::<f64>() * (hi - lo);
    if rng.gen::<bool>() {
        m
    } else {
        -m
    }
}

/// Perturbs a ground-truth box. Positive noise stays within `lambda1`;
/// negative noise draws every perturbation magnitude from `(lambda1, lambda2]`.
pub fn noise_anchor<R: Rng + ?Sized>(
    gt: &BoundingBox,
    cfg: &NoiseConfig,
    sign: NoiseSign,
    rng: &mut R,
) -> BoundingBox {
    let (ux, uy, sw, sh) = match sign {
        NoiseSign::Positive => (
            rng.gen_range(-1.0..=1.0) * cfg.lambda1,
            rng.gen_range(-1.0..=1.0) * cfg.lambda1,
            rng.gen_range(-1.0..=1.0) * cfg.lambda1,
            rng.gen_range(-1.0..=1.0) * cfg.lambda1,
        ),
        NoiseSign::Negative => (
            signed_shell(rng, cfg.lambda1, cfg.lambda2),
            signed_shell(rng, cfg.lambda1, cfg.lambda2),
            signed_shell(rng, cfg.lambda1, cfg.lambda2),
            signed_shell(rng, cfg.lambda1, cfg.lambda2),
        ),
    };
    BoundingBox::new(
        gt.cx + ux * gt.w / 2.0,
        gt.cy + uy * gt.h / 2.0,
        gt.w * (1.0 + sw),
        gt.h * (1.0 + sh),
    )
    .clamped(MIN_NOISED_EXTENT)
}

/// Indices whose anchor-to-target L1 distance is at most the mean of the
/// `k` largest distances.
pub fn amd_filter(anchors: &[BoundingBox], gts: &[BoundingBox], k: usize) -> Result<Vec<usize>> {
    if anchors.is_empty() || anchors.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "amd_filter needs equal non-empty lists, got {} anchors and {} targets",
            anchors.len(),
            gts.len()
        )));
    }
    if k == 0 || k > anchors.len() {
        return Err(Error::InvalidArgument(format!(
            "amd_filter k={k} outside 1..={}",
            anchors.len()
        )));
    }
    let d: Vec<f64> = anchors
        .iter()
        .zip(gts)
        .map(|(a, g)| l1_distance(g, a))
        .collect();
    let mut sorted = d.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let amd = sorted[..k].iter().sum::<f64>() / k as f64;
    Ok((0..d.len()).filter(|&i| d[i] <= amd).collect())
}

/// Lays out matching queries followed by the denoising groups.
///
/// Matching queries take their anchors from `matching_anchors` and learned
/// content slots `0..n`. `variant` decides which denoising queries exist.
/// With more targets than matching queries the matching part covers only
/// as many targets as it has slots; denoising groups still cover all.
pub fn build_query_groups<R: Rng + ?Sized>(
    gts: &[GroundTruthObject],
    matching_anchors: &[BoundingBox],
    variant: QueryVariant,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<QuerySet> {
    let n_matching = matching_anchors.len();
    let mut qs = QuerySet {
        content: (0..n_matching).map(ContentRef::Learned).collect(),
        anchors: matching_anchors.to_vec(),
        group_of: vec![QueryGroup::Matching; n_matching],
        gt_index: vec![None; n_matching],
        dn_group: vec![None; n_matching],
    };
    if !variant.uses_positive_noise() || gts.is_empty() {
        return Ok(qs);
    }
    cfg.validate()?;
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|g| g.bbox).collect();
    for group in 0..cfg.groups {
        let push = |qs: &mut QuerySet, k: usize, anchor: BoundingBox, tag: QueryGroup| {
            qs.content.push(ContentRef::Label(gts[k].class_id));
            qs.anchors.push(anchor);
            qs.group_of.push(tag);
            qs.gt_index.push(Some(k));
            qs.dn_group.push(Some(group));
        };
        let positives: Vec<BoundingBox> = gt_boxes
            .iter()
            .map(|g| noise_anchor(g, cfg, NoiseSign::Positive, rng))
            .collect();
        let keep = if cfg.amd_k > 0 {
            amd_filter(&positives, &gt_boxes, cfg.amd_k.min(positives.len()))?
        } else {
            (0..positives.len()).collect()
        };
        for k in keep {
            push(&mut qs, k, positives[k], QueryGroup::PositiveDN);
        }
        if variant.uses_negative_noise() {
            for (k, g) in gt_boxes.iter().enumerate() {
                let a = noise_anchor(g, cfg, NoiseSign::Negative, rng);
                push(&mut qs, k, a, QueryGroup::NegativeDN);
            }
        }
    }
    Ok(qs)
}

/// Square visibility matrix for decoder self-attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask {
    n: usize,
    visible: Vec<bool>,
}

impl GroupMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.n + j]
    }

    /// Additive form: 0 where visible, `blocked` elsewhere.
    pub fn additive(&self, blocked: f64) -> Tensor {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { blocked })
            .collect();
        Tensor::new(vec![self.n, self.n], data).expect("square mask")
    }
}

/// Matching queries see only matching queries; a denoising query sees only
/// queries of its own group.
pub fn attention_group_mask(qs: &QuerySet) -> GroupMask {
    let n = qs.len();
    let key = |i: usize| qs.dn_group[i];
    let mut visible = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            visible[i * n + j] = key(i) == key(j);
        }
    }
    GroupMask { n, visible }
}
