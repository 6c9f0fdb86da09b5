//! Set-prediction training objectives.
//!
//! Losses are evaluated outside the autodiff tape: every term here has a
//! closed-form derivative with respect to the class logits and the predicted
//! box, and the model seeds its backward pass with those.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generalized_iou_with_grad, BoundingBox};
use crate::matching::{
    match_predictions, softmax, CostWeights, GroundTruthObject, MatchAssignment, Prediction,
};
use crate::querygen::{QueryGroup, QuerySet};

/// Probability floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_class: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_dn: f64,
    pub noobj_weight: f64,
    /// Supervise every decoder layer, not just the last.
    pub aux_layers: bool,
    pub matcher: CostWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_class: 1.0,
            w_l1: 5.0,
            w_giou: 2.0,
            w_dn: 1.0,
            noobj_weight: 0.1,
            aux_layers: true,
            matcher: CostWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.w_class", self.w_class),
            ("loss.w_l1", self.w_l1),
            ("loss.w_giou", self.w_giou),
            ("loss.w_dn", self.w_dn),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(self.noobj_weight > 0.0 && self.noobj_weight <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "loss.noobj_weight must lie in (0, 1], got {}",
                self.noobj_weight
            )));
        }
        self.matcher.validate()
    }
}

/// Loss components.
///
/// `class_nll`, `l1` and `giou` are unweighted sums; `dn_class` is the
/// unweighted denoising NLL and `dn_box` the denoising box term already
/// weighted by `w_l1`/`w_giou`. `total` is
/// `w_class*class_nll + w_l1*l1 + w_giou*giou + w_dn*(w_class*dn_class + dn_box)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_nll: f64,
    pub l1: f64,
    pub giou: f64,
    pub dn_class: f64,
    pub dn_box: f64,
    pub total: f64,
    /// Number of probabilities that hit [`PROB_FLOOR`].
    pub clamped: usize,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "total,class_nll,l1,giou,dn_class,dn_box";

    /// Weighted box term of the matched part.
    pub fn box_term(&self, cfg: &LossConfig) -> f64 {
        cfg.w_l1 * self.l1 + cfg.w_giou * self.giou
    }

    fn finish(mut self, cfg: &LossConfig) -> Self {
        self.total = cfg.w_class * self.class_nll
            + self.box_term(cfg)
            + cfg.w_dn * (cfg.w_class * self.dn_class + self.dn_box);
        self
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.class_nll += other.class_nll;
        self.l1 += other.l1;
        self.giou += other.giou;
        self.dn_class += other.dn_class;
        self.dn_box += other.dn_box;
        self.total += other.total;
        self.clamped += other.clamped;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.class_nll *= s;
        self.l1 *= s;
        self.giou *= s;
        self.dn_class *= s;
        self.dn_box *= s;
        self.total *= s;
        self
    }

    pub fn is_finite(&self) -> bool {
        [
            self.class_nll,
            self.l1,
            self.giou,
            self.dn_class,
            self.dn_box,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.total, self.class_nll, self.l1, self.giou, self.dn_class, self.dn_box
        )
    }
}

fn nll(p: f64, clamped: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *clamped += 1;
    }
    -p.max(PROB_FLOOR).ln()
}

fn l1_parts(pred: &BoundingBox, gt: &BoundingBox) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let g = gt.to_array();
    let mut grad = [0.0; 4];
    let mut v = 0.0;
    for k in 0..4 {
        let d = p[k] - g[k];
        v += d.abs();
        grad[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (v, grad)
}

/// Class target index of every prediction slot under `assignment`
/// (`None` = no-object).
fn slot_targets(
    n: usize,
    gts: &[GroundTruthObject],
    assignment: &MatchAssignment,
) -> Result<Vec<Option<usize>>> {
    let mut out = vec![None; n];
    for &(i, j) in &assignment.pairs {
        if i >= n || j >= gts.len() {
            return Err(Error::InvalidArgument(format!(
                "assignment pair ({i}, {j}) out of range for {n} predictions and {} targets",
                gts.len()
            )));
        }
        out[i] = Some(j);
    }
    Ok(out)
}

/// Hungarian loss over the given assignment.
pub fn hungarian_loss(
    preds: &[Prediction],
    gts: &[GroundTruthObject],
    assignment: &MatchAssignment,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let targets = slot_targets(preds.len(), gts, assignment)?;
    let mut out = LossBreakdown::default();
    for (p, t) in preds.iter().zip(&targets) {
        match t {
            Some(j) => {
                let gt = &gts[*j];
                out.class_nll += nll(p.class_probs[gt.class_id], &mut out.clamped);
                out.l1 += l1_parts(&p.bbox, &gt.bbox).0;
                out.giou += 1.0 - generalized_iou_with_grad(&p.bbox, &gt.bbox).0;
            }
            None => {
                out.class_nll +=
                    cfg.noobj_weight * nll(p.class_probs[p.no_object_index()], &mut out.clamped);
            }
        }
    }
    Ok(out.finish(cfg))
}

/// Denoising loss. `dn_preds[i]` belongs to the `i`-th denoising query of `qs`.
pub fn denoising_loss(
    dn_preds: &[Prediction],
    qs: &QuerySet,
    gts: &[GroundTruthObject],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let dn = qs.dn_indices();
    if dn.len() != dn_preds.len() {
        return Err(Error::shape(
            "denoising_loss",
            format!(
                "{} predictions for {} denoising queries",
                dn_preds.len(),
                dn.len()
            ),
        ));
    }
    let mut out = LossBreakdown::default();
    for (p, &q) in dn_preds.iter().zip(&dn) {
        let k = qs.gt_index[q].ok_or_else(|| {
            Error::InvalidArgument(format!("denoising query {q} has no ground-truth index"))
        })?;
        let gt = gts.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "denoising query {q} points at missing ground truth {k}"
            ))
        })?;
        match qs.group_of[q] {
            QueryGroup::PositiveDN => {
                out.dn_class += nll(p.class_probs[gt.class_id], &mut out.clamped);
                out.dn_box += cfg.w_l1 * l1_parts(&p.bbox, &gt.bbox).0
                    + cfg.w_giou * (1.0 - generalized_iou_with_grad(&p.bbox, &gt.bbox).0);
            }
            QueryGroup::NegativeDN => {
                out.dn_class += nll(p.class_probs[p.no_object_index()], &mut out.clamped);
            }
            QueryGroup::Matching => unreachable!("dn_indices excludes matching queries"),
        }
    }
    Ok(out.finish(cfg))
}

/// Matching on the matching-group predictions, then Hungarian plus
/// denoising loss.
pub fn total_loss(
    preds: &[Prediction],
    dn_preds: &[Prediction],
    qs: &QuerySet,
    gts: &[GroundTruthObject],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let assignment = match_predictions(preds, gts, &cfg.matcher)?;
    let mut h = hungarian_loss(preds, gts, &assignment, cfg)?;
    if !dn_preds.is_empty() || !qs.dn_indices().is_empty() {
        let d = denoising_loss(dn_preds, qs, gts, cfg)?;
        h.add(&d);
    }
    Ok(h)
}

/// Gradients of the total loss with respect to raw class logits and to the
/// predicted box coordinates, one entry per query in `qs` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub logits: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
}

/// [`total_loss`] over every query of `qs` (matching first, then
/// denoising), computed from logits, together with its gradient.
pub fn total_loss_with_grad(
    logits: &[Vec<f64>],
    boxes: &[BoundingBox],
    qs: &QuerySet,
    gts: &[GroundTruthObject],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGrads, MatchAssignment)> {
    let n = qs.len();
    if logits.len() != n || boxes.len() != n {
        return Err(Error::shape(
            "total_loss",
            format!(
                "{} logit rows and {} boxes for {n} queries",
                logits.len(),
                boxes.len()
            ),
        ));
    }
    let n_match = qs.num_matching();
    if qs.group_of[..n_match]
        .iter()
        .any(|g| *g != QueryGroup::Matching)
    {
        return Err(Error::InvalidArgument(
            "matching queries must precede denoising queries".into(),
        ));
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    let preds: Vec<Prediction> = probs[..n_match]
        .iter()
        .zip(boxes)
        .map(|(p, b)| Prediction {
            class_probs: p.clone(),
            bbox: *b,
        })
        .collect();
    let assignment = match_predictions(&preds, gts, &cfg.matcher)?;
    let targets = slot_targets(n_match, gts, &assignment)?;

    let mut out = LossBreakdown::default();
    let mut grads = LossGrads {
        logits: probs.iter().map(|p| vec![0.0; p.len()]).collect(),
        boxes: vec![[0.0; 4]; n],
    };
    // d(-log softmax(z)[c]) / dz = softmax(z) - onehot(c)
    let mut clamped = 0;
    let mut class_term = |q: usize, class: usize, grad_weight: f64| -> f64 {
        let p = &probs[q];
        for (k, g) in grads.logits[q].iter_mut().enumerate() {
            let onehot = if k == class { 1.0 } else { 0.0 };
            *g += grad_weight * (p[k] - onehot);
        }
        nll(p[class], &mut clamped)
    };
    let mut box_term = |q: usize, gt: &BoundingBox, wl1: f64, wgiou: f64| -> (f64, f64) {
        let (l1, gl1) = l1_parts(&boxes[q], gt);
        let (giou, ggiou) = generalized_iou_with_grad(&boxes[q], gt);
        for k in 0..4 {
            grads.boxes[q][k] += wl1 * gl1[k] - wgiou * ggiou[k];
        }
        (l1, 1.0 - giou)
    };
    let noobj = probs.first().map_or(0, |p| p.len() - 1);

    for (q, t) in targets.iter().enumerate() {
        match t {
            Some(j) => {
                let gt = &gts[*j];
                out.class_nll += class_term(q, gt.class_id, cfg.w_class);
                let (l1, giou) = box_term(q, &gt.bbox, cfg.w_l1, cfg.w_giou);
                out.l1 += l1;
                out.giou += giou;
            }
            None => {
                out.class_nll +=
                    cfg.noobj_weight * class_term(q, noobj, cfg.w_class * cfg.noobj_weight)
            }
        }
    }
    for q in n_match..n {
        let k = qs.gt_index[q].ok_or_else(|| {
            Error::InvalidArgument(format!("denoising query {q} has no ground-truth index"))
        })?;
        let gt = gts.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "denoising query {q} points at missing ground truth {k}"
            ))
        })?;
        match qs.group_of[q] {
            QueryGroup::PositiveDN => {
                out.dn_class += class_term(q, gt.class_id, cfg.w_dn * cfg.w_class);
                let (l1, giou) = box_term(q, &gt.bbox, cfg.w_dn * cfg.w_l1, cfg.w_dn * cfg.w_giou);
                out.dn_box += cfg.w_l1 * l1 + cfg.w_giou * giou;
            }
            QueryGroup::NegativeDN => out.dn_class += class_term(q, noobj, cfg.w_dn * cfg.w_class),
            QueryGroup::Matching => {
                return Err(Error::InvalidArgument(
                    "matching queries must precede denoising queries".into(),
                ))
            }
        }
    }
    out.clamped = clamped;
    Ok((out.finish(cfg), grads, assignment))
}
