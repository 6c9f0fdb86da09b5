//! Matching cost and exact optimal assignment between prediction slots and
//! ground-truth objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generalized_iou, l1_distance, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

impl GroundTruthObject {
    pub fn new(class_id: usize, bbox: BoundingBox) -> Self {
        Self { class_id, bbox }
    }
}

/// One prediction slot: a distribution over `C` classes plus the trailing
/// no-object slot, and a box.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub bbox: BoundingBox,
}

impl Prediction {
    pub fn new(class_probs: Vec<f64>, bbox: BoundingBox) -> Result<Self> {
        if class_probs.len() < 2 {
            return Err(Error::InvalidArgument(
                "class_probs needs at least one class plus the no-object slot".into(),
            ));
        }
        let sum: f64 = class_probs.iter().sum();
        if class_probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "class_probs must be a distribution (sum {sum})"
            )));
        }
        Ok(Self { class_probs, bbox })
    }

    /// Softmax of `logits`.
    pub fn from_logits(logits: &[f64], bbox: BoundingBox) -> Self {
        Self {
            class_probs: softmax(logits),
            bbox,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_probs.len() - 1
    }

    pub fn no_object_index(&self) -> usize {
        self.class_probs.len() - 1
    }

    /// Highest-probability real class and its probability.
    pub fn best_class(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &p) in self.class_probs[..self.num_classes()].iter().enumerate() {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A target slot after padding with no-object sentinels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Object(GroundTruthObject),
    NoObject,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    /// `(prediction_index, target_index)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
    }

    /// Target matched to prediction `i`, if any.
    pub fn target_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(i, _)| *i == pred).map(|&(_, j)| j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub w_class: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_class: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_class, self.w_l1, self.w_giou];
        if w.iter().any(|v| !(*v >= 0.0)) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost weights must be non-negative and not all zero: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Dense row-major cost matrix, rows = predictions, columns = targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "cost_matrix",
                format!(
                    "{rows}x{cols} needs {} entries, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("cost_matrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

fn check_class_dims(preds: &[Prediction], num_classes: Option<usize>) -> Result<usize> {
    let expected = num_classes.unwrap_or_else(|| preds[0].class_probs.len());
    for p in preds {
        if p.class_probs.len() != expected {
            return Err(Error::ClassDims {
                expected,
                found: p.class_probs.len(),
            });
        }
    }
    Ok(expected)
}

fn pair_cost(p: &Prediction, gt: &GroundTruthObject, w: &CostWeights) -> f64 {
    -w.w_class * p.class_probs[gt.class_id]
        + w.w_l1 * l1_distance(&gt.bbox, &p.bbox)
        + w.w_giou * (1.0 - generalized_iou(&gt.bbox, &p.bbox))
}

/// Matching cost between every prediction and every real target.
///
/// The classification term uses the raw probability `-p(c)`, not `-log p(c)`,
/// so entries stay bounded.
pub fn cost_matrix(
    preds: &[Prediction],
    gts: &[GroundTruthObject],
    w: &CostWeights,
) -> Result<CostMatrix> {
    if preds.is_empty() || gts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "cost matrix needs at least one prediction and one target ({}x{})",
            preds.len(),
            gts.len()
        )));
    }
    let dims = check_class_dims(preds, None)?;
    for gt in gts {
        if gt.class_id + 1 >= dims {
            return Err(Error::ClassDims {
                expected: dims,
                found: gt.class_id + 2,
            });
        }
    }
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        for gt in gts {
            data.push(pair_cost(p, gt, w));
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data)
}

/// Square cost matrix against a padded target list. No-object columns carry
/// only the classification term against the no-object slot.
pub fn padded_cost_matrix(
    preds: &[Prediction],
    targets: &[Target],
    w: &CostWeights,
) -> Result<CostMatrix> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let dims = check_class_dims(preds, None)?;
    let mut data = Vec::with_capacity(preds.len() * targets.len());
    for p in preds {
        for t in targets {
            data.push(match t {
                Target::Object(gt) => {
                    if gt.class_id + 1 >= dims {
                        return Err(Error::ClassDims {
                            expected: dims,
                            found: gt.class_id + 2,
                        });
                    }
                    pair_cost(p, gt, w)
                }
                Target::NoObject => -w.w_class * p.class_probs[dims - 1],
            });
        }
    }
    CostMatrix::new(preds.len(), targets.len(), data)
}

/// Appends no-object sentinels until there are `n` targets.
pub fn pad_targets(gts: &[GroundTruthObject], n: usize) -> Result<Vec<Target>> {
    if n < gts.len() {
        return Err(Error::TooManyTargets {
            targets: gts.len(),
            slots: n,
        });
    }
    let mut out: Vec<Target> = gts.iter().copied().map(Target::Object).collect();
    out.resize(n, Target::NoObject);
    Ok(out)
}

/// Minimum-cost one-to-one assignment on a `rows <= cols` problem restricted
/// to the given row and column subsets (shortest augmenting path with
/// potentials). Returns the chosen column position for every row position.
fn solve_subproblem(
    cost: &CostMatrix,
    rows: &[usize],
    cols: &[usize],
    transposed: bool,
) -> Vec<usize> {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| {
        if transposed {
            cost.get(cols[j], rows[i])
        } else {
            cost.get(rows[i], cols[j])
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal value of the problem restricted to `rows` x `cols`.
fn restricted_optimum(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let a = solve_subproblem(cost, rows, cols, false);
        a.iter()
            .enumerate()
            .map(|(i, &j)| cost.get(rows[i], cols[j]))
            .sum()
    } else {
        let a = solve_subproblem(cost, cols, rows, true);
        a.iter()
            .enumerate()
            .map(|(j, &i)| cost.get(rows[i], cols[j]))
            .sum()
    }
}

/// Exact minimum-cost assignment covering `min(rows, cols)` pairs.
///
/// Among optimal assignments the lexicographically smallest pair list is
/// returned.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchAssignment> {
    let (n, m) = (cost.rows, cost.cols);
    let mut max_abs: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            let v = cost.get(i, j);
            if v.is_nan() {
                return Err(Error::NanCost { row: i, col: j });
            }
            if v.is_infinite() {
                return Err(Error::InvalidArgument(format!(
                    "cost matrix entry ({i}, {j}) is infinite"
                )));
            }
            max_abs = max_abs.max(v.abs());
        }
    }
    let k = n.min(m);
    if k == 0 {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            unmatched_predictions: (0..n).collect(),
        });
    }

    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = restricted_optimum(cost, &all_rows, &all_cols);
    let tol = 1e-12 * (1.0 + max_abs) * k as f64;

    // Fix pairs greedily in lexicographic order while the optimum stays reachable.
    let mut rows = all_rows;
    let mut cols = all_cols;
    let mut acc = 0.0;
    let mut pairs = Vec::with_capacity(k);
    let mut unmatched = Vec::new();
    for i in 0..n {
        if pairs.len() == k {
            unmatched.push(i);
            continue;
        }
        let rest_rows: Vec<usize> = rows.iter().copied().filter(|&r| r != i).collect();
        let mut chosen = None;
        for (pos, &j) in cols.iter().enumerate() {
            let rest_cols: Vec<usize> = cols
                .iter()
                .enumerate()
                .filter(|&(q, _)| q != pos)
                .map(|(_, &c)| c)
                .collect();
            let needed = k - pairs.len() - 1;
            if rest_rows.len().min(rest_cols.len()) < needed {
                continue;
            }
            let total = acc + cost.get(i, j) + restricted_optimum(cost, &rest_rows, &rest_cols);
            if total <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let j = cols.remove(pos);
                acc += cost.get(i, j);
                pairs.push((i, j));
            }
            None => unmatched.push(i),
        }
        rows = rest_rows;
    }
    Ok(MatchAssignment {
        pairs,
        unmatched_predictions: unmatched,
    })
}

/// Builds the cost matrix and solves it; an image without targets leaves
/// every prediction unmatched.
pub fn match_predictions(
    preds: &[Prediction],
    gts: &[GroundTruthObject],
    w: &CostWeights,
) -> Result<MatchAssignment> {
    if gts.is_empty() {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            unmatched_predictions: (0..preds.len()).collect(),
        });
    }
    hungarian(&cost_matrix(preds, gts, w)?)
}
