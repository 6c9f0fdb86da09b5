//! COCO-protocol detection metrics.
//!
//! Matching is greedy per class in descending score order. AP is the
//! sum `(R_n - R_{n-1}) * P_n` taken over the monotone precision envelope.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::geometry::{iou, BoundingBox};
use crate::matching::GroundTruthObject;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalImage {
    pub detections: Vec<ScoredDetection>,
    pub ground_truth: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetRecord {
    pub class_id: usize,
    pub score: f64,
    pub tp: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchedDetections {
    /// In descending score order per class, classes in ascending order.
    pub records: Vec<DetRecord>,
    pub false_negatives: usize,
    pub gt_per_class: Vec<usize>,
}

impl MatchedDetections {
    pub fn true_positives(&self) -> usize {
        self.records.iter().filter(|r| r.tp).count()
    }

    pub fn false_positives(&self) -> usize {
        self.records.iter().filter(|r| !r.tp).count()
    }

    /// Concatenates records of several images, keeping image order.
    pub fn merge(parts: &[MatchedDetections]) -> MatchedDetections {
        let classes = parts
            .iter()
            .map(|p| p.gt_per_class.len())
            .max()
            .unwrap_or(0);
        let mut out = MatchedDetections {
            gt_per_class: vec![0; classes],
            ..Default::default()
        };
        for p in parts {
            out.records.extend_from_slice(&p.records);
            out.false_negatives += p.false_negatives;
            for (c, n) in p.gt_per_class.iter().enumerate() {
                out.gt_per_class[c] += n;
            }
        }
        out
    }
}

fn sort_by_score_desc(idx: &mut [usize], score: impl Fn(usize) -> f64) {
    idx.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
}

/// Greedy matching of one image's detections against its ground truth.
pub fn match_at_iou(
    dets: &[ScoredDetection],
    gts: &[GroundTruthObject],
    iou_thresh: f64,
) -> MatchedDetections {
    let classes = dets
        .iter()
        .map(|d| d.class_id + 1)
        .chain(gts.iter().map(|g| g.class_id + 1))
        .max()
        .unwrap_or(0);
    let mut out = MatchedDetections {
        gt_per_class: vec![0; classes],
        ..Default::default()
    };
    for g in gts {
        out.gt_per_class[g.class_id] += 1;
    }
    for c in 0..classes {
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        sort_by_score_desc(&mut order, |i| dets[i].score);
        let cls_gts: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].class_id == c).collect();
        let mut claimed = vec![false; cls_gts.len()];
        for i in order {
            let mut best: Option<(usize, f64)> = None;
            for (k, &j) in cls_gts.iter().enumerate() {
                if claimed[k] {
                    continue;
                }
                let v = iou(&dets[i].bbox, &gts[j].bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                claimed[k] = true;
            }
            out.records.push(DetRecord {
                class_id: c,
                score: dets[i].score,
                tp: best.is_some(),
            });
        }
        out.false_negatives += claimed.iter().filter(|c| !**c).count();
    }
    out
}

/// Micro-averaged precision, recall and F1; empty denominators give 0.
pub fn precision_recall_f1(m: &MatchedDetections) -> (f64, f64, f64) {
    let tp = m.true_positives() as f64;
    let fp = m.false_positives() as f64;
    let fneg = m.false_negatives as f64;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fneg > 0.0 {
        tp / (tp + fneg)
    } else {
        0.0
    };
    let f1 = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    (p, r, f1)
}

/// Precision/recall points after each detection in descending score order.
pub fn pr_curve(records: &[DetRecord], total_gt: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    sort_by_score_desc(&mut order, |i| records[i].score);
    let (mut tp, mut fp) = (0usize, 0usize);
    order
        .iter()
        .map(|&i| {
            if records[i].tp {
                tp += 1;
            } else {
                fp += 1;
            }
            let p = tp as f64 / (tp + fp) as f64;
            let r = if total_gt > 0 {
                tp as f64 / total_gt as f64
            } else {
                0.0
            };
            (p, r)
        })
        .collect()
}

/// AP of one class at one threshold. `records` may span several images.
pub fn average_precision(records: &[DetRecord], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(records, total_gt);
    let mut env: Vec<f64> = curve.iter().map(|&(p, _)| p).collect();
    for n in (0..env.len().saturating_sub(1)).rev() {
        env[n] = env[n].max(env[n + 1]);
    }
    let mut prev_r = 0.0;
    let mut ap = 0.0;
    for (n, &(_, r)) in curve.iter().enumerate() {
        ap += (r - prev_r) * env[n];
        prev_r = r;
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_detections: usize,
    /// Normalized area above which a ground truth counts as large.
    pub large_area: f64,
    /// Score cut for the precision/recall/F1 summary.
    pub score_threshold: f64,
    /// IoU for the precision/recall/F1 summary.
    pub pr_iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_detections: 100,
            large_area: (96.0 / 640.0) * (96.0 / 640.0),
            score_threshold: 0.5,
            pr_iou: 0.5,
        }
    }
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// `0.50, 0.55, ..., 1.00`.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..11).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    /// `None` for the class mean.
    pub class_id: Option<usize>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Classes with at least one ground truth; only these enter the means.
    pub classes: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// `ap[c][t]` for `classes[c]` and `thresholds[t]`.
    pub ap: Vec<Vec<f64>>,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    pub ar_large: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sweep: Vec<SweepRow>,
}

impl MetricsReport {
    pub fn class_ap(&self, class_id: usize, threshold_index: usize) -> Option<f64> {
        let c = self.classes.iter().position(|&k| k == class_id)?;
        Some(self.ap[c][threshold_index])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,class,threshold,value")?;
        for (name, v) in [
            ("mAP", self.map),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AR", self.ar),
            ("AR_large", self.ar_large),
            ("precision", self.precision),
            ("recall", self.recall),
            ("F1", self.f1),
        ] {
            writeln!(w, "{name},all,,{v}")?;
        }
        for (ci, c) in self.classes.iter().enumerate() {
            for (ti, t) in self.thresholds.iter().enumerate() {
                writeln!(w, "AP,{c},{t:.2},{}", self.ap[ci][ti])?;
            }
        }
        Ok(())
    }
}

fn capped(dets: &[ScoredDetection], max: usize) -> Vec<ScoredDetection> {
    if dets.len() <= max {
        return dets.to_vec();
    }
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    sort_by_score_desc(&mut idx, |i| dets[i].score);
    idx.truncate(max);
    idx.sort_unstable();
    idx.into_iter().map(|i| dets[i]).collect()
}

fn check_classes(images: &[EvalImage], num_classes: usize) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        if let Some(d) = img.detections.iter().find(|d| d.class_id >= num_classes) {
            return Err(Error::Data(format!(
                "image {i}: detection with unknown class id {} ({num_classes} classes)",
                d.class_id
            )));
        }
        if let Some(g) = img.ground_truth.iter().find(|g| g.class_id >= num_classes) {
            return Err(Error::Data(format!(
                "image {i}: ground truth with unknown class id {} ({num_classes} classes)",
                g.class_id
            )));
        }
    }
    Ok(())
}

/// Per-class AP at every threshold of `thresholds`, for the classes that
/// have ground truth. Detections are capped per image first.
fn ap_table(
    images: &[EvalImage],
    num_classes: usize,
    thresholds: &[f64],
    max_dets: usize,
    exec: Execution,
) -> (Vec<usize>, Vec<Vec<f64>>, Vec<MatchedDetections>) {
    let capped_imgs: Vec<Vec<ScoredDetection>> = images
        .iter()
        .map(|im| capped(&im.detections, max_dets))
        .collect();
    let merged: Vec<MatchedDetections> = thresholds
        .iter()
        .map(|&t| {
            let parts = map_ordered(exec, images, |i, im| {
                let mut m = match_at_iou(&capped_imgs[i], &im.ground_truth, t);
                m.gt_per_class.resize(num_classes, 0);
                m
            });
            let mut m = MatchedDetections::merge(&parts);
            m.gt_per_class.resize(num_classes, 0);
            m
        })
        .collect();
    let gt_counts = merged
        .first()
        .map(|m| m.gt_per_class.clone())
        .unwrap_or_else(|| vec![0; num_classes]);
    let classes: Vec<usize> = (0..num_classes).filter(|&c| gt_counts[c] > 0).collect();
    let ap = classes
        .iter()
        .map(|&c| {
            merged
                .iter()
                .map(|m| {
                    let recs: Vec<DetRecord> = m
                        .records
                        .iter()
                        .filter(|r| r.class_id == c)
                        .copied()
                        .collect();
                    average_precision(&recs, gt_counts[c])
                })
                .collect()
        })
        .collect();
    (classes, ap, merged)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn recall_per_class(m: &MatchedDetections, c: usize) -> f64 {
    let tp = m.records.iter().filter(|r| r.class_id == c && r.tp).count();
    tp as f64 / m.gt_per_class[c] as f64
}

pub fn coco_summary(
    images: &[EvalImage],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    coco_summary_with(images, num_classes, opts, Execution::default())
}

pub fn coco_summary_with(
    images: &[EvalImage],
    num_classes: usize,
    opts: &EvalOptions,
    exec: Execution,
) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one image".into(),
        ));
    }
    check_classes(images, num_classes)?;
    let thresholds = coco_thresholds();
    let (classes, ap, merged) =
        ap_table(images, num_classes, &thresholds, opts.max_detections, exec);

    let map = mean(ap.iter().flatten().copied());
    let at = |t: usize| mean(ap.iter().map(|row| row[t]));
    let ar = mean(
        merged
            .iter()
            .flat_map(|m| classes.iter().map(|&c| recall_per_class(m, c))),
    );

    let large: Vec<EvalImage> = images
        .iter()
        .map(|im| EvalImage {
            detections: im.detections.clone(),
            ground_truth: im
                .ground_truth
                .iter()
                .filter(|g| g.bbox.area() > opts.large_area)
                .copied()
                .collect(),
        })
        .collect();
    let (large_classes, _, large_merged) =
        ap_table(&large, num_classes, &thresholds, opts.max_detections, exec);
    let ar_large = mean(
        large_merged
            .iter()
            .flat_map(|m| large_classes.iter().map(|&c| recall_per_class(m, c))),
    );

    let kept: Vec<MatchedDetections> = images
        .iter()
        .map(|im| {
            let d: Vec<ScoredDetection> = im
                .detections
                .iter()
                .filter(|d| d.score >= opts.score_threshold)
                .copied()
                .collect();
            match_at_iou(
                &capped(&d, opts.max_detections),
                &im.ground_truth,
                opts.pr_iou,
            )
        })
        .collect();
    let (precision, recall, f1) = precision_recall_f1(&MatchedDetections::merge(&kept));

    let sweep = ap_vs_iou_sweep_with(images, num_classes, opts, exec)?;
    Ok(MetricsReport {
        classes,
        ap50: at(0),
        ap75: at(5),
        thresholds,
        ap,
        map,
        ar,
        ar_large,
        precision,
        recall,
        f1,
        sweep,
    })
}

/// Per-class and class-mean AP at IoU thresholds `0.50..=1.00` step `0.05`.
pub fn ap_vs_iou_sweep(
    images: &[EvalImage],
    num_classes: usize,
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    ap_vs_iou_sweep_with(images, num_classes, opts, Execution::default())
}

fn ap_vs_iou_sweep_with(
    images: &[EvalImage],
    num_classes: usize,
    opts: &EvalOptions,
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    check_classes(images, num_classes)?;
    let thresholds = sweep_thresholds();
    let (classes, ap, _) = ap_table(images, num_classes, &thresholds, opts.max_detections, exec);
    let mut rows = Vec::new();
    for (t, &thr) in thresholds.iter().enumerate() {
        for (ci, &c) in classes.iter().enumerate() {
            rows.push(SweepRow {
                threshold: thr,
                class_id: Some(c),
                ap: ap[ci][t],
            });
        }
        rows.push(SweepRow {
            threshold: thr,
            class_id: None,
            ap: mean(ap.iter().map(|r| r[t])),
        });
    }
    Ok(rows)
}

/// CSV with columns `threshold,class,AP`; the class-mean row uses `all`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "threshold,class,AP")?;
    for r in rows {
        let class = r
            .class_id
            .map_or_else(|| "all".to_string(), |c| c.to_string());
        writeln!(w, "{:.2},{class},{}", r.threshold, r.ap)?;
    }
    Ok(())
}

/// CSV with columns `class,rank,precision,recall` at one IoU threshold.
pub fn write_pr_csv<W: Write>(
    images: &[EvalImage],
    num_classes: usize,
    iou_thresh: f64,
    mut w: W,
) -> Result<()> {
    check_classes(images, num_classes)?;
    let parts: Vec<MatchedDetections> = images
        .iter()
        .map(|im| {
            let mut m = match_at_iou(&im.detections, &im.ground_truth, iou_thresh);
            m.gt_per_class.resize(num_classes, 0);
            m
        })
        .collect();
    let mut m = MatchedDetections::merge(&parts);
    m.gt_per_class.resize(num_classes, 0);
    writeln!(w, "class,rank,precision,recall")?;
    for c in 0..num_classes {
        let recs: Vec<DetRecord> = m
            .records
            .iter()
            .filter(|r| r.class_id == c)
            .copied()
            .collect();
        for (n, (p, r)) in pr_curve(&recs, m.gt_per_class[c]).into_iter().enumerate() {
            writeln!(w, "{c},{},{p},{r}", n + 1)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, s: f64) -> BoundingBox {
        BoundingBox::new(x, y, s, s)
    }

    fn det(c: usize, score: f64, b: BoundingBox) -> ScoredDetection {
        ScoredDetection {
            class_id: c,
            score,
            bbox: b,
        }
    }

    fn rec(tp: bool, score: f64) -> DetRecord {
        DetRecord {
            class_id: 0,
            score,
            tp,
        }
    }

    #[test]
    fn matching_examples() {
        let g = [GroundTruthObject::new(0, bx(0.5, 0.5, 0.2))];
        let m = match_at_iou(&[det(0, 0.9, bx(0.5, 0.5, 0.2))], &g, 0.5);
        assert_eq!(
            (m.true_positives(), m.false_positives(), m.false_negatives),
            (1, 0, 0)
        );

        let m = match_at_iou(
            &[
                det(0, 0.6, bx(0.5, 0.5, 0.2)),
                det(0, 0.9, bx(0.51, 0.5, 0.2)),
            ],
            &g,
            0.5,
        );
        assert_eq!(
            m.records[0],
            DetRecord {
                class_id: 0,
                score: 0.9,
                tp: true
            }
        );
        assert!(!m.records[1].tp);

        // IoU 0.4 between two unit-height strips.
        let a = BoundingBox::new(0.5, 0.5, 0.5, 0.2);
        let b = BoundingBox::new(0.5 + 0.5 * (1.0 - 0.8 / 1.4), 0.5, 0.5, 0.2);
        assert!((iou(&a, &b) - 0.4).abs() < 1e-12);
        let m = match_at_iou(&[det(0, 0.9, b)], &[GroundTruthObject::new(0, a)], 0.5);
        assert_eq!(
            (m.true_positives(), m.false_positives(), m.false_negatives),
            (0, 1, 1)
        );
    }

    #[test]
    fn prf_examples() {
        let m = |tp: usize, fp: usize, fneg: usize| MatchedDetections {
            records: (0..tp)
                .map(|_| rec(true, 1.0))
                .chain((0..fp).map(|_| rec(false, 1.0)))
                .collect(),
            false_negatives: fneg,
            gt_per_class: vec![tp + fneg],
        };
        assert_eq!(precision_recall_f1(&m(1, 0, 0)), (1.0, 1.0, 1.0));
        let (p, r, f) = precision_recall_f1(&m(1, 1, 0));
        assert_eq!((p, r), (0.5, 1.0));
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_recall_f1(&m(0, 3, 2)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[rec(true, 0.9), rec(true, 0.8)], 2), 1.0);
        let ap = average_precision(&[rec(true, 0.9), rec(false, 0.8), rec(true, 0.7)], 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[rec(true, 0.9)], 0), 0.0);
    }

    fn scene() -> Vec<EvalImage> {
        vec![
            EvalImage {
                ground_truth: vec![
                    GroundTruthObject::new(0, bx(0.3, 0.3, 0.2)),
                    GroundTruthObject::new(1, bx(0.7, 0.7, 0.3)),
                ],
                detections: vec![],
            },
            EvalImage {
                ground_truth: vec![GroundTruthObject::new(2, bx(0.5, 0.5, 0.4))],
                detections: vec![],
            },
        ]
    }

    #[test]
    fn perfect_and_empty() {
        let mut imgs = scene();
        for im in &mut imgs {
            im.detections = im
                .ground_truth
                .iter()
                .map(|g| det(g.class_id, 0.99, g.bbox))
                .collect();
        }
        let r = coco_summary(&imgs, 3, &EvalOptions::default()).unwrap();
        assert!(r.ap.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(
            (r.map, r.ap50, r.ap75, r.ar, r.precision, r.recall, r.f1),
            (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert!(r.sweep.iter().all(|s| s.ap == 1.0));

        let r = coco_summary(&scene(), 3, &EvalOptions::default()).unwrap();
        assert_eq!(
            (r.map, r.ap50, r.ap75, r.ar, r.precision, r.recall, r.f1),
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn rejects_unknown_class() {
        let mut imgs = scene();
        imgs[0].detections.push(det(7, 0.5, bx(0.5, 0.5, 0.1)));
        assert!(matches!(
            coco_summary(&imgs, 3, &EvalOptions::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn map_is_mean_of_table() {
        let mut imgs = scene();
        imgs[0].detections = vec![
            det(0, 0.9, bx(0.31, 0.3, 0.2)),
            det(1, 0.4, bx(0.75, 0.7, 0.3)),
        ];
        imgs[1].detections = vec![
            det(2, 0.8, bx(0.55, 0.52, 0.38)),
            det(2, 0.7, bx(0.5, 0.5, 0.4)),
        ];
        let r = coco_summary(&imgs, 3, &EvalOptions::default()).unwrap();
        let all: Vec<f64> = r.ap.iter().flatten().copied().collect();
        assert!((r.map - all.iter().sum::<f64>() / all.len() as f64).abs() < 1e-12);
        let sweep_mean: Vec<f64> = r
            .sweep
            .iter()
            .filter(|s| s.class_id.is_none())
            .map(|s| s.ap)
            .collect();
        assert_eq!(sweep_mean.len(), 11);
        for w in sweep_mean.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!((sweep_mean[0] - r.ap50).abs() < 1e-12);
    }

    #[test]
    fn detection_cap_applies() {
        let g = vec![GroundTruthObject::new(0, bx(0.5, 0.5, 0.2))];
        let mut d: Vec<ScoredDetection> = (0..5)
            .map(|i| det(0, 0.9 - 0.1 * i as f64, bx(0.1, 0.1, 0.05)))
            .collect();
        d.push(det(0, 0.01, bx(0.5, 0.5, 0.2)));
        let imgs = vec![EvalImage {
            detections: d,
            ground_truth: g,
        }];
        let opts = EvalOptions {
            max_detections: 5,
            ..EvalOptions::default()
        };
        assert_eq!(coco_summary(&imgs, 1, &opts).unwrap().ar, 0.0);
        assert_eq!(
            coco_summary(&imgs, 1, &EvalOptions::default()).unwrap().ar,
            1.0
        );
    }

    #[test]
    fn sweep_csv_schema() {
        let mut out = Vec::new();
        write_sweep_csv(
            &[SweepRow {
                threshold: 0.5,
                class_id: None,
                ap: 1.0,
            }],
            &mut out,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "threshold,class,AP\n0.50,all,1\n"
        );
    }

    proptest! {
        #[test]
        fn ap_ignores_monotone_score_transforms(flags in prop::collection::vec(any::<bool>(), 1..20), gt_extra in 0usize..4) {
            let n_tp = flags.iter().filter(|f| **f).count();
            let recs: Vec<DetRecord> = flags.iter().enumerate().map(|(i, &tp)| rec(tp, 1.0 - i as f64 / 40.0)).collect();
            let warped: Vec<DetRecord> = recs.iter().map(|r| DetRecord { score: (5.0 * r.score).exp() - 3.0, ..*r }).collect();
            let a = average_precision(&recs, n_tp + gt_extra);
            prop_assert_eq!(a, average_precision(&warped, n_tp + gt_extra));
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn duplicate_detection_never_helps(x in 0.2..0.8f64, y in 0.2..0.8f64, s in 0.05..0.3f64, score in 0.0..1.0f64) {
            let g = vec![GroundTruthObject::new(0, bx(x, y, s))];
            let d = vec![det(0, 0.9, bx(x, y, s))];
            let base = coco_summary(&[EvalImage { detections: d.clone(), ground_truth: g.clone() }], 1, &EvalOptions::default()).unwrap().map;
            let mut d2 = d;
            d2.push(det(0, score, bx(x, y, s)));
            let dup = coco_summary(&[EvalImage { detections: d2, ground_truth: g }], 1, &EvalOptions::default()).unwrap().map;
            prop_assert!(dup <= base);
        }
    }
}
