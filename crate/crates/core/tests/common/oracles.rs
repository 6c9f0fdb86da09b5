//! Brute-force reference implementations used as test oracles.
#![allow(dead_code)]

use setpredict_core::eval::EvalImage;
use setpredict_core::geometry::iou;
use setpredict_core::preprocess::{BinaryImage, DistanceMetric};

/// Minimum cost over every injective map from the smaller side into the
/// larger one, summed in row order.
pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n <= m {
        let mut best = f64::INFINITY;
        let mut used = vec![false; m];
        rows_into_cols(cost, 0, &mut used, 0.0, &mut best);
        best
    } else {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        brute_assignment_by_col(&t)
    }
}

fn rows_into_cols(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
    if row == cost.len() {
        *best = best.min(acc);
        return;
    }
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            rows_into_cols(cost, row + 1, used, acc + cost[row][j], best);
            used[j] = false;
        }
    }
}

// `t` is the transpose of a tall matrix; the sum still runs in the original
// row order so it is comparable bit for bit.
fn brute_assignment_by_col(t: &[Vec<f64>]) -> f64 {
    let n = t[0].len();
    let mut best = f64::INFINITY;
    let mut pick = vec![usize::MAX; n];
    fn go(t: &[Vec<f64>], col: usize, pick: &mut [usize], best: &mut f64) {
        if col == t.len() {
            let s = pick
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != usize::MAX)
                .fold(0.0, |a, (i, &c)| a + t[c][i]);
            *best = best.min(s);
            return;
        }
        for i in 0..pick.len() {
            if pick[i] == usize::MAX {
                pick[i] = col;
                go(t, col + 1, pick, best);
                pick[i] = usize::MAX;
            }
        }
    }
    go(t, 0, &mut pick, &mut best);
    best
}

pub fn brute_dilate(img: &BinaryImage) -> BinaryImage {
    let mut out = BinaryImage::blank(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let mut ink = false;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (u, v) = (x + dx, y + dy);
                if u < img.width && v < img.height && img.get(u, v) {
                    ink = true;
                }
            }
            out.set(x, y, ink);
        }
    }
    out
}

/// Distance from every pixel to every ink pixel, minimized. Euclidean
/// returns squared distances.
pub fn brute_distance(img: &BinaryImage, metric: DistanceMetric) -> Vec<f64> {
    let ink: Vec<(i64, i64)> = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x, y)))
        .filter(|&(x, y)| img.get(x, y))
        .map(|(x, y)| (x as i64, y as i64))
        .collect();
    let mut out = Vec::with_capacity(img.width * img.height);
    for y in 0..img.height as i64 {
        for x in 0..img.width as i64 {
            let d = ink
                .iter()
                .map(|&(u, v)| {
                    let (dx, dy) = ((u - x).abs(), (v - y).abs());
                    match metric {
                        DistanceMetric::Cityblock => (dx + dy) as f64,
                        DistanceMetric::Chebyshev => dx.max(dy) as f64,
                        DistanceMetric::Euclidean => (dx * dx + dy * dy) as f64,
                    }
                })
                .fold(f64::INFINITY, f64::min);
            out.push(d);
        }
    }
    out
}

/// COCO-style AP from first principles: per class and threshold, rank every
/// detection, match greedily within its image, walk the PR curve and take
/// the interpolated precision as the max precision at any recall at least
/// as large.
pub struct BruteSummary {
    pub classes: Vec<usize>,
    /// `ap[class][threshold]`.
    pub ap: Vec<Vec<f64>>,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

pub fn brute_coco(images: &[EvalImage], num_classes: usize) -> BruteSummary {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let classes: Vec<usize> = (0..num_classes)
        .filter(|&c| images.iter().any(|im| im.ground_truth.iter().any(|g| g.class_id == c)))
        .collect();
    let mut ap = Vec::new();
    for &c in &classes {
        let total: usize = images
            .iter()
            .map(|im| im.ground_truth.iter().filter(|g| g.class_id == c).count())
            .sum();
        let mut row = Vec::new();
        for &t in &thresholds {
            let mut ranked: Vec<(f64, bool)> = Vec::new();
            for im in images {
                let mut dets: Vec<_> = im.detections.iter().filter(|d| d.class_id == c).collect();
                dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let gts: Vec<_> = im.ground_truth.iter().filter(|g| g.class_id == c).collect();
                let mut taken = vec![false; gts.len()];
                for d in dets {
                    let mut best = None;
                    let mut best_iou = -1.0;
                    for (k, g) in gts.iter().enumerate() {
                        let v = iou(&d.bbox, &g.bbox);
                        if !taken[k] && v >= t && v > best_iou {
                            best = Some(k);
                            best_iou = v;
                        }
                    }
                    if let Some(k) = best {
                        taken[k] = true;
                    }
                    ranked.push((d.score, best.is_some()));
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut pts = Vec::new();
            let mut tp = 0;
            for (n, &(_, hit)) in ranked.iter().enumerate() {
                if hit {
                    tp += 1;
                }
                pts.push((tp as f64 / (n + 1) as f64, tp as f64 / total as f64));
            }
            let mut sum = 0.0;
            let mut prev = 0.0;
            for &(_, r) in &pts {
                let p = pts
                    .iter()
                    .filter(|q| q.1 >= r)
                    .map(|q| q.0)
                    .fold(0.0, f64::max);
                sum += (r - prev) * p;
                prev = r;
            }
            row.push(sum);
        }
        ap.push(row);
    }
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    BruteSummary {
        map: mean(ap.iter().flatten().copied().collect()),
        ap50: mean(ap.iter().map(|r| r[0]).collect()),
        ap75: mean(ap.iter().map(|r| r[5]).collect()),
        classes,
        ap,
    }
}
