//! Random inputs shared by the oracle tests.
#![allow(dead_code)]

use rand::Rng;
use setpredict_core::eval::{EvalImage, ScoredDetection};
use setpredict_core::geometry::BoundingBox;
use setpredict_core::matching::GroundTruthObject;
use setpredict_core::preprocess::BinaryImage;

pub fn random_box<R: Rng>(rng: &mut R) -> BoundingBox {
    BoundingBox::new(
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
    )
}

/// Up to four images with at most `max_objects` ground truths each. Most
/// objects get a jittered detection, some a duplicate or a wrong class, and
/// a few detections are pure noise.
pub fn random_eval_scene<R: Rng>(rng: &mut R, classes: usize, max_objects: usize) -> Vec<EvalImage> {
    (0..rng.gen_range(1..=4))
        .map(|_| {
            let ground_truth: Vec<GroundTruthObject> = (0..rng.gen_range(0..=max_objects))
                .map(|_| GroundTruthObject::new(rng.gen_range(0..classes), random_box(rng)))
                .collect();
            let mut detections = Vec::new();
            for g in &ground_truth {
                for _ in 0..rng.gen_range(0..=2) {
                    let j = |rng: &mut R, s: f64| rng.gen_range(-s..s);
                    let b = g.bbox;
                    let s = rng.gen_range(0.0..0.06);
                    let bbox = BoundingBox::new(
                        b.cx + j(rng, s),
                        b.cy + j(rng, s),
                        (b.w + j(rng, s)).max(0.01),
                        (b.h + j(rng, s)).max(0.01),
                    );
                    let class_id = if rng.gen_bool(0.15) { rng.gen_range(0..classes) } else { g.class_id };
                    detections.push(ScoredDetection { class_id, score: rng.gen_range(0.0..1.0), bbox });
                }
            }
            for _ in 0..rng.gen_range(0..=2) {
                detections.push(ScoredDetection {
                    class_id: rng.gen_range(0..classes),
                    score: rng.gen_range(0.0..1.0),
                    bbox: random_box(rng),
                });
            }
            EvalImage { detections, ground_truth }
        })
        .collect()
}

/// Square-ish image up to `max_side` with sparse, sometimes empty, ink.
pub fn random_binary<R: Rng>(rng: &mut R, max_side: usize) -> BinaryImage {
    let w = rng.gen_range(1..=max_side);
    let h = rng.gen_range(1..=max_side);
    let density = [0.0, 0.01, 0.05, 0.2, 0.6][rng.gen_range(0..5)];
    let bits = (0..w * h).map(|_| rng.gen_bool(density)).collect();
    BinaryImage::new(w, h, bits).unwrap()
}
