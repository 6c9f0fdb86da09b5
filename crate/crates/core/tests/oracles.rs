mod common;

use common::oracles::{brute_assignment, brute_coco, brute_dilate, brute_distance};
use common::scenes::{random_binary, random_eval_scene};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setpredict_core::eval::{coco_summary, EvalOptions};
use setpredict_core::matching::{hungarian, CostMatrix};
use setpredict_core::preprocess::{
    binarize, dilate, distance_transform, preprocess_pipeline, read_image,
    squared_euclidean_transform, DistanceMetric, PreprocessMode, SmudgeConfig,
};

#[test]
fn hungarian_matches_exhaustive_search_on_rectangles() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..400 {
        let n = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let a = hungarian(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(a.pairs.len(), n.min(m));
        let cost: f64 = a.pairs.iter().map(|&(i, j)| rows[i][j]).sum();
        assert_eq!(cost, brute_assignment(&rows), "{rows:?}");
    }
}

#[test]
fn integer_costs_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..300 {
        let n = rng.gen_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(0..4) as f64).collect())
            .collect();
        let a = hungarian(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        let cost: f64 = a.pairs.iter().map(|&(i, j)| rows[i][j]).sum();
        assert_eq!(cost, brute_assignment(&rows));
    }
}

#[test]
fn coco_summary_equals_brute_force() {
    let opts = EvalOptions::default();
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = random_eval_scene(&mut rng, 3, 5);
        let r = coco_summary(&images, 3, &opts).unwrap();
        let b = brute_coco(&images, 3);
        assert_eq!(r.classes, b.classes, "seed {seed}");
        assert_eq!(r.ap, b.ap, "seed {seed}");
        assert_eq!((r.map, r.ap50, r.ap75), (b.map, b.ap50, b.ap75), "seed {seed}");
    }
}

#[test]
fn dilate_and_distances_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..150 {
        let img = random_binary(&mut rng, 32);
        assert_eq!(dilate(&img), brute_dilate(&img));
        for metric in [DistanceMetric::Cityblock, DistanceMetric::Chebyshev] {
            assert_eq!(distance_transform(&img, metric), brute_distance(&img, metric));
        }
        let fast = squared_euclidean_transform(&img);
        let slow = brute_distance(&img, DistanceMetric::Euclidean);
        for (a, b) in fast.iter().zip(&slow) {
            assert!(a == b || (a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn golden_fixtures_are_bit_exact() {
    let page = read_image(&fixture("page.png")).unwrap();
    let l2 = SmudgeConfig::default();
    let linf3 = SmudgeConfig {
        decay: 3.0,
        metric: DistanceMetric::Chebyshev,
    };
    for (mode, cfg, golden) in [
        (PreprocessMode::Dilate, l2, "page_dilate.png"),
        (PreprocessMode::Smudge, l2, "page_smudge_l2.png"),
        (PreprocessMode::Smudge, linf3, "page_smudge_linf3.png"),
        (PreprocessMode::Both, l2, "page_both_l2.png"),
    ] {
        let out = preprocess_pipeline(&page, mode, &cfg).unwrap();
        assert_eq!(out, read_image(&fixture(golden)).unwrap(), "{golden}");
    }
    assert_eq!(preprocess_pipeline(&page, PreprocessMode::Raw, &l2).unwrap(), page);
}

#[test]
fn dilation_never_loses_ink_on_the_fixture() {
    let page = read_image(&fixture("page.png")).unwrap();
    let b = binarize(&page);
    assert!(dilate(&b).ink_count() >= b.ink_count());
    assert!(dilate(&dilate(&b)).ink_count() > dilate(&b).ink_count());
}

proptest! {
    #[test]
    fn dilate_is_monotone_and_extensive(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_binary(&mut rng, 16);
        let mut b = a.clone();
        for y in 0..b.height {
            for x in 0..b.width {
                if rng.gen_bool(0.1) {
                    b.set(x, y, true);
                }
            }
        }
        let (da, db) = (dilate(&a), dilate(&b));
        for y in 0..a.height {
            for x in 0..a.width {
                prop_assert!(!a.get(x, y) || da.get(x, y));
                prop_assert!(!da.get(x, y) || db.get(x, y));
            }
        }
    }

    #[test]
    fn smudge_is_zero_on_ink_and_grows_with_distance(seed in 0u64..100_000, decay in 0.5..8.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_binary(&mut rng, 16);
        let cfg = SmudgeConfig { decay, metric: DistanceMetric::Euclidean };
        let out = setpredict_core::preprocess::smudge(&img, &cfg).unwrap();
        let d = distance_transform(&img, DistanceMetric::Euclidean);
        for (i, &p) in out.pixels.iter().enumerate() {
            if img.bits[i] {
                prop_assert_eq!(p, 0);
            }
            for j in 0..out.pixels.len() {
                if d[i] < d[j] {
                    prop_assert!(p <= out.pixels[j]);
                }
            }
        }
    }

    #[test]
    fn ap_ignores_monotone_score_transforms(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = random_eval_scene(&mut rng, 3, 5);
        let mut warped = images.clone();
        for im in &mut warped {
            for d in &mut im.detections {
                d.score = d.score.powi(3) * 0.5 + 0.1;
            }
        }
        let opts = EvalOptions::default();
        let a = coco_summary(&images, 3, &opts).unwrap();
        let b = coco_summary(&warped, 3, &opts).unwrap();
        prop_assert_eq!(a.ap, b.ap);
    }
}
