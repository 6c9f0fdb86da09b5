use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{encoder_layers, Params};
use super::*;
use crate::geometry::BoundingBox;
use crate::losses::{LossBreakdown, LossConfig};
use crate::matching::GroundTruthObject;
use crate::preprocess::GrayImage;
use crate::querygen::{build_query_groups, NoiseConfig};
use crate::synth::{generate_with, SceneSpec};

fn micro() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        levels: 2,
        sample_points: 2,
        patch: 4,
        ffn_dim: 8,
        num_classes: 2,
        num_queries: 2,
        variant: QueryVariant::AnchorsPosNegNoise,
        pe: PositionalEncodingSpec {
            dim_per_coordinate: 2,
            temperature: 20.0,
        },
    }
}

fn random_image(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = GrayImage::filled(w, h, 255);
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, rng.gen());
        }
    }
    img
}

/// Perturbs every parameter so nothing sits at a special initial value.
fn jitter(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-scale..scale);
        }
    }
}

fn gt(class_id: usize, b: [f64; 4]) -> GroundTruthObject {
    GroundTruthObject::new(class_id, BoundingBox::from_array(b))
}

#[test]
fn patchify_token_count() {
    let input = ImageInput::from_gray(&GrayImage::filled(32, 32, 255), 8).unwrap();
    assert_eq!(input.num_tokens(), 16);
    assert_eq!(input.tokens.shape(), &[16, 64]);
    assert!(ImageInput::from_gray(&GrayImage::filled(30, 32, 255), 8).is_err());
}

fn z0_of(model: &Model, input: &ImageInput) -> Tensor {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let tokens = tape.constant(input.tokens.clone());
    let mpe = image_position_embedding(
        input.grid_h,
        input.grid_w,
        model.cfg.d_model,
        model.cfg.pe.temperature,
    )
    .unwrap();
    let mpe = tape.constant(mpe);
    let w = bound.var(model.params.id("patch.w").unwrap());
    let b = bound.var(model.params.id("patch.b").unwrap());
    let z = patchify(&mut tape, tokens, w, b, mpe).unwrap();
    tape.value(z).clone()
}

#[test]
fn blank_page_tokens_equal_position_embedding() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let input = ImageInput::from_gray(&GrayImage::filled(32, 32, 255), 8).unwrap();
    let z = z0_of(&model, &input);
    let mpe = image_position_embedding(4, 4, 32, model.cfg.pe.temperature).unwrap();
    assert_eq!(z, mpe);
}

#[test]
fn swapping_patches_swaps_token_content() {
    let model = Model::new(ModelConfig::default(), 2).unwrap();
    let img = random_image(32, 32, 3);
    let mut swapped = img.clone();
    // Swap patch (0, 1) with patch (2, 3).
    for y in 0..8 {
        for x in 0..8 {
            swapped.set(8 + x, y, img.get(24 + x, 16 + y));
            swapped.set(24 + x, 16 + y, img.get(8 + x, y));
        }
    }
    let mpe = image_position_embedding(4, 4, 32, model.cfg.pe.temperature).unwrap();
    let content = |z: &Tensor, r: usize| -> Vec<f64> {
        z.row(r)
            .iter()
            .zip(mpe.row(r))
            .map(|(a, b)| a - b)
            .collect()
    };
    let za = z0_of(&model, &ImageInput::from_gray(&img, 8).unwrap());
    let zb = z0_of(&model, &ImageInput::from_gray(&swapped, 8).unwrap());
    let (i, j) = (1, 2 * 4 + 3);
    for r in 0..16 {
        let src = if r == i {
            j
        } else if r == j {
            i
        } else {
            r
        };
        for (a, b) in content(&zb, r).iter().zip(content(&za, src)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_ne!(content(&za, i), content(&za, j));
}

#[test]
fn encoder_is_permutation_equivariant() {
    let mut model = Model::new(ModelConfig::default(), 4).unwrap();
    jitter(&mut model, 0.05, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z: Vec<f64> = (0..16 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let z = Tensor::new(vec![16, 32], z).unwrap();
    let perm: Vec<usize> = vec![3, 7, 1, 0, 15, 2, 9, 4, 11, 5, 6, 13, 8, 10, 14, 12];
    let run = |z: Tensor| -> Tensor {
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let p = Params::new(&model, &bound);
        let x = tape.constant(z);
        let y = encoder_layers(&mut tape, &p, x).unwrap();
        tape.value(y).clone()
    };
    let base = run(z.clone());
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| z.row(i).to_vec()).collect();
    let out = run(Tensor::new(vec![16, 32], permuted).unwrap());
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in out.row(k).iter().zip(base.row(i)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn feature_level_shapes() {
    let model = Model::new(ModelConfig::default(), 7).unwrap();
    let input = ImageInput::from_gray(&random_image(64, 48, 8), 8).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let tokens = tape.constant(input.tokens.clone());
    let z0 = tape
        .matmul(tokens, bound.var(model.params.id("patch.w").unwrap()))
        .unwrap();
    let levels = encode(&mut tape, &model, &bound, z0, (6, 8)).unwrap();
    assert_eq!((levels[0].h, levels[0].w), (6, 8));
    assert_eq!(tape.shape(levels[0].map), &[48, 32]);
    assert_eq!((levels[1].h, levels[1].w), (3, 4));
    assert_eq!(tape.shape(levels[1].map), &[12, 32]);
}

struct DeformFixture {
    tape: Tape,
    params: DeformableParams,
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// Zero offsets, identity value and output projections, random weight net.
fn deform_fixture(
    d: usize,
    heads: usize,
    levels: usize,
    points: usize,
    seed: u64,
) -> DeformFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let hlk = heads * levels * points;
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let weight_w = rand_t(&[d, hlk]);
    let weight_b = rand_t(&[hlk]);
    let params = DeformableParams {
        offset_w: tape.leaf(Tensor::zeros(&[d, hlk * 2])),
        offset_b: tape.leaf(Tensor::zeros(&[hlk * 2])),
        weight_w: tape.leaf(weight_w),
        weight_b: tape.leaf(weight_b),
        value_w: tape.leaf(identity(d)),
        value_b: tape.leaf(Tensor::zeros(&[d])),
        out_w: tape.leaf(identity(d)),
        out_b: tape.leaf(Tensor::zeros(&[d])),
        heads,
        levels,
        points,
    };
    DeformFixture { tape, params }
}

fn random_map(tape: &mut Tape, h: usize, w: usize, d: usize, seed: u64) -> (FeatureLevel, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::new(
        vec![h * w, d],
        (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let map = tape.constant(t.clone());
    (FeatureLevel { map, h, w }, t)
}

#[test]
fn zero_offset_single_point_reads_the_center() {
    let d = 4;
    let DeformFixture { mut tape, params } = deform_fixture(d, 1, 1, 1, 10);
    let (level, raw) = random_map(&mut tape, 5, 6, d, 11);
    let refs = [[0.3, 0.55, 0.2, 0.1], [0.71, 0.12, 0.05, 0.4]];
    let q = tape.constant(Tensor::new(vec![2, d], vec![0.5; 2 * d]).unwrap());
    let r = tape.constant(Tensor::new(vec![2, 4], refs.concat()).unwrap());
    let out = deformable_attention(&mut tape, q, r, &[level], &params).unwrap();
    let map3 = tape.constant(raw.reshaped(vec![5, 6, d]).unwrap());
    let xs = tape.constant(Tensor::vector(vec![refs[0][0], refs[1][0]]));
    let ys = tape.constant(Tensor::vector(vec![refs[0][1], refs[1][1]]));
    let expected = tape.bilinear_sample(map3, xs, ys).unwrap();
    for (a, b) in tape
        .value(out.output)
        .data()
        .iter()
        .zip(tape.value(expected).data())
    {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn deformable_weights_sum_to_one() {
    let d = 8;
    let DeformFixture { mut tape, params } = deform_fixture(d, 2, 2, 3, 12);
    let (l0, _) = random_map(&mut tape, 4, 4, d, 13);
    let (l1, _) = random_map(&mut tape, 2, 2, d, 14);
    let q = tape
        .constant(Tensor::new(vec![3, d], (0..3 * d).map(|i| (i as f64).sin()).collect()).unwrap());
    let r = tape.constant(
        Tensor::new(
            vec![3, 4],
            vec![0.5, 0.5, 0.2, 0.2, 0.1, 0.9, 0.3, 0.1, 0.4, 0.6, 0.5, 0.5],
        )
        .unwrap(),
    );
    let out = deformable_attention(&mut tape, q, r, &[l0, l1], &params).unwrap();
    let w = tape.value(out.weights);
    assert_eq!(w.shape(), &[6, 6]);
    for row in 0..6 {
        assert!((w.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn nearest_upsampled_map_gives_the_same_zero_offset_output() {
    let d = 4;
    let (h, w) = (3, 4);
    let DeformFixture { mut tape, params } = deform_fixture(d, 2, 1, 2, 15);
    let (coarse, raw) = random_map(&mut tape, h, w, d, 16);
    let mut fine = Vec::with_capacity(4 * raw.numel());
    for y in 0..2 * h {
        for x in 0..2 * w {
            fine.extend_from_slice(raw.row((y / 2) * w + x / 2));
        }
    }
    let fine = FeatureLevel {
        map: tape.constant(Tensor::new(vec![4 * h * w, d], fine).unwrap()),
        h: 2 * h,
        w: 2 * w,
    };
    // Centers on the half-pixel lattice of the coarse map.
    let refs = [
        [0.375, 0.5, 0.1, 0.1],
        [0.5, 1.0 / 6.0, 0.3, 0.2],
        [0.125, 5.0 / 6.0, 0.2, 0.2],
    ];
    let q = tape.constant(
        Tensor::new(
            vec![3, d],
            (0..3 * d).map(|i| (i as f64 * 0.7).cos()).collect(),
        )
        .unwrap(),
    );
    let r = tape.constant(Tensor::new(vec![3, 4], refs.concat()).unwrap());
    let a = deformable_attention(&mut tape, q, r, &[coarse], &params).unwrap();
    let b = deformable_attention(&mut tape, q, r, &[fine], &params).unwrap();
    for (x, y) in tape
        .value(a.output)
        .data()
        .iter()
        .zip(tape.value(b.output).data())
    {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

fn example(cfg: &ModelConfig, seed: u64) -> (ImageInput, Vec<GroundTruthObject>) {
    let side = cfg.patch * 2;
    let input = ImageInput::from_gray(&random_image(side, side, seed), cfg.patch).unwrap();
    let gts = vec![gt(1, [0.4, 0.6, 0.3, 0.5])];
    (input, gts)
}

fn run_forward(model: &Model, input: &ImageInput, qs: &QuerySet) -> (Tape, ForwardOutput) {
    let mut tape = Tape::new();
    let bound = model.params.bind_frozen(&mut tape);
    let out = forward(&mut tape, model, &bound, input, qs).unwrap();
    (tape, out)
}

#[test]
fn zero_refinement_keeps_anchors_and_emits_one_list_per_layer() {
    let cfg = micro();
    let model = Model::new(cfg, 20).unwrap();
    let (input, _) = example(&cfg, 21);
    let (tape, out) = run_forward(&model, &input, &model.inference_queries());
    assert_eq!(out.layers.len(), 2);
    let init = tape.value(out.initial_anchors);
    for layer in &out.layers {
        assert_eq!(tape.value(layer.boxes), init);
        assert_eq!(tape.shape(layer.logits), &[2, 3]);
    }
    let expected: Vec<f64> = model
        .matching_anchors()
        .iter()
        .flat_map(|b| b.to_array())
        .collect();
    for (a, b) in init.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn anchors_stay_inside_the_unit_square() {
    let cfg = ModelConfig {
        dec_layers: 6,
        ..micro()
    };
    let mut model = Model::new(cfg, 22).unwrap();
    jitter(&mut model, 1.0, 23);
    let (input, gts) = example(&cfg, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let qs = build_query_groups(
        &gts,
        &model.matching_anchors(),
        cfg.variant,
        &NoiseConfig::default(),
        &mut rng,
    )
    .unwrap();
    let (tape, out) = run_forward(&model, &input, &qs);
    for layer in &out.layers {
        for &v in tape.value(layer.boxes).data() {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }
}

#[test]
fn denoising_queries_do_not_leak_into_matching_outputs() {
    let cfg = micro();
    let mut model = Model::new(cfg, 30).unwrap();
    jitter(&mut model, 0.3, 31);
    let (input, gts) = example(&cfg, 32);
    let plain = model.detect(&input).unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qs = build_query_groups(
            &gts,
            &model.matching_anchors(),
            cfg.variant,
            &NoiseConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(qs.len() > cfg.num_queries);
        let with_dn = model.detect_with_queries(&input, &qs).unwrap();
        assert_eq!(with_dn, plain);
    }
}

#[test]
fn denoising_outputs_ignore_matching_content() {
    let cfg = micro();
    let mut model = Model::new(cfg, 33).unwrap();
    jitter(&mut model, 0.3, 34);
    let (input, gts) = example(&cfg, 35);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let qs = build_query_groups(
        &gts,
        &model.matching_anchors(),
        cfg.variant,
        &NoiseConfig::default(),
        &mut rng,
    )
    .unwrap();
    let dn_rows = |m: &Model| -> Vec<Vec<f64>> {
        let (tape, out) = run_forward(m, &input, &qs);
        let last = out.layers.last().unwrap();
        (cfg.num_queries..qs.len())
            .flat_map(|q| {
                [
                    tape.value(last.logits).row(q).to_vec(),
                    tape.value(last.boxes).row(q).to_vec(),
                ]
            })
            .collect()
    };
    let before = dn_rows(&model);
    let mut other = model.clone();
    for x in other.params.get_mut("query.content").unwrap().data_mut() {
        *x = -3.0 * *x + 1.0;
    }
    assert_eq!(dn_rows(&other), before);
}

#[test]
fn detections_cover_every_query_and_are_normalized() {
    let model = Model::new(ModelConfig::default(), 40).unwrap();
    let input = ImageInput::from_gray(&random_image(32, 32, 41), 8).unwrap();
    let dets = model.detect(&input).unwrap();
    assert_eq!(dets.len(), 10);
    for d in &dets {
        assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.score <= 1.0 && d.class_id < 3);
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = micro();
    for seed in 0..3 {
        let mut model = Model::new(cfg, 50 + seed).unwrap();
        jitter(&mut model, 0.2, 60 + seed);
        let (input, objects) = example(&cfg, 70 + seed);
        let ex = TrainExample {
            id: 1,
            input,
            objects,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(80 + seed);
        let qs = build_query_groups(
            &ex.objects,
            &model.matching_anchors(),
            cfg.variant,
            &NoiseConfig::default(),
            &mut rng,
        )
        .unwrap();
        let report =
            gradcheck_model(&model, &ex, &qs, &LossConfig::default(), 1e-5, 2, seed).unwrap();
        assert!(report.passes(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn checkpoint_shape_mismatch_names_both_shapes() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        ..ModelConfig::default()
    };
    let err = Model::from_params(cfg, model.params.clone())
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("[64, 32]") && err.contains("[64, 16]"),
        "{err}"
    );
    assert!(Model::from_params(ModelConfig::default(), model.params).is_ok());
}

fn tiny_train_set(n: usize) -> Vec<TrainExample> {
    let spec = SceneSpec {
        page_width: 32,
        page_height: 32,
        max_objects: 2,
        min_size: 6,
        seed: 9,
        ..SceneSpec::default()
    };
    let ds = generate_with(&spec, n, Execution::Sequential)
        .unwrap()
        .dataset;
    ds.samples
        .iter()
        .map(|s| TrainExample::from_sample(s, 8).unwrap())
        .collect()
}

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        ffn_dim: 32,
        num_queries: 4,
        ..ModelConfig::default()
    }
}

fn train_curve(exec: Execution, steps: usize) -> (Vec<LossBreakdown>, Model) {
    let data = tiny_train_set(4);
    let batch: Vec<&TrainExample> = data.iter().collect();
    let cfg = TrainConfig {
        lr: 1e-3,
        clip_norm: 1.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Model::new(small_model_cfg(), 3).unwrap(), cfg, exec).unwrap();
    let curve = (0..steps)
        .map(|_| trainer.train_step(&batch).unwrap().loss)
        .collect();
    (curve, trainer.model)
}

#[test]
fn fixed_batch_loss_decreases() {
    let (curve, _) = train_curve(Execution::default(), 50);
    let head = curve[0].total;
    let tail = curve[45..].iter().map(|l| l.total).sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
    assert!(curve[0].dn_class > 0.0 && curve[0].dn_box > 0.0);
}

#[test]
fn training_is_deterministic_across_runs_and_execution_modes() {
    let (a, ma) = train_curve(Execution::Parallel, 5);
    let (b, mb) = train_curve(Execution::Sequential, 5);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn nan_loss_reports_the_image_id() {
    let data = tiny_train_set(2);
    let mut model = Model::new(small_model_cfg(), 4).unwrap();
    model.params.get_mut("head.class.b").unwrap().data_mut()[0] = f64::NAN;
    let mut trainer = Trainer::new(model, TrainConfig::default(), Execution::Sequential).unwrap();
    let err = trainer.train_step(&[&data[1]]).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(
        err.to_string()
            .contains(&format!("image id {}", data[1].id)),
        "{err}"
    );
}

#[test]
fn batch_sampler_covers_each_epoch() {
    let s = BatchSampler::new(10, 3, 7).unwrap();
    let mut seen: Vec<usize> = (0..3).flat_map(|k| s.batch(k)).collect();
    seen.truncate(9);
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 9);
    assert_eq!(s.batch(5), s.batch(5));
}
