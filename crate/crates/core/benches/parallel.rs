//! Sequential vs. rayon execution of the data-parallel hot paths.
//!
//! Without the `parallel` feature both arms run the sequential loop.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use setpredict_core::eval::{coco_summary_with, EvalOptions};
use setpredict_core::exec::Execution;
use setpredict_core::model::{Model, ModelConfig, TrainConfig, TrainExample, Trainer};
use setpredict_core::synth::{generate_with, SceneSpec};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn spec() -> SceneSpec {
    SceneSpec {
        page_width: 64,
        page_height: 64,
        max_objects: 3,
        ..SceneSpec::default()
    }
}

fn examples(n: usize) -> Vec<TrainExample> {
    let ds = generate_with(&spec(), n, Execution::Sequential).unwrap().dataset;
    ds.samples.iter().map(|s| TrainExample::from_sample(s, 8).unwrap()).collect()
}

fn train_step(c: &mut Criterion) {
    let data = examples(8);
    let batch: Vec<&TrainExample> = data.iter().collect();
    let mut g = c.benchmark_group("train_step_batch8");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            batch: 8,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(Model::new(ModelConfig::default(), 0).unwrap(), cfg, exec).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(trainer.train_step(&batch).unwrap()))
        });
    }
    g.finish();
}

fn eval(c: &mut Criterion) {
    let data = examples(32);
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let images = model.eval_images(&data, Execution::Sequential).unwrap();
    let opts = EvalOptions::default();
    let mut g = c.benchmark_group("eval");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("detect_32_pages", name), |b| {
            b.iter(|| black_box(model.eval_images(&data, exec).unwrap()))
        });
        g.bench_function(BenchmarkId::new("coco_summary", name), |b| {
            b.iter(|| black_box(coco_summary_with(&images, 3, &opts, exec).unwrap()))
        });
    }
    g.finish();
}

fn synth(c: &mut Criterion) {
    let mut g = c.benchmark_group("synth_64_pages");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(generate_with(&spec(), 64, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, train_step, eval, synth);
criterion_main!(benches);
