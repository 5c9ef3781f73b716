//! Data-parallel versus sequential throughput on the hottest batch
//! workloads: per-image attribution, per-source geodesics, and per-sample
//! counterfactual probes.
//!
//! With the default `parallel` feature the `exec::map_*` entry points run
//! on rayon and the `*_seq` counterparts stay sequential, so one run
//! contrasts both strategies; built with `--no-default-features` the pair
//! coincides. Results are bit-identical either way.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use biaslab::cbi::{insert_frame, BiasTransform, FrameParams};
use biaslab::dataset::Sample;
use biaslab::exec;
use biaslab::image::Image;
use biaslab::model::TinyCnn;
use biaslab::synthdata::{generate, GeneratorSpec};
use biaslab::tensor::Tensor;

fn bench_images(n: usize, side: usize) -> Vec<Image> {
    (0..n)
        .map(|i| {
            Image::new(
                side,
                side,
                (0..side * side)
                    .map(|p| ((p * 31 + i * 97) % 251) as f64 / 250.0)
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

fn attribution_batch(c: &mut Criterion) {
    let model = TinyCnn::new(32, 2, 3).unwrap();
    let images = bench_images(16, 32);
    let mut group = c.benchmark_group("saliency_batch_16");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let maps = exec::map_slice(&images, |img| {
                biaslab::attribution::saliency(&model, img, 1).unwrap()
            });
            black_box(maps.len())
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let maps = exec::map_slice_seq(&images, |img| {
                biaslab::attribution::saliency(&model, img, 1).unwrap()
            });
            black_box(maps.len())
        })
    });
    group.finish();
}

fn geodesic_rows(c: &mut Criterion) {
    // one Dijkstra per source over a deterministic point cloud
    let n = 128;
    let points = Tensor::new(
        vec![n, 2],
        (0..2 * n).map(|i| ((i * 37) % 101) as f64 / 7.0).collect(),
    )
    .unwrap();
    let mut group = c.benchmark_group("geodesics_128");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            black_box(
                biaslab::embedding::knn_geodesics(&points, 6)
                    .unwrap()
                    .repairs,
            )
        })
    });
    group.finish();
}

fn cbi_probe_batch(c: &mut Criterion) {
    let spec = GeneratorSpec {
        n_per_class: 24,
        side: 64,
        artifact_plan: vec![],
        seed: 5,
        ..GeneratorSpec::default()
    };
    let dataset = generate(&spec).unwrap();
    let model = TinyCnn::new(32, 2, 3).unwrap();
    let samples: Vec<Sample> = dataset.samples;
    let transform = BiasTransform::Frame(FrameParams::default());
    let mut group = c.benchmark_group("cbi_probe_48");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || samples.iter().collect::<Vec<&Sample>>(),
            |refs| {
                black_box(
                    biaslab::cbi::run_cbi(&model, &refs, &transform, 9)
                        .unwrap()
                        .switched_total,
                )
            },
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let rows = exec::map_slice_seq(&samples, |s| {
                let (pred, probs) = model.predict(&s.image).unwrap();
                let biased = insert_frame(&s.image, s.id);
                let (_, probs_b) = model.predict(&biased).unwrap();
                black_box(probs[pred] - probs_b[pred])
            });
            black_box(rows.len())
        })
    });
    group.finish();
}

fn frame_insertion(c: &mut Criterion) {
    let images = bench_images(64, 64);
    let mut group = c.benchmark_group("frame_insert_64");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = exec::map_slice(&images, |img| insert_frame(img, 7).pixels()[0]);
            black_box(out.len())
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = exec::map_slice_seq(&images, |img| insert_frame(img, 7).pixels()[0]);
            black_box(out.len())
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    attribution_batch,
    geodesic_rows,
    cbi_probe_batch,
    frame_insertion
);
criterion_main!(benches);
