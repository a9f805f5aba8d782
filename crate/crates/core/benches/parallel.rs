//! Parallel vs single-worker throughput of the data-parallel hot paths.
//!
//! Each workload runs once on the default pool and once pinned to a single
//! worker. Build with `--no-default-features` to measure the plain
//! sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thinkgen_core::backends::mock::{MockExtractor, MockGenerator, MockPerceptual, MockScorer};
use thinkgen_core::backends::ControlExtractorBackend;
use thinkgen_core::metrics::{ssim, SsimParams};
use thinkgen_core::par;
use thinkgen_core::rewards::OrmWeights;
use thinkgen_core::selection::{generate_candidates, select_best};
use thinkgen_core::ControlType;

fn noise(w: u32, h: u32, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::from_fn(w, h, |_, _| Luma([rng.random()]))
}

fn widths() -> [(&'static str, usize); 2] {
    [("pool", std::thread::available_parallelism().map_or(1, |n| n.get())), ("one_worker", 1)]
}

fn bench_ssim(c: &mut Criterion) {
    let (a, b) = (noise(256, 256, 1), noise(256, 256, 2));
    let params = SsimParams::default();
    let mut group = c.benchmark_group("ssim_256");
    for (label, width) in widths() {
        group.bench_function(BenchmarkId::from_parameter(label), |bench| {
            bench.iter(|| par::with_width(width, || ssim(black_box(&a), black_box(&b), &params).unwrap()))
        });
    }
    group.finish();
}

fn bench_best_of_k(c: &mut Criterion) {
    let source = RgbImage::from_fn(128, 128, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, ((x + y) % 256) as u8]));
    let extractor = MockExtractor::default();
    let control = extractor.extract(&source, ControlType::Canny).unwrap();
    let prompts: Vec<String> = (0..10).map(|i| format!("a red cat on a sofa, variant {i}")).collect();
    let seeds: Vec<u64> = (0..10).collect();
    let mut group = c.benchmark_group("best_of_10");
    for (label, width) in widths() {
        group.bench_function(BenchmarkId::from_parameter(label), |bench| {
            bench.iter(|| {
                par::with_width(width, || {
                    let candidates = generate_candidates(&MockGenerator, &prompts, &control, &seeds).unwrap();
                    select_best(candidates, "a cat", &control, &MockScorer, &MockPerceptual, &extractor, &OrmWeights::default())
                        .unwrap()
                        .winner
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_ssim, bench_best_of_k);
criterion_main!(benches);
