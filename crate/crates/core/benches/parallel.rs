//! Sequential versus rayon-parallel throughput of the core kernels.
//!
//! With the `parallel` feature each workload runs inside a one-thread pool
//! and inside the default pool; without it only the sequential path exists.
//! Build the fallback with `cargo bench --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kdlt::harness::stack_images;
use kdlt::ndgrad::{Tape, Tensor};
use kdlt::recognizer::{cross_entropy_loss, Recognizer, RecognizerConfig};
use kdlt::synthdata::generate_samples;
use std::hint::black_box;

fn training_step(model: &Recognizer, images: &Tensor, labels: &[Vec<usize>]) -> f32 {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let out = model.forward(&mut tape, &p, x).unwrap();
    let loss = cross_entropy_loss(&mut tape, out.logits, labels).unwrap();
    tape.backward(loss).unwrap();
    tape.item(loss).unwrap()
}

fn batched_matmul(a: &Tensor, b: &Tensor) -> f32 {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(a, b).unwrap();
    tape.value(c).data()[0]
}

/// Runs a workload inside some thread pool.
type Runner = Box<dyn Fn(&mut (dyn FnMut() + Send))>;

fn pools() -> Vec<(&'static str, Runner)> {
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let all = rayon::ThreadPoolBuilder::new().build().unwrap();
        vec![
            ("sequential", Box::new(move |f: &mut (dyn FnMut() + Send)| one.install(f))),
            ("parallel", Box::new(move |f: &mut (dyn FnMut() + Send)| all.install(f))),
        ]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
    }
}

fn bench(c: &mut Criterion) {
    let samples = generate_samples(16, &[1.0; 3], 0).unwrap();
    let hr: Vec<_> = samples.iter().map(|s| &s.hr).collect();
    let images = stack_images(&hr).unwrap();
    let labels: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| kdlt::alphabet::encode(&s.text).unwrap())
        .collect();
    let model = Recognizer::new(RecognizerConfig::teacher(), 0).unwrap();
    let a = Tensor::from_fn([32, 64, 64], |i| (i % 13) as f32 * 0.1);
    let b = Tensor::from_fn([32, 64, 64], |i| (i % 7) as f32 * 0.1);

    let mut group = c.benchmark_group("teacher_step_batch16");
    group.sample_size(10);
    for (name, run) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| run(&mut || {
                black_box(training_step(&model, &images, &labels));
            }))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("matmul_32x64x64");
    for (name, run) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| run(&mut || {
                black_box(batched_matmul(&a, &b));
            }))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
