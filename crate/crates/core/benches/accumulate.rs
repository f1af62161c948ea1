//! Multi-frame accumulation on one worker vs every available core.
//!
//! Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use radsem_core::config::Config;
use radsem_core::pipeline::simulate_sequence;
use radsem_core::preprocess::accumulate_frames;

fn bench_accumulate(c: &mut Criterion) {
    let cfg = Config::default();
    let seq = simulate_sequence(&cfg, 7).expect("simulation");
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mode = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    let mut group = c.benchmark_group(format!("accumulate/{mode}"));
    group.sample_size(10);
    let mut counts = vec![1, cores.max(2)];
    counts.dedup();
    for threads in counts {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| accumulate_frames(&seq.cubes, &seq.poses, &cfg.preprocess, t).expect("accumulate"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_accumulate);
criterion_main!(benches);
