//! Single-worker versus full-pool throughput of the two hot loops:
//! frame simulation and the FFT intercorrelation.
//!
//! Build with `--no-default-features` to time the plain sequential loops;
//! with the default `parallel` feature the "sequential" entries run on a
//! one-thread rayon pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use spdc_epr::correlator::{intercorrelation, RoiPair};
use spdc_epr::detector::{simulate_stack, DetectorParams, Roi};
use spdc_epr::par::with_workers;
use spdc_epr::source::{BeamCenters, Plane, SourceParams, Xy};

fn desk_source() -> SourceParams {
    SourceParams {
        pump_sigma: Xy::new(12.0, 12.0),
        nf_pair_sigma: Xy::new(1.45, 2.08),
        ff_sum_sigma: Xy::new(2.22, 1.75),
        ff_marginal_sigma: Xy::new(12.0, 12.0),
        mean_pairs_per_frame: 730.0,
        unpaired_fraction: 0.0,
        near_centers: BeamCenters {
            signal: Xy::new(39.5, 63.5),
            idler: Xy::new(87.5, 63.5),
        },
        far_centers: BeamCenters {
            signal: Xy::new(31.5, 63.5),
            idler: Xy::new(95.5, 63.5),
        },
        envelope: None,
    }
}

fn detector() -> DetectorParams {
    DetectorParams {
        quantum_efficiency: 0.9,
        false_count_prob: 0.002,
        smear_prob: 0.02,
        width: 128,
        height: 128,
    }
}

const FRAMES: usize = 256;

fn modes() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("parallel", 0)]
}

fn bench_simulate(c: &mut Criterion) {
    let src = desk_source();
    let det = detector();
    let mut group = c.benchmark_group("simulate_stack");
    group.throughput(Throughput::Elements(FRAMES as u64));
    group.sample_size(10);
    for (name, workers) in modes() {
        group.bench_with_input(BenchmarkId::new(name, FRAMES), &workers, |b, &w| {
            b.iter(|| with_workers(w, || simulate_stack(&src, &det, Plane::NearField, FRAMES, 7).unwrap()))
        });
    }
    group.finish();
}

fn bench_intercorrelation(c: &mut Criterion) {
    let (stack, _) = simulate_stack(&desk_source(), &detector(), Plane::FarField, FRAMES, 7).unwrap();
    let rois = RoiPair {
        roi1: Roi::new(0, 32, 64, 64),
        roi2: Roi::new(64, 32, 64, 64),
        plane: Plane::FarField,
    };
    let mut group = c.benchmark_group("intercorrelation");
    group.throughput(Throughput::Elements(FRAMES as u64));
    group.sample_size(10);
    for (name, workers) in modes() {
        group.bench_with_input(BenchmarkId::new(name, FRAMES), &workers, |b, &w| {
            b.iter(|| with_workers(w, || intercorrelation(&stack, &rois).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_intercorrelation);
criterion_main!(benches);
