//! Kernel timings on a one-thread pool versus the default pool. Without
//! the `parallel` feature only the sequential variant is measured.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drums::cs_solver::{solve_espirit, SolverConfig};
use drums::encoding::{MultiCoilKSpace, SenseOperator, SensitivityMaps};
use drums::espirit::{estimate_maps, CalibrationConfig};
use drums::fitting::{fit_map, Modality};
use drums::phantom::{generate_dataset, AcquisitionOptions, PhantomSpec};
use drums::refiner::arch::ArchSpec;
use drums::refiner::{forward, NetworkWeights};
use ndarray::Array3;

struct Fixture {
    y: MultiCoilKSpace,
    small: MultiCoilKSpace,
    maps: SensitivityMaps,
    small_maps: SensitivityMaps,
    truth: drums::encoding::ContrastStack,
    timing: Vec<f64>,
    net: NetworkWeights,
    input: Array3<f64>,
}

fn fixture() -> Fixture {
    let opts = AcquisitionOptions {
        accelerations: vec![4],
        ..Default::default()
    };
    let d = generate_dataset(&PhantomSpec::default(), Modality::T2, &opts).expect("phantom");
    let small_spec = PhantomSpec {
        ny: 64,
        nx: 64,
        coils: 4,
        ..Default::default()
    };
    let s = generate_dataset(&small_spec, Modality::T2, &opts).expect("phantom");
    let arch = ArchSpec {
        base: 16,
        ..ArchSpec::for_rank(3)
    };
    Fixture {
        y: d.undersampled[0].1.clone(),
        small: s.undersampled[0].1.clone(),
        maps: d.maps,
        small_maps: s.maps,
        truth: d.truth,
        timing: d.params.timing,
        net: NetworkWeights::random(arch, 7),
        input: Array3::from_shape_fn((6, 128, 128), |(c, y, x)| ((c * 31 + y * 7 + x) % 17) as f64 / 17.0 - 0.5),
    }
}

fn pools() -> Vec<(String, Box<dyn Fn(&mut (dyn FnMut() + Send))>)> {
    let mut out: Vec<(String, Box<dyn Fn(&mut (dyn FnMut() + Send))>)> = Vec::new();
    #[cfg(feature = "parallel")]
    {
        for threads in [1, rayon::current_num_threads().max(2)] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
            let label = if threads == 1 { "sequential".to_string() } else { format!("parallel-{threads}") };
            out.push((label, Box::new(move |f: &mut (dyn FnMut() + Send)| pool.install(|| f()))));
        }
    }
    #[cfg(not(feature = "parallel"))]
    out.push(("sequential".to_string(), Box::new(|f: &mut (dyn FnMut() + Send)| f())));
    out
}

fn benches(c: &mut Criterion) {
    let fx = fixture();
    let pools = pools();
    let mut g = c.benchmark_group("kernels");
    g.sample_size(10).measurement_time(Duration::from_secs(5)).warm_up_time(Duration::from_secs(1));
    for (label, run) in &pools {
        g.bench_function(BenchmarkId::new("unet_forward_base16", label), |b| {
            b.iter(|| run(&mut || drop(forward(&fx.input.view(), &fx.net).expect("forward"))))
        });
        g.bench_function(BenchmarkId::new("espirit_maps_192", label), |b| {
            b.iter(|| run(&mut || drop(estimate_maps(&fx.y, &CalibrationConfig::default()).expect("maps"))))
        });
        g.bench_function(BenchmarkId::new("sense_normal_192x8", label), |b| {
            let op = SenseOperator::new(&fx.maps, &fx.y.mask).expect("operator");
            b.iter(|| run(&mut || drop(op.normal(fx.truth.view()).expect("normal"))))
        });
        g.bench_function(BenchmarkId::new("fista_20it_64", label), |b| {
            let cfg = SolverConfig {
                iterations: 20,
                ..Default::default()
            };
            b.iter(|| run(&mut || drop(solve_espirit(&fx.small, &fx.small_maps, &fx.small.mask, &cfg).expect("solve"))))
        });
        g.bench_function(BenchmarkId::new("t2_fit_192", label), |b| {
            b.iter(|| run(&mut || drop(fit_map(&fx.truth, &fx.timing, Modality::T2).expect("fit"))))
        });
    }
    g.finish();
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
