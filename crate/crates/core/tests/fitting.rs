mod common;

use common::*;
use drums::c64;
use drums::encoding::ContrastStack;
use drums::fitting::{fit_map, fit_t1_voxel, fit_t2_voxel, flags, Modality, T1_INVERSION_TIMES, T2_PREP_TIMES};
use drums::phantom::{generate_truth, signal, PhantomSpec, Tissue};
use rand_distr::{Distribution, Normal};

fn ir(a: f64, b: f64, tau: f64) -> Vec<f64> {
    T1_INVERSION_TIMES.iter().map(|&ti| (a - b * (-ti / tau).exp()).abs()).collect()
}

#[test]
fn noiseless_t1_within_one_ms() {
    for (a, b, tau) in [(1.0, 2.0, 1200.0), (0.6, 1.2, 1900.0), (0.9, 1.8, 400.0), (1.0, 1.8, 1000.0), (0.3, 0.55, 700.0)] {
        let f = fit_t1_voxel(&ir(a, b, tau), &T1_INVERSION_TIMES);
        let truth = (b / a - 1.0) * tau;
        assert!((f.value - truth).abs() <= 1.0, "{a} {b} {tau}: {} vs {truth}", f.value);
        assert!(f.residual <= 1e-6);
    }
}

#[test]
fn noiseless_t2_within_a_tenth_ms() {
    for t2 in [20.0, 45.0, 50.0, 120.0, 180.0] {
        let s: Vec<f64> = T2_PREP_TIMES.iter().map(|&tp| 0.8 * (-tp / t2).exp()).collect();
        let f = fit_t2_voxel(&s, &T2_PREP_TIMES);
        assert!((f.value - t2).abs() <= 0.1, "{t2}: {}", f.value);
        assert!(f.residual <= 1e-6);
    }
    let s = [1.0, (-0.7f64).exp(), (-1.1f64).exp()];
    assert!((fit_t2_voxel(&s, &T2_PREP_TIMES).value - 50.0).abs() <= 0.1);
}

#[test]
fn t1_is_scale_invariant() {
    let s = ir(0.7, 1.5, 900.0);
    let base = fit_t1_voxel(&s, &T1_INVERSION_TIMES).value;
    for k in [0.5, 2.0, 10.0] {
        let scaled: Vec<f64> = s.iter().map(|v| v * k).collect();
        assert!((fit_t1_voxel(&scaled, &T1_INVERSION_TIMES).value - base).abs() <= 1.0);
    }
}

/// Exhaustive least squares over a dense `(A, B, T1*)` grid of the
/// magnitude model.
fn grid_search_t1(s: &[f64]) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for it in 0..=400 {
        let tau = 200.0 + it as f64;
        let e: Vec<f64> = T1_INVERSION_TIMES.iter().map(|&ti| (-ti / tau).exp()).collect();
        for ia in 0..=80 {
            let a = 0.8 + 0.005 * ia as f64;
            for ib in 0..=160 {
                let b = 1.6 + 0.005 * ib as f64;
                let rss: f64 = s.iter().zip(&e).map(|(v, ei)| (v - (a - b * ei).abs()).powi(2)).sum();
                if rss < best.0 {
                    best = (rss, (b / a - 1.0) * tau);
                }
            }
        }
    }
    best.1
}

#[test]
fn noisy_polarity_flip_matches_grid_search() {
    // zero crossing of A - B exp(-TI/T1*) sits between TI = 180 and 260 ms
    let (a, b, tau) = (1.0, 2.0, 340.0);
    let truth = (b / a - 1.0) * tau;
    let clean = ir(a, b, tau);
    assert!(a - b * (-180.0f64 / tau).exp() < 0.0 && a - b * (-260.0f64 / tau).exp() > 0.0);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut r = rng(5);
    for _ in 0..3 {
        let s: Vec<f64> = clean.iter().map(|v| (v + noise.sample(&mut r)).abs()).collect();
        let fit = fit_t1_voxel(&s, &T1_INVERSION_TIMES).value;
        let oracle = grid_search_t1(&s);
        assert!((fit - truth).abs() <= 0.03 * truth, "fit {fit} vs truth {truth}");
        assert!((fit - oracle).abs() <= 0.01 * oracle, "fit {fit} vs grid {oracle}");
    }
}

#[test]
fn t2_clamp_is_honored() {
    let s: Vec<f64> = T2_PREP_TIMES.iter().map(|&tp| (-tp / 2000.0f64).exp()).collect();
    let f = fit_t2_voxel(&s, &T2_PREP_TIMES);
    assert!(f.value <= 250.0 && f.value >= 0.0);
    assert!(f.flags & flags::CLAMPED != 0);
    let stack = ContrastStack::from_shape_fn((3, 4, 4), |(t, _, _)| c64::new(1.0 + t as f64, 0.0));
    let m = fit_map(&stack, &T2_PREP_TIMES, Modality::T2).unwrap();
    assert!(m.value.iter().all(|v| (0.0..=250.0).contains(v)));
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn compartment_medians(modality: Modality, noise_rel: f64) -> Vec<(Tissue, f64, f64)> {
    let spec = PhantomSpec::default();
    let (mut truth, params) = generate_truth(&spec, modality);
    let peak = truth.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if noise_rel > 0.0 {
        let n = Normal::new(0.0, noise_rel * peak).unwrap();
        let mut r = rng(11);
        truth.mapv_inplace(|v| v + c64::new(n.sample(&mut r), 0.0));
    }
    let fitted = fit_map(&truth, &params.timing, modality).unwrap();
    let labels = spec.labels();
    let mut out = Vec::new();
    for tissue in [Tissue::Fat, Tissue::SkeletalMuscle, Tissue::Myocardium, Tissue::Blood] {
        let idx: Vec<_> = labels.indexed_iter().filter(|(_, &l)| l == tissue.label()).map(|(i, _)| i).collect();
        let got = median(idx.iter().map(|&i| fitted.value[i]).collect());
        let want = median(idx.iter().map(|&i| params.value[i]).collect());
        out.push((tissue, got, want));
    }
    out
}

#[test]
fn noisy_phantom_medians_within_three_percent() {
    for m in [Modality::T1, Modality::T2] {
        for (tissue, got, want) in compartment_medians(m, 0.01) {
            assert!((got - want).abs() <= 0.03 * want, "{m} {tissue:?}: {got} vs {want}");
        }
    }
}

#[test]
fn noiseless_phantom_round_trip() {
    let spec = PhantomSpec::default();
    for m in [Modality::T1, Modality::T2] {
        let (truth, params) = generate_truth(&spec, m);
        let fitted = fit_map(&truth, &params.timing, m).unwrap();
        let tol = |v: f64| if m == Modality::T2 { 0.1 } else { 0.01 * v };
        for ((idx, &want), &got) in params.value.indexed_iter().zip(fitted.value.iter()) {
            if want > 0.0 {
                assert!((got - want).abs() <= tol(want), "{m} at {idx:?}: {got} vs {want}");
                assert!(fitted.residual[idx] <= 1e-6);
            }
        }
    }
}

#[test]
fn fit_inverts_the_phantom_signal_model() {
    for (t1, t2) in [(1200.0, 45.0), (400.0, 70.0)] {
        let s = signal(Modality::T2, 0.75, t1, t2, &T2_PREP_TIMES);
        assert!((fit_t2_voxel(&s, &T2_PREP_TIMES).value - t2).abs() <= 0.1);
        let s = signal(Modality::T1, 0.75, t1, t2, &T1_INVERSION_TIMES);
        assert!((fit_t1_voxel(&s, &T1_INVERSION_TIMES).value - t1).abs() <= 1.0);
    }
}
