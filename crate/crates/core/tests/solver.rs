mod common;

use common::*;
use drums::c64;
use drums::cs_solver::{solve_espirit, SolverConfig};
use drums::encoding::{ifft2c, sense_forward, ContrastStack, MultiCoilKSpace, SamplingMask, SensitivityMaps};
use drums::espirit::{estimate_maps, CalibrationConfig};
use drums::fitting::Modality;
use drums::phantom::{generate_dataset, AcquisitionOptions, PhantomSpec};
use drums::sparsity::{dwt2, idwt2, max_levels, shrink, soft_threshold};
use ndarray::{s, Array3, Axis};
use rand::Rng;

#[test]
fn shrink_matches_grid_search_prox() {
    let mut r = rng(1);
    for _ in 0..100 {
        let w: f64 = r.random_range(-3.0..3.0);
        let t: f64 = r.random_range(0.0..1.5);
        // argmin_z 0.5 (z - w)^2 + t |z| over a fine grid
        let step = 1e-4;
        let mut best = (f64::INFINITY, 0.0);
        let mut z = -4.0;
        while z <= 4.0 {
            let f = 0.5 * (z - w) * (z - w) + t * z.abs();
            if f < best.0 {
                best = (f, z);
            }
            z += step;
        }
        let got = shrink(c64::new(w, 0.0), t);
        assert!(got.im == 0.0);
        assert!((got.re - best.1).abs() <= step, "w={w} t={t}: {} vs {}", got.re, best.1);
    }
}

#[test]
fn thresholding_is_nonexpansive_and_shrinking() {
    for seed in 0..5 {
        let a = random_stack(1, 32, 32, seed).index_axis_move(Axis(0), 0);
        let b = random_stack(1, 32, 32, seed + 50).index_axis_move(Axis(0), 0);
        let t = 0.05 * (seed + 1) as f64;
        let (wa, wb) = (dwt2(a.view(), 3).unwrap(), dwt2(b.view(), 3).unwrap());
        let (sa, sb) = (soft_threshold(&wa, t), soft_threshold(&wb, t));
        let d_in = norm((wa.data() - wb.data()).iter());
        let d_out = norm((sa.data() - sb.data()).iter());
        assert!(d_out <= d_in + 1e-12);
        for (x, y) in sa.data().iter().zip(wa.data()) {
            assert!(x.norm() <= y.norm() + 1e-15);
        }
    }
}

#[test]
fn wavelet_is_orthogonal_and_invertible() {
    for (ny, nx, j) in [(32, 32, 4), (192, 192, 4), (30, 22, 2)] {
        let x = random_stack(1, ny, nx, 7).index_axis_move(Axis(0), 0);
        let w = dwt2(x.view(), j).unwrap();
        let back = idwt2(&w);
        assert!(norm((&back - &x).iter()) <= 1e-10 * norm(x.iter()));
        if ny % (1 << j) == 0 && nx % (1 << j) == 0 {
            assert!((norm(w.data().iter()) - norm(x.iter())).abs() <= 1e-10 * norm(x.iter()));
        }
    }
}

fn unit_coil(n: usize) -> SensitivityMaps {
    SensitivityMaps::from_maps(Array3::from_elem((1, n, n), c64::new(1.0, 0.0)))
}

/// Closed-form minimizer of the unitary problem, including the solver's
/// data normalization.
fn prox_oracle(y: &MultiCoilKSpace, lambda: f64) -> ContrastStack {
    let (nt, _, ny, nx) = y.data.dim();
    let adj: Vec<_> = (0..nt).map(|t| ifft2c(y.data.slice(s![t, 0, .., ..]))).collect();
    let scale = adj.iter().flat_map(|a| a.iter()).map(|v| v.norm()).fold(0.0, f64::max);
    let levels = max_levels(ny, nx, 4);
    let mut out = ContrastStack::zeros((nt, ny, nx));
    for (t, a) in adj.iter().enumerate() {
        let mut w = dwt2(a.mapv(|v| v / scale).view(), levels).unwrap();
        let (ah, aw) = w.approx_dims();
        for ((yy, xx), v) in w.data_mut().indexed_iter_mut() {
            if yy >= ah || xx >= aw {
                let m = v.norm();
                *v = if m > lambda { *v * ((m - lambda) / m) } else { c64::new(0.0, 0.0) };
            }
        }
        out.index_axis_mut(Axis(0), t).assign(&idwt2(&w).mapv(|v| v * scale));
    }
    out
}

#[test]
fn unitary_problem_matches_closed_form_prox() {
    let n = 16;
    let maps = unit_coil(n);
    let mask = SamplingMask::full(n, n);
    let x = random_stack(2, n, n, 21);
    let y = sense_forward(&x, &maps, &mask).unwrap();
    let cfg = SolverConfig::default();
    assert_eq!((cfg.lambda, cfg.iterations), (0.01, 100));
    let (xs, rep) = solve_espirit(&y, &maps, &mask, &cfg).unwrap();
    let oracle = prox_oracle(&y, cfg.lambda);
    let err = norm((&xs - &oracle).iter()) / norm(oracle.iter());
    assert!(err <= 1e-5, "relative error {err:e}");
    assert!(rep.final_objective() <= rep.objective[0]);
}

#[test]
fn global_phase_commutes_with_solve() {
    let n = 32;
    let maps = random_maps(3, n, n, 4);
    let mask = SamplingMask::uniform(n, n, 3, 8);
    let x = random_stack(2, n, n, 5);
    let y = sense_forward(&x, &maps, &mask).unwrap();
    let rot = c64::from_polar(1.0, 0.7);
    let cfg = SolverConfig {
        iterations: 30,
        ..Default::default()
    };
    let (a, _) = solve_espirit(&y, &maps, &mask, &cfg).unwrap();
    let (b, _) = solve_espirit(&y.clone().rotated(rot), &maps, &mask, &cfg).unwrap();
    let expect = a.mapv(|v| v * rot);
    assert!(norm((&b - &expect).iter()) <= 1e-6 * norm(expect.iter()));
}

trait Rotate {
    fn rotated(self, r: c64) -> Self;
}

impl Rotate for MultiCoilKSpace {
    fn rotated(mut self, r: c64) -> Self {
        self.data.mapv_inplace(|v| v * r);
        self
    }
}

#[test]
fn unregularized_full_sampling_is_data_consistent() {
    let n = 32;
    let maps = random_maps(4, n, n, 8);
    let mask = SamplingMask::full(n, n);
    let x = random_stack(1, n, n, 9);
    let y = sense_forward(&x, &maps, &mask).unwrap();
    let cfg = SolverConfig {
        lambda: 0.0,
        ..Default::default()
    };
    let (_, rep) = solve_espirit(&y, &maps, &mask, &cfg).unwrap();
    assert!(rep.final_residual() <= 1e-6, "{}", rep.final_residual());
}

#[test]
fn phantom_objective_never_increases_after_restart() {
    let spec = PhantomSpec {
        ny: 64,
        nx: 64,
        coils: 4,
        ..Default::default()
    };
    let opts = AcquisitionOptions {
        accelerations: vec![4, 8],
        ..Default::default()
    };
    for m in [Modality::T1, Modality::T2] {
        let d = generate_dataset(&spec, m, &opts).unwrap();
        for (r, y) in &d.undersampled {
            let maps = estimate_maps(y, &CalibrationConfig::default()).unwrap();
            let (_, rep) = solve_espirit(y, &maps, &y.mask, &SolverConfig::default()).unwrap();
            assert_eq!(rep.objective.len(), 101);
            for w in rep.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{m} R={r}: {} -> {}", w[0], w[1]);
            }
            assert!(rep.final_objective() < rep.objective[0]);
        }
    }
}

#[test]
fn regularization_reduces_wavelet_l1() {
    let n = 32;
    let maps = unit_coil(n);
    let mask = SamplingMask::full(n, n);
    let x = random_stack(1, n, n, 30);
    let y = sense_forward(&x, &maps, &mask).unwrap();
    let l1 = |img: &ContrastStack| dwt2(img.index_axis(Axis(0), 0), 4).unwrap().detail_l1();
    let (a, _) = solve_espirit(&y, &maps, &mask, &SolverConfig { lambda: 0.0, ..Default::default() }).unwrap();
    let (b, _) = solve_espirit(&y, &maps, &mask, &SolverConfig { lambda: 0.05, ..Default::default() }).unwrap();
    assert!(l1(&b) < l1(&a));
}
