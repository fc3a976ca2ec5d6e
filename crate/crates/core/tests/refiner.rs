use std::path::PathBuf;

use drums::c64;
use drums::refiner::layers::{batchnorm, conv2d, max_abs_diff, Activation, BN_EPS};
use drums::refiner::{
    forward, forward_traced, load_weights, refine_basis, ArchSpec, NetworkWeights, RefinerError,
    REFERENCE_PARAMETER_COUNT,
};
use drums::subspace::{decompose, prepare_basis};
use drums::tensor_io::{Tensor, TensorArchive};
use ndarray::{Array3, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn random_activation(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Activation {
    Activation::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (cin, h, w, cout) = (6, 8, 8, 5);
    let x = random_activation(&mut rng, (cin, h, w));
    let k: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random::<f64>() - 0.5).collect();
    let b: Vec<f64> = (0..cout).map(|_| rng.random::<f64>()).collect();
    let y = conv2d(&x.view(), &k, cout, 3, Some(&b));
    let mut worst: f64 = 0.0;
    for o in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let mut acc = b[o];
                for i in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = (r as isize + dy as isize - 1, c as isize + dx as isize - 1);
                            if (0..h as isize).contains(&yy) && (0..w as isize).contains(&xx) {
                                acc += k[((o * cin + i) * 3 + dy) * 3 + dx] * x[[i, yy as usize, xx as usize]];
                            }
                        }
                    }
                }
                worst = worst.max((acc - y[[o, r, c]]).abs());
            }
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn batchnorm_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_activation(&mut rng, (4, 5, 3));
    let p: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random::<f64>() + 0.1).collect()).collect();
    let mut y = x.clone();
    batchnorm(&mut y, &p[0], &p[1], &p[2], &p[3], BN_EPS).unwrap();
    for ((c, r, k), v) in y.indexed_iter() {
        let expect = p[0][c] * (x[[c, r, k]] - p[2][c]) / (p[3][c] + BN_EPS).sqrt() + p[1][c];
        assert_eq!(*v, expect);
    }
}

#[test]
fn matches_reference_forward_dump() {
    let w = load_weights(fixture("parity_weights.drum")).unwrap();
    let dump = TensorArchive::read(fixture("parity_dump.drum")).unwrap();
    let get = |n: &str| -> Activation {
        dump.require(n).unwrap().to_real().unwrap().into_dimensionality::<Ix3>().unwrap()
    };
    let reported = dump.require("param_count").unwrap().to_real().unwrap()[[0]];
    assert_eq!(w.parameter_count().trainable as f64, reported);
    assert_eq!(w.arch().parameter_count(), w.parameter_count());

    let trace = forward_traced(&get("input").view(), &w).unwrap();
    assert_eq!(trace.len(), 2 * w.arch().levels + 2);
    for (name, act) in &trace {
        let expect = get(name);
        let d = max_abs_diff(&act.view(), &expect.view());
        assert!(d < 1e-4, "{name}: max abs diff {d}");
    }
}

#[test]
fn default_architecture_count_is_reported_against_reference() {
    let c = ArchSpec::default().parameter_count();
    let delta = c.trainable as f64 - REFERENCE_PARAMETER_COUNT as f64;
    assert!(delta.abs() / (REFERENCE_PARAMETER_COUNT as f64) < 0.01, "{c}");
    assert_eq!(c.trainable, 31_039_686);
}

fn small_arch() -> ArchSpec {
    ArchSpec { levels: 4, base: 8, in_channels: 6, out_channels: 6, dropout: 0.5 }
}

#[test]
fn missing_bias_names_layer() {
    let ar = NetworkWeights::random(small_arch(), 1).to_archive();
    let kept: Vec<Tensor> = ar.into_entries().into_iter().filter(|t| t.name() != "out.bias").collect();
    let err = NetworkWeights::from_archive(&TensorArchive::from_entries(kept).unwrap()).unwrap_err();
    assert!(matches!(&err, RefinerError::MissingTensor { layer, name } if layer == "out" && name == "out.bias"));
    assert!(err.to_string().contains("out.bias"));
}

#[test]
fn transposed_kernel_layout_rejected() {
    let ar = NetworkWeights::random(small_arch(), 1).to_archive();
    let entries: Vec<Tensor> = ar
        .into_entries()
        .into_iter()
        .map(|t| {
            if t.name() == "enc1.conv1.weight" {
                // (k_out, k_in, 3, 3) written as (3, 3, k_in, k_out)
                let d = t.dims().to_vec();
                Tensor::new(t.name(), vec![d[2], d[3], d[1], d[0]], t.dtype(), t.raw().to_vec()).unwrap()
            } else {
                t
            }
        })
        .collect();
    let err = NetworkWeights::from_archive(&TensorArchive::from_entries(entries).unwrap()).unwrap_err();
    assert!(matches!(&err, RefinerError::ShapeMismatch { layer, .. } if layer == "enc1.conv1"), "{err}");
}

#[test]
fn unknown_version_rejected() {
    let mut entries = NetworkWeights::zeros(small_arch()).to_archive().into_entries();
    let mut d = small_arch().descriptor();
    d[0] = 7.0;
    entries[0] = Tensor::from_vec("arch", &d);
    let err = NetworkWeights::from_archive(&TensorArchive::from_entries(entries).unwrap()).unwrap_err();
    assert!(matches!(err, RefinerError::UnknownArchitecture(_)));
}

fn basis_stack(nt: usize, seed: u64) -> Array3<c64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((nt, 160, 144), |_| c64::new(rng.random(), rng.random()))
}

#[test]
fn refine_with_identity_weights_keeps_basis() {
    let b = decompose(&basis_stack(3, 2), 3).unwrap();
    let p = prepare_basis(&b);
    let w = NetworkWeights::identity(ArchSpec::for_rank(3));
    let r = refine_basis(&p, &w).unwrap();
    assert_eq!(r.data.dim(), (6, 128, 128));
    assert!(max_abs_diff(&r.data.view(), &p.data.view()) < 1e-4);
    assert_eq!((&r.phi, &r.mean, &r.std, r.window), (&p.phi, &p.mean, &p.std, p.window));
}

#[test]
fn rank_mismatch_rejected() {
    let b = decompose(&basis_stack(2, 3), 2).unwrap();
    let p = prepare_basis(&b);
    let w = NetworkWeights::zeros(ArchSpec { base: 8, ..ArchSpec::for_rank(3) });
    assert!(matches!(
        refine_basis(&p, &w),
        Err(RefinerError::ChannelMismatch { basis: 4, weights: 6 })
    ));
}

#[test]
fn output_shape_for_random_weights() {
    let w = NetworkWeights::random(ArchSpec { base: 8, ..ArchSpec::default() }, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_activation(&mut rng, (6, 128, 128));
    let trace = forward_traced(&x.view(), &w).unwrap();
    let sizes: Vec<usize> = trace.iter().map(|(_, a)| a.dim().1).collect();
    assert_eq!(sizes, vec![128, 64, 32, 16, 8, 16, 32, 64, 128, 128]);
    let y = forward(&x.view(), &w).unwrap();
    assert_eq!(y.dim(), (6, 128, 128));
    assert!(y.iter().all(|v| v.is_finite()));
}
