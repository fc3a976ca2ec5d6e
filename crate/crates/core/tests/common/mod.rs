#![allow(dead_code)]

use drums::c64;
use drums::encoding::{ContrastStack, SensitivityMaps};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cplx(r: &mut ChaCha8Rng) -> c64 {
    c64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)
}

pub fn random_stack(nt: usize, ny: usize, nx: usize, seed: u64) -> ContrastStack {
    let mut r = rng(seed);
    ContrastStack::from_shape_fn((nt, ny, nx), |_| cplx(&mut r))
}

pub fn random_real(ny: usize, nx: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((ny, nx), |_| r.random::<f64>())
}

/// Random maps normalized to unit sum of squares at every pixel.
pub fn random_maps(coils: usize, ny: usize, nx: usize, seed: u64) -> SensitivityMaps {
    let mut r = rng(seed);
    let mut m = Array3::from_shape_fn((coils, ny, nx), |_| cplx(&mut r));
    for y in 0..ny {
        for x in 0..nx {
            let n: f64 = (0..coils).map(|q| m[[q, y, x]].norm_sqr()).sum::<f64>().sqrt();
            for q in 0..coils {
                m[[q, y, x]] /= n;
            }
        }
    }
    SensitivityMaps::from_maps(m)
}

pub fn inner<'a>(a: impl IntoIterator<Item = &'a c64>, b: impl IntoIterator<Item = &'a c64>) -> c64 {
    a.into_iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn norm<'a>(a: impl IntoIterator<Item = &'a c64>) -> f64 {
    a.into_iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}
