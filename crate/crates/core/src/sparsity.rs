//! Orthogonal 2-D wavelet transform and complex soft thresholding.
//!
//! Daubechies-4 (four taps, two vanishing moments) with periodic boundary
//! handling, applied separably in the Mallat layout: after `J` levels the
//! coarse approximation occupies the top-left `(ny >> J) x (nx >> J)` block.
//! Inputs whose sides are not multiples of `2^J` are symmetrically padded and
//! cropped again on the inverse.

use ndarray::{s, Array2, ArrayView2};
use thiserror::Error;

use crate::c64;

pub const DEFAULT_LEVELS: usize = 4;

const SQRT3: f64 = 1.732_050_807_568_877_2;

fn lowpass() -> [f64; 4] {
    let d = 4.0 * std::f64::consts::SQRT_2;
    [
        (1.0 + SQRT3) / d,
        (3.0 + SQRT3) / d,
        (3.0 - SQRT3) / d,
        (1.0 - SQRT3) / d,
    ]
}

fn highpass() -> [f64; 4] {
    let h = lowpass();
    [h[3], -h[2], h[1], -h[0]]
}

#[derive(Debug, Error, PartialEq)]
pub enum WaveletError {
    #[error("{levels} levels do not fit a {ny}x{nx} image")]
    TooManyLevels { levels: usize, ny: usize, nx: usize },
    #[error("coefficients of shape {got:?} do not match {expected:?}")]
    ShapeMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Critically sampled coefficients in Mallat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    data: Array2<c64>,
    levels: usize,
    original: (usize, usize),
}

impl WaveletCoeffs {
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Image dimensions before padding.
    pub fn original_dims(&self) -> (usize, usize) {
        self.original
    }

    pub fn data(&self) -> &Array2<c64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<c64> {
        &mut self.data
    }

    /// Extent of the coarsest approximation band.
    pub fn approx_dims(&self) -> (usize, usize) {
        let (h, w) = self.data.dim();
        (h >> self.levels, w >> self.levels)
    }

    pub fn approx(&self) -> ArrayView2<'_, c64> {
        let (h, w) = self.approx_dims();
        self.data.slice(s![..h, ..w])
    }

    /// Detail bands `(LH, HL, HH)` at `level` (1 = finest).
    pub fn details(
        &self,
        level: usize,
    ) -> (ArrayView2<'_, c64>, ArrayView2<'_, c64>, ArrayView2<'_, c64>) {
        assert!(level >= 1 && level <= self.levels);
        let (h, w) = self.data.dim();
        let (bh, bw) = (h >> level, w >> level);
        (
            self.data.slice(s![bh..2 * bh, ..bw]),
            self.data.slice(s![..bh, bw..2 * bw]),
            self.data.slice(s![bh..2 * bh, bw..2 * bw]),
        )
    }

    fn in_approx(&self, y: usize, x: usize) -> bool {
        let (h, w) = self.approx_dims();
        y < h && x < w
    }

    /// Sum of magnitudes over the detail bands.
    pub fn detail_l1(&self) -> f64 {
        self.data
            .indexed_iter()
            .filter(|((y, x), _)| !self.in_approx(*y, *x))
            .map(|(_, v)| v.norm())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

fn padded_len(n: usize, levels: usize) -> usize {
    let b = 1usize << levels;
    n.div_ceil(b) * b
}

// half-sample symmetric index into 0..n
fn reflect(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

fn analyze(line: &mut [c64], tmp: &mut [c64]) {
    let n = line.len();
    let half = n / 2;
    let (h, g) = (lowpass(), highpass());
    for i in 0..half {
        let mut a = c64::new(0.0, 0.0);
        let mut d = c64::new(0.0, 0.0);
        for k in 0..4 {
            let v = line[(2 * i + k) % n];
            a += v * h[k];
            d += v * g[k];
        }
        tmp[i] = a;
        tmp[half + i] = d;
    }
    line.copy_from_slice(&tmp[..n]);
}

fn synthesize(line: &mut [c64], tmp: &mut [c64]) {
    let n = line.len();
    let half = n / 2;
    let (h, g) = (lowpass(), highpass());
    tmp[..n].fill(c64::new(0.0, 0.0));
    for i in 0..half {
        let (a, d) = (line[i], line[half + i]);
        for k in 0..4 {
            tmp[(2 * i + k) % n] += a * h[k] + d * g[k];
        }
    }
    line.copy_from_slice(&tmp[..n]);
}

fn apply_level(data: &mut Array2<c64>, h: usize, w: usize, forward: bool) {
    let step = if forward { analyze } else { synthesize };
    let mut line = vec![c64::new(0.0, 0.0); h.max(w)];
    let mut tmp = vec![c64::new(0.0, 0.0); h.max(w)];
    let rows = |data: &mut Array2<c64>, line: &mut [c64], tmp: &mut [c64]| {
        for y in 0..h {
            let mut row = data.slice_mut(s![y, ..w]);
            for (l, v) in line.iter_mut().zip(row.iter()) {
                *l = *v;
            }
            step(&mut line[..w], tmp);
            row.iter_mut().zip(line.iter()).for_each(|(v, l)| *v = *l);
        }
    };
    let cols = |data: &mut Array2<c64>, line: &mut [c64], tmp: &mut [c64]| {
        for x in 0..w {
            let mut col = data.slice_mut(s![..h, x]);
            for (l, v) in line.iter_mut().zip(col.iter()) {
                *l = *v;
            }
            step(&mut line[..h], tmp);
            col.iter_mut().zip(line.iter()).for_each(|(v, l)| *v = *l);
        }
    };
    if forward {
        rows(data, &mut line, &mut tmp);
        cols(data, &mut line, &mut tmp);
    } else {
        cols(data, &mut line, &mut tmp);
        rows(data, &mut line, &mut tmp);
    }
}

/// Forward transform with `levels` decomposition levels.
pub fn dwt2(img: ArrayView2<c64>, levels: usize) -> Result<WaveletCoeffs, WaveletError> {
    let (ny, nx) = img.dim();
    if levels == 0 || (1usize << levels.min(63)) > ny.min(nx) {
        return Err(WaveletError::TooManyLevels { levels, ny, nx });
    }
    let (py, px) = (padded_len(ny, levels), padded_len(nx, levels));
    let mut data = if (py, px) == (ny, nx) {
        img.to_owned()
    } else {
        Array2::from_shape_fn((py, px), |(y, x)| img[[reflect(y, ny), reflect(x, nx)]])
    };
    let (mut h, mut w) = (py, px);
    for _ in 0..levels {
        apply_level(&mut data, h, w, true);
        h /= 2;
        w /= 2;
    }
    Ok(WaveletCoeffs {
        data,
        levels,
        original: (ny, nx),
    })
}

/// Inverse transform, cropping any padding added by [`dwt2`].
pub fn idwt2(coeffs: &WaveletCoeffs) -> Array2<c64> {
    let mut data = coeffs.data.clone();
    let (py, px) = data.dim();
    for level in (0..coeffs.levels).rev() {
        apply_level(&mut data, py >> level, px >> level, false);
    }
    let (ny, nx) = coeffs.original;
    if (ny, nx) == (py, px) {
        data
    } else {
        data.slice(s![..ny, ..nx]).to_owned()
    }
}

/// Complex soft threshold of one coefficient.
#[inline]
pub fn shrink(w: c64, t: f64) -> c64 {
    let m = w.norm();
    if m <= t || m == 0.0 {
        c64::new(0.0, 0.0)
    } else {
        w * ((m - t) / m)
    }
}

/// Shrink every detail coefficient by `t`; the approximation band is kept.
pub fn soft_threshold(coeffs: &WaveletCoeffs, t: f64) -> WaveletCoeffs {
    assert!(t >= 0.0, "threshold must be non-negative");
    let mut out = coeffs.clone();
    soft_threshold_inplace(&mut out, t);
    out
}

pub fn soft_threshold_inplace(coeffs: &mut WaveletCoeffs, t: f64) {
    if t == 0.0 {
        return;
    }
    let (ah, aw) = coeffs.approx_dims();
    for ((y, x), v) in coeffs.data.indexed_iter_mut() {
        if y >= ah || x >= aw {
            *v = shrink(*v, t);
        }
    }
}

/// `Psi^H soft(Psi x, t)`: the proximal map of `t * ||Psi x||_1` (details only)
/// for an orthogonal `Psi` on dyadic grids.
pub fn wavelet_prox(img: ArrayView2<c64>, levels: usize, t: f64) -> Result<Array2<c64>, WaveletError> {
    let mut w = dwt2(img, levels)?;
    soft_threshold_inplace(&mut w, t);
    Ok(idwt2(&w))
}

/// Largest level count usable on an `ny x nx` image, capped at `max`.
pub fn max_levels(ny: usize, nx: usize, max: usize) -> usize {
    let mut j = 0;
    while j < max && (1usize << (j + 1)) <= ny.min(nx) {
        j += 1;
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(ny: usize, nx: usize, seed: u64) -> Array2<c64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((ny, nx), |_| {
            c64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    fn norm(a: &Array2<c64>) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn filters_are_orthonormal() {
        let (h, g) = (lowpass(), highpass());
        let hh: f64 = h.iter().map(|v| v * v).sum();
        let hg: f64 = h.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let shifted: f64 = h[2] * h[0] + h[3] * h[1];
        assert!((hh - 1.0).abs() < 1e-15);
        assert!(hg.abs() < 1e-15);
        assert!(shifted.abs() < 1e-15);
        assert!((h.iter().sum::<f64>() - std::f64::consts::SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn constant_image() {
        let c = c64::new(0.7, -0.2);
        let img = Array2::from_elem((32, 48), c);
        let w = dwt2(img.view(), 4).unwrap();
        for (idx, v) in w.data().indexed_iter() {
            if w.in_approx(idx.0, idx.1) {
                assert!((v - c * 16.0).norm() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_reconstruction_and_energy() {
        for (ny, nx, j) in [(64, 64, 4), (192, 192, 4), (16, 32, 3), (8, 8, 3)] {
            let x = random(ny, nx, 5);
            let w = dwt2(x.view(), j).unwrap();
            assert!((w.norm() - norm(&x)).abs() <= 1e-10 * norm(&x));
            let back = idwt2(&w);
            assert!(norm(&(&back - &x)) <= 1e-10 * norm(&x));
        }
    }

    #[test]
    fn non_dyadic_round_trip() {
        let x = random(50, 37, 9);
        let w = dwt2(x.view(), 3).unwrap();
        assert_eq!(w.data().dim(), (56, 40));
        assert_eq!(w.original_dims(), (50, 37));
        let back = idwt2(&w);
        assert!(norm(&(&back - &x)) <= 1e-10 * norm(&x));
    }

    #[test]
    fn too_many_levels() {
        let x = random(16, 16, 1);
        assert!(matches!(
            dwt2(x.view(), 5),
            Err(WaveletError::TooManyLevels { .. })
        ));
    }

    #[test]
    fn shrink_boundary_cases() {
        assert_eq!(shrink(c64::new(3.0, 4.0), 5.0), c64::new(0.0, 0.0));
        assert_eq!(shrink(c64::new(0.0, 0.0), 0.0), c64::new(0.0, 0.0));
        let v = shrink(c64::new(3.0, 4.0), 2.5);
        assert!((v - c64::new(1.5, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn zero_threshold_is_identity_and_approx_untouched() {
        let x = random(32, 32, 2);
        let w = dwt2(x.view(), 3).unwrap();
        assert_eq!(soft_threshold(&w, 0.0), w);
        let big = soft_threshold(&w, 1e9);
        assert_eq!(big.approx(), w.approx());
        assert_eq!(big.detail_l1(), 0.0);
    }
}
