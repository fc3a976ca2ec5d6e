//! Multi-coil Cartesian encoding `E = P F S_q` and its adjoint.

mod fft;
mod mask;

pub use fft::{fft2c, fft2c_inplace, ifft2c, ifft2c_inplace};
pub use mask::SamplingMask;
pub(crate) use mask::acs_range;

use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::{c64, par};

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Complex image series indexed `(contrast, y, x)`.
pub type ContrastStack = Array3<c64>;

/// Per-coil complex sensitivities `(coil, y, x)` with their region of validity.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMaps {
    pub maps: Array3<c64>,
    pub support: Array2<bool>,
}

impl SensitivityMaps {
    pub fn new(maps: Array3<c64>, support: Array2<bool>) -> Result<Self, EncodingError> {
        let (_, ny, nx) = maps.dim();
        if support.dim() != (ny, nx) {
            return Err(EncodingError::DimensionMismatch(format!(
                "support {:?} vs maps {:?}",
                support.dim(),
                (ny, nx)
            )));
        }
        Ok(Self { maps, support })
    }

    /// Maps with support derived from where any coil is non-zero.
    pub fn from_maps(maps: Array3<c64>) -> Self {
        let (_, ny, nx) = maps.dim();
        let support = Array2::from_shape_fn((ny, nx), |(y, x)| {
            maps.slice(ndarray::s![.., y, x])
                .iter()
                .any(|v| v.norm_sqr() > 0.0)
        });
        Self { maps, support }
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len_of(Axis(0))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.maps.len_of(Axis(1)), self.maps.len_of(Axis(2)))
    }

    /// Per-pixel sum of squared coil magnitudes.
    pub fn sum_of_squares(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.shape());
        for coil in self.maps.outer_iter() {
            Zip::from(&mut out)
                .and(&coil)
                .for_each(|o, v| *o += v.norm_sqr());
        }
        out
    }
}

/// Multi-coil k-space `(contrast, coil, ky, kx)` with its sampling mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilKSpace {
    pub data: Array4<c64>,
    pub mask: SamplingMask,
}

impl MultiCoilKSpace {
    pub fn n_contrasts(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn n_coils(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.len_of(Axis(2)), self.data.len_of(Axis(3)))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: self.data.mapv(|v| v * s),
            mask: self.mask.clone(),
        }
    }
}

/// The SENSE encoding operator for a fixed set of maps and a mask.
#[derive(Debug, Clone, Copy)]
pub struct SenseOperator<'a> {
    maps: &'a SensitivityMaps,
    mask: &'a SamplingMask,
}

impl<'a> SenseOperator<'a> {
    pub fn new(maps: &'a SensitivityMaps, mask: &'a SamplingMask) -> Result<Self, EncodingError> {
        if maps.shape() != (mask.ny(), mask.nx()) {
            return Err(EncodingError::DimensionMismatch(format!(
                "maps {:?} vs mask {:?}",
                maps.shape(),
                (mask.ny(), mask.nx())
            )));
        }
        Ok(Self { maps, mask })
    }

    pub fn maps(&self) -> &SensitivityMaps {
        self.maps
    }

    pub fn mask(&self) -> &SamplingMask {
        self.mask
    }

    fn check_image(&self, x: &ArrayView3<c64>) -> Result<(), EncodingError> {
        let (nt, ny, nx) = x.dim();
        if (ny, nx) != self.maps.shape() {
            return Err(EncodingError::DimensionMismatch(format!(
                "image {:?} vs maps {:?}",
                (ny, nx),
                self.maps.shape()
            )));
        }
        self.mask.check_contrasts(nt)
    }

    /// `y[t, q] = P_t F (S_q x_t)`.
    pub fn forward(&self, x: ArrayView3<c64>) -> Result<Array4<c64>, EncodingError> {
        self.check_image(&x)?;
        let (nt, ny, nx) = x.dim();
        let nc = self.maps.n_coils();
        let mut out = Array4::<c64>::zeros((nt, nc, ny, nx));
        let plane = ny * nx;
        let data = out.as_slice_mut().expect("standard layout");
        par::for_each_chunk_mut(data, plane, |i, chunk| {
            let (t, q) = (i / nc, i % nc);
            let mut k = ndarray::ArrayViewMut2::from_shape((ny, nx), chunk).expect("plane");
            Zip::from(&mut k)
                .and(x.index_axis(Axis(0), t))
                .and(self.maps.maps.index_axis(Axis(0), q))
                .for_each(|o, &xv, &s| *o = s * xv);
            fft2c_inplace(k.view_mut());
            Zip::from(&mut k)
                .and(self.mask.for_contrast(t))
                .for_each(|o, &m| {
                    if !m {
                        *o = c64::new(0.0, 0.0)
                    }
                });
        });
        Ok(out)
    }

    /// `x[t] = sum_q conj(S_q) F^H (P_t y[t, q])`.
    pub fn adjoint(&self, y: ArrayView4<'_, c64>) -> Result<ContrastStack, EncodingError> {
        let (nt, nc, ny, nx) = y.dim();
        if nc != self.maps.n_coils() || (ny, nx) != self.maps.shape() {
            return Err(EncodingError::DimensionMismatch(format!(
                "k-space {:?} vs maps {:?}",
                y.dim(),
                self.maps.maps.dim()
            )));
        }
        self.mask.check_contrasts(nt)?;
        let coil_images: Vec<Array2<c64>> = par::map_indices(nt * nc, |i| {
            let (t, q) = (i / nc, i % nc);
            let mut k = y.slice(ndarray::s![t, q, .., ..]).to_owned();
            Zip::from(&mut k)
                .and(self.mask.for_contrast(t))
                .for_each(|o, &m| {
                    if !m {
                        *o = c64::new(0.0, 0.0)
                    }
                });
            ifft2c_inplace(k.view_mut());
            Zip::from(&mut k)
                .and(self.maps.maps.index_axis(Axis(0), q))
                .for_each(|o, s| *o *= s.conj());
            k
        });
        let mut out = ContrastStack::zeros((nt, ny, nx));
        for (i, img) in coil_images.iter().enumerate() {
            let mut slot = out.index_axis_mut(Axis(0), i / nc);
            slot += img;
        }
        Ok(out)
    }

    /// `E^H E x`.
    pub fn normal(&self, x: ArrayView3<c64>) -> Result<ContrastStack, EncodingError> {
        let y = self.forward(x)?;
        self.adjoint(y.view())
    }
}

pub fn sense_forward(
    x: &ContrastStack,
    maps: &SensitivityMaps,
    mask: &SamplingMask,
) -> Result<MultiCoilKSpace, EncodingError> {
    let data = SenseOperator::new(maps, mask)?.forward(x.view())?;
    Ok(MultiCoilKSpace {
        data,
        mask: mask.clone(),
    })
}

pub fn sense_adjoint(
    y: &MultiCoilKSpace,
    maps: &SensitivityMaps,
    mask: &SamplingMask,
) -> Result<ContrastStack, EncodingError> {
    SenseOperator::new(maps, mask)?.adjoint(y.data.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenStatus {
    Converged,
    /// `E^H E` annihilated the iterate; the estimate is 0.
    ZeroOperator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenEstimate {
    pub value: f64,
    pub status: EigenStatus,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

pub const POWER_ITERATIONS: usize = 30;
const POWER_SEED: u64 = 0x5eed_e16e;

/// Power-iteration estimate of the largest eigenvalue of `E^H E`.
pub fn max_eigenvalue(
    maps: &SensitivityMaps,
    mask: &SamplingMask,
    iterations: usize,
) -> Result<EigenEstimate, EncodingError> {
    assert!(iterations >= 1, "power iteration needs at least one step");
    let op = SenseOperator::new(maps, mask)?;
    let (ny, nx) = maps.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut x = ContrastStack::from_shape_fn((mask.n_masks(), ny, nx), |_| {
        c64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    });
    normalize(&mut x);
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let ax = op.normal(x.view())?;
        // x is unit-norm, so <x, Ax> is the Rayleigh quotient
        let rq = inner(&x, &ax).re;
        history.push(rq);
        let n = norm(&ax);
        if n == 0.0 || !n.is_finite() {
            log::warn!("power iteration: operator is zero on the iterate");
            return Ok(EigenEstimate {
                value: 0.0,
                status: EigenStatus::ZeroOperator,
                history,
            });
        }
        x = ax / c64::new(n, 0.0);
    }
    let value = *history.last().expect("at least one iteration");
    Ok(EigenEstimate {
        value,
        status: EigenStatus::Converged,
        history,
    })
}

pub(crate) fn inner<D: ndarray::Dimension>(
    a: &ndarray::Array<c64, D>,
    b: &ndarray::Array<c64, D>,
) -> c64 {
    Zip::from(a).and(b).fold(c64::new(0.0, 0.0), |acc, x, y| acc + x.conj() * y)
}

pub(crate) fn norm<D: ndarray::Dimension>(a: &ndarray::Array<c64, D>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

fn normalize(x: &mut ContrastStack) {
    let n = norm(x);
    if n > 0.0 {
        x.mapv_inplace(|v| v / n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn unit_maps(ny: usize, nx: usize) -> SensitivityMaps {
        SensitivityMaps::from_maps(Array3::from_elem((1, ny, nx), c64::new(1.0, 0.0)))
    }

    fn random_stack(nt: usize, ny: usize, nx: usize, seed: u64) -> ContrastStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContrastStack::from_shape_fn((nt, ny, nx), |_| {
            c64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn zero_in_zero_out() {
        let maps = unit_maps(8, 8);
        let mask = SamplingMask::uniform(8, 8, 2, 2);
        let y = sense_forward(&ContrastStack::zeros((2, 8, 8)), &maps, &mask).unwrap();
        assert!(y.data.iter().all(|v| v.norm() == 0.0));
        let x = sense_adjoint(&y, &maps, &mask).unwrap();
        assert!(x.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn single_unit_coil_full_mask_is_fft() {
        let maps = unit_maps(12, 10);
        let mask = SamplingMask::full(12, 10);
        let x = random_stack(3, 12, 10, 1);
        let y = sense_forward(&x, &maps, &mask).unwrap();
        for t in 0..3 {
            let k = fft2c(x.index_axis(Axis(0), t));
            let d = &k - &y.data.slice(ndarray::s![t, 0, .., ..]);
            assert!(d.iter().all(|v| v.norm() < 1e-12));
        }
        let back = sense_adjoint(&y, &maps, &mask).unwrap();
        assert!(norm(&(&back - &x)) <= 1e-10 * norm(&x));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let maps = unit_maps(8, 8);
        let mask = SamplingMask::full(8, 6);
        assert!(matches!(
            SenseOperator::new(&maps, &mask),
            Err(EncodingError::DimensionMismatch(_))
        ));
        let mask = SamplingMask::full(8, 8);
        let x = ContrastStack::zeros((1, 4, 4));
        assert!(sense_forward(&x, &maps, &mask).is_err());
    }

    #[test]
    fn eigenvalue_identity_and_zero() {
        let maps = unit_maps(16, 16);
        let est = max_eigenvalue(&maps, &SamplingMask::full(16, 16), 5).unwrap();
        assert!((est.value - 1.0).abs() < 1e-3);
        let est = max_eigenvalue(&maps, &SamplingMask::empty(16, 16), 5).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.status, EigenStatus::ZeroOperator);
    }
}
