//! ESPIRiT coil sensitivity calibration from the autocalibration band.
//!
//! Patches of the ACS block span a low-dimensional signal subspace. The
//! projector onto that subspace, averaged over kernel positions, is a
//! k-space convolution whose image-domain form is a small Hermitian matrix
//! per pixel; the sensitivities are its eigenvectors with eigenvalue near 1.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{fft2c_inplace, MultiCoilKSpace, SensitivityMaps};
use crate::{c64, par};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Kernel extent `(ky, kx)`.
    pub kernel: (usize, usize),
    /// Keep singular vectors with `sigma >= threshold * sigma_1`.
    pub threshold: f64,
    /// Pixels whose top eigenvalue falls below this are outside the support.
    pub crop: f64,
    /// Size of the central ACS band used for calibration.
    pub acs_lines: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            kernel: (6, 6),
            threshold: 0.02,
            crop: 0.9,
            acs_lines: 24,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), EspiritError> {
        let bad = |m: String| Err(EspiritError::InvalidConfig(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if !(self.crop > 0.0 && self.crop <= 1.0) {
            return bad(format!("crop {} not in (0, 1]", self.crop));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad(format!("empty kernel {:?}", self.kernel));
        }
        if self.kernel.0 > self.acs_lines {
            return Err(EspiritError::KernelTooLarge {
                kernel: self.kernel,
                acs: (self.acs_lines, usize::MAX),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EspiritError {
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("no fully sampled central band of {needed} lines (found {found})")]
    NoAcs { needed: usize, found: usize },
    #[error("kernel {kernel:?} larger than ACS block {acs:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        acs: (usize, usize),
    },
    #[error("degenerate calibration: {0}")]
    Degenerate(String),
}

/// Central fully sampled block `(coil, acs_lines, kx)` of the first contrast.
pub fn extract_acs(y: &MultiCoilKSpace, acs_lines: usize) -> Result<Array3<c64>, EspiritError> {
    let (ny, _) = y.shape();
    let needed = acs_lines.min(ny);
    let band = y.mask.fully_sampled_center_band();
    let found = band.as_ref().map_or(0, |b| b.len());
    if needed == 0 || y.mask.acs_lines() == 0 {
        return Err(EspiritError::NoAcs { needed, found });
    }
    let range = crate::encoding::acs_range(ny, needed);
    match band {
        Some(b) if b.start <= range.start && b.end >= range.end => {
            Ok(y.data.slice(s![0, .., range, ..]).to_owned())
        }
        _ => Err(EspiritError::NoAcs { needed, found }),
    }
}

/// Block-Hankel matrix of all kernel-sized patches. Rows run over patch
/// positions `(py, px)`; columns over `(coil, ky, kx)` with the coil slowest.
pub fn calibration_matrix(acs: ArrayView3<c64>, kernel: (usize, usize)) -> Result<Array2<c64>, EspiritError> {
    let (nc, ay, ax) = acs.dim();
    let (ky, kx) = kernel;
    if ky > ay || kx > ax || ky == 0 || kx == 0 {
        return Err(EspiritError::KernelTooLarge { kernel, acs: (ay, ax) });
    }
    let (py, px) = (ay - ky + 1, ax - kx + 1);
    let mut a = Array2::zeros((py * px, nc * ky * kx));
    for ((row, col), v) in a.indexed_iter_mut() {
        let (p_y, p_x) = (row / px, row % px);
        let (c, k) = (col / (ky * kx), col % (ky * kx));
        *v = acs[[c, p_y + k / kx, p_x + k % kx]];
    }
    Ok(a)
}

/// Maps together with calibration diagnostics.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub maps: SensitivityMaps,
    /// Top eigenvalue per pixel.
    pub eigenvalues: Array2<f64>,
    /// Singular values of the calibration matrix, descending.
    pub singular_values: Vec<f64>,
    /// Number of retained singular vectors.
    pub rank: usize,
}

pub fn estimate_maps(y: &MultiCoilKSpace, cfg: &CalibrationConfig) -> Result<SensitivityMaps, EspiritError> {
    calibrate(y, cfg).map(|c| c.maps)
}

pub fn calibrate(y: &MultiCoilKSpace, cfg: &CalibrationConfig) -> Result<Calibration, EspiritError> {
    cfg.validate()?;
    let acs = extract_acs(y, cfg.acs_lines)?;
    let (nc, _, _) = acs.dim();
    let a = calibration_matrix(acs.view(), cfg.kernel)?;
    let (sv, basis) = signal_subspace(&a)?;
    let rank = sv.iter().take_while(|&&s| s >= cfg.threshold * sv[0]).count();
    log::debug!("espirit: kept {rank} of {} singular vectors", sv.len());

    let (ny, nx) = y.shape();
    let kernels = image_kernels(&basis, rank, nc, cfg.kernel, (ny, nx));
    let pixels = par::map_indices(ny * nx, |i| {
        let (r, c) = (i / nx, i % nx);
        let w = DMatrix::from_fn(nc, nc, |a, b| kernels[[a * nc + b, r, c]]);
        top_eigenvector(w)
    });

    let mut maps = Array3::<c64>::zeros((nc, ny, nx));
    let mut support = Array2::from_elem((ny, nx), false);
    let mut eigenvalues = Array2::zeros((ny, nx));
    for (i, (lambda, v)) in pixels.into_iter().enumerate() {
        let (r, c) = (i / nx, i % nx);
        eigenvalues[[r, c]] = lambda;
        if lambda >= cfg.crop {
            support[[r, c]] = true;
            for q in 0..nc {
                maps[[q, r, c]] = v[q];
            }
        }
    }
    if !support.iter().any(|&b| b) {
        return Err(EspiritError::Degenerate(format!(
            "no pixel reaches eigenvalue {} (max {:.3})",
            cfg.crop,
            eigenvalues.iter().copied().fold(0.0, f64::max)
        )));
    }
    Ok(Calibration {
        maps: SensitivityMaps { maps, support },
        eigenvalues,
        singular_values: sv,
        rank,
    })
}

/// Singular values (descending) and matching orthonormal patch-space
/// vectors, from the eigendecomposition of `sum_p x_p x_p^H`.
fn signal_subspace(a: &Array2<c64>) -> Result<(Vec<f64>, DMatrix<c64>), EspiritError> {
    let (rows, n) = a.dim();
    let at = a.t().as_standard_layout().to_owned();
    let lower: Vec<Vec<c64>> = par::map_indices(n, |i| {
        let ri = at.row(i);
        (0..=i)
            .map(|j| {
                let rj = at.row(j);
                let mut acc = c64::new(0.0, 0.0);
                for p in 0..rows {
                    acc += ri[p] * rj[p].conj();
                }
                acc
            })
            .collect()
    });
    let gram = DMatrix::from_fn(n, n, |i, j| if j <= i { lower[i][j] } else { lower[j][i].conj() });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let sv: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0).sqrt()).collect();
    if !(sv[0] > 0.0) || !sv[0].is_finite() {
        return Err(EspiritError::Degenerate("calibration data are zero".into()));
    }
    let basis = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((sv, basis))
}

/// Image-domain operator `W_{ab}(r)`, stored as `(a * nc + b, y, x)`.
fn image_kernels(
    basis: &DMatrix<c64>,
    rank: usize,
    nc: usize,
    kernel: (usize, usize),
    shape: (usize, usize),
) -> Array3<c64> {
    let (ky, kx) = kernel;
    let kk = ky * kx;
    let n = nc * kk;
    let v = basis.columns(0, rank);
    let proj = &v * v.adjoint();
    debug_assert_eq!(proj.nrows(), n);

    // averaging the patch constraint over the kernel positions covering a
    // sample turns the projector into a correlation with offsets d = k' - k
    let (dy, dx) = (2 * ky - 1, 2 * kx - 1);
    let (ny, nx) = shape;
    let (cy, cx) = (ny / 2, nx / 2);
    let scale = ((ny * nx) as f64).sqrt() / kk as f64;
    let mut out = Array3::<c64>::zeros((nc * nc, ny, nx));
    par::for_each_chunk_mut(out.as_slice_mut().expect("standard layout"), ny * nx, |pair, plane| {
        let (a, b) = (pair / nc, pair % nc);
        let mut g = Array2::<c64>::zeros((dy, dx));
        for k in 0..kk {
            for k2 in 0..kk {
                let oy = k2 / kx + ky - 1 - k / kx;
                let ox = k2 % kx + kx - 1 - k % kx;
                g[[oy, ox]] += proj[(a * kk + k, b * kk + k2)];
            }
        }
        let mut img = ndarray::ArrayViewMut2::from_shape((ny, nx), plane).expect("plane");
        for ((oy, ox), &val) in g.indexed_iter() {
            let y = (cy + oy + ny * ky - (ky - 1)) % ny;
            let x = (cx + ox + nx * kx - (kx - 1)) % nx;
            img[[y, x]] += val * scale;
        }
        fft2c_inplace(img.view_mut());
    });
    out
}

/// Dominant eigenpair of a Hermitian matrix, unit norm with the first
/// component real and non-negative.
fn top_eigenvector(w: DMatrix<c64>) -> (f64, Vec<c64>) {
    let n = w.nrows();
    let eig = SymmetricEigen::new(w);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let mut best = order[0];
    if n > 1 {
        let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
        if (l0 - l1).abs() <= 1e-12 * l0.abs().max(1.0)
            && eig.eigenvectors[(0, order[1])].norm() > eig.eigenvectors[(0, order[0])].norm()
        {
            best = order[1];
        }
    }
    let mut v: Vec<c64> = eig.eigenvectors.column(best).iter().copied().collect();
    let first = v[0];
    if first.norm() > 0.0 {
        let rot = first.conj() / first.norm();
        for z in v.iter_mut() {
            *z *= rot;
        }
        v[0] = c64::new(v[0].norm(), 0.0);
    }
    (eig.eigenvalues[best], v)
}

/// Absolute normalized correlation `|<a, b>| / (|a| |b|)` per pixel over the
/// coil axis; `None` where either vector vanishes.
pub fn map_correlation(a: &SensitivityMaps, b: &SensitivityMaps) -> Array2<Option<f64>> {
    let (ny, nx) = a.shape();
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let va = a.maps.slice(s![.., y, x]);
        let vb = b.maps.slice(s![.., y, x]);
        let dot: c64 = va.iter().zip(vb.iter()).map(|(p, q)| p.conj() * q).sum();
        let na = va.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let nb = vb.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        (na > 0.0 && nb > 0.0).then(|| dot.norm() / (na * nb))
    })
}

impl Calibration {
    pub fn n_coils(&self) -> usize {
        self.maps.maps.len_of(Axis(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::SamplingMask;
    use ndarray::Array4;

    #[test]
    fn single_patch_matrix_is_flattened_block() {
        let acs = Array3::from_shape_fn((1, 6, 6), |(_, y, x)| c64::new((y * 6 + x) as f64, 0.0));
        let a = calibration_matrix(acs.view(), (6, 6)).unwrap();
        assert_eq!(a.dim(), (1, 36));
        for (i, v) in a.iter().enumerate() {
            assert_eq!(v.re, i as f64);
        }
    }

    #[test]
    fn matrix_counts() {
        let acs = Array3::<c64>::zeros((1, 7, 6));
        assert_eq!(calibration_matrix(acs.view(), (6, 6)).unwrap().dim(), (2, 36));
        let acs = Array3::<c64>::zeros((3, 10, 12));
        assert_eq!(calibration_matrix(acs.view(), (6, 6)).unwrap().dim(), (5 * 7, 108));
        assert!(matches!(
            calibration_matrix(acs.view(), (11, 6)),
            Err(EspiritError::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn zero_acs_rejected() {
        let y = MultiCoilKSpace {
            data: Array4::zeros((1, 2, 64, 16)),
            mask: SamplingMask::uniform(64, 16, 4, 0),
        };
        assert!(matches!(extract_acs(&y, 24), Err(EspiritError::NoAcs { .. })));
    }

    #[test]
    fn full_mask_uses_fixed_band() {
        let y = MultiCoilKSpace {
            data: Array4::from_shape_fn((2, 3, 64, 16), |(t, c, ky, kx)| {
                c64::new((t * 1000 + c * 100 + ky) as f64, kx as f64)
            }),
            mask: SamplingMask::full(64, 16),
        };
        let acs = extract_acs(&y, 24).unwrap();
        assert_eq!(acs.dim(), (3, 24, 16));
        assert_eq!(acs[[1, 0, 5]], c64::new(100.0 + 20.0, 5.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = CalibrationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.threshold = 1.0;
        assert!(cfg.validate().is_err());
        cfg = CalibrationConfig { crop: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = CalibrationConfig { kernel: (30, 6), ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
