//! Image-quality metrics on real (magnitude) images, optionally restricted
//! to a region of interest.
//!
//! NRMSE is normalized by the reference norm and NMSE is its square. PSNR
//! uses the reference maximum over the ROI as peak. SSIM uses a uniform
//! square window, population statistics, and a dynamic range taken from the
//! joint min/max of both images so that it is symmetric; only windows lying
//! entirely inside the ROI contribute.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::c64;

pub const SSIM_WINDOW: usize = 5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: test {test:?}, reference {reference:?}, roi {roi:?}")]
    DimensionMismatch {
        test: (usize, usize),
        reference: (usize, usize),
        roi: Option<(usize, usize)>,
    },
    #[error("reference has zero norm over the region")]
    ZeroReference,
    #[error("region of interest is empty")]
    EmptyRoi,
    #[error("no {window}x{window} window fits inside the region")]
    RoiTooSmall { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Nrmse,
    Nmse,
    Psnr,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Nrmse, Metric::Nmse, Metric::Psnr, Metric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nrmse => "nrmse",
            Metric::Nmse => "nmse",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    pub fn compute(self, test: ArrayView2<f64>, reference: ArrayView2<f64>, roi: Option<ArrayView2<bool>>) -> Result<f64, MetricError> {
        match self {
            Metric::Nrmse => nrmse(test, reference, roi),
            Metric::Nmse => nmse(test, reference, roi),
            Metric::Psnr => psnr(test, reference, roi),
            Metric::Ssim => ssim(test, reference, SSIM_WINDOW, roi),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Full,
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    pub value: f64,
    pub roi: RoiKind,
    pub reference: String,
    pub test: String,
}

pub fn magnitude(a: ArrayView2<c64>) -> Array2<f64> {
    a.mapv(|v| v.norm())
}

fn check(test: &ArrayView2<f64>, reference: &ArrayView2<f64>, roi: &Option<ArrayView2<bool>>) -> Result<(), MetricError> {
    let r = roi.as_ref().map(|m| m.dim());
    if test.dim() != reference.dim() || r.is_some_and(|d| d != test.dim()) {
        return Err(MetricError::DimensionMismatch {
            test: test.dim(),
            reference: reference.dim(),
            roi: r,
        });
    }
    if roi.as_ref().is_some_and(|m| !m.iter().any(|&b| b)) {
        return Err(MetricError::EmptyRoi);
    }
    Ok(())
}

/// `(sum (t - r)^2, sum r^2, count)` over the ROI.
fn sums(test: &ArrayView2<f64>, reference: &ArrayView2<f64>, roi: &Option<ArrayView2<bool>>) -> (f64, f64, usize) {
    let mut acc = (0.0, 0.0, 0usize);
    Zip::indexed(test).and(reference).for_each(|idx, &t, &r| {
        if roi.as_ref().is_none_or(|m| m[idx]) {
            acc.0 += (t - r) * (t - r);
            acc.1 += r * r;
            acc.2 += 1;
        }
    });
    acc
}

/// `||test - ref|| / ||ref||` over the ROI.
pub fn nrmse(test: ArrayView2<f64>, reference: ArrayView2<f64>, roi: Option<ArrayView2<bool>>) -> Result<f64, MetricError> {
    Ok(nmse(test, reference, roi)?.sqrt())
}

/// `||test - ref||^2 / ||ref||^2` over the ROI.
pub fn nmse(test: ArrayView2<f64>, reference: ArrayView2<f64>, roi: Option<ArrayView2<bool>>) -> Result<f64, MetricError> {
    check(&test, &reference, &roi)?;
    let (err, norm, _) = sums(&test, &reference, &roi);
    if norm == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    Ok(err / norm)
}

/// `10 log10(max(ref)^2 / MSE)` in dB; `+inf` when the images agree.
pub fn psnr(test: ArrayView2<f64>, reference: ArrayView2<f64>, roi: Option<ArrayView2<bool>>) -> Result<f64, MetricError> {
    check(&test, &reference, &roi)?;
    let (err, norm, n) = sums(&test, &reference, &roi);
    if norm == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let mse = err / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mut peak = f64::NEG_INFINITY;
    Zip::indexed(&reference).for_each(|idx, &r| {
        if roi.as_ref().is_none_or(|m| m[idx]) {
            peak = peak.max(r);
        }
    });
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean local SSIM over `window x window` windows inside the ROI.
pub fn ssim(test: ArrayView2<f64>, reference: ArrayView2<f64>, window: usize, roi: Option<ArrayView2<bool>>) -> Result<f64, MetricError> {
    check(&test, &reference, &roi)?;
    let (h, w) = test.dim();
    if window == 0 || h < window || w < window {
        return Err(MetricError::RoiTooSmall { window });
    }
    let inside = |idx: (usize, usize)| roi.as_ref().is_none_or(|m| m[idx]);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    Zip::indexed(&test).and(&reference).for_each(|idx, &t, &r| {
        if inside(idx) {
            lo = lo.min(t).min(r);
            hi = hi.max(t).max(r);
        }
    });
    let d = hi - lo;
    if d == 0.0 {
        // both images are the same constant over the region
        return Ok(1.0);
    }
    let c1 = (K1 * d).powi(2);
    let c2 = (K2 * d).powi(2);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - window {
        for x0 in 0..=w - window {
            if roi.is_some() && !(y0..y0 + window).all(|y| (x0..x0 + window).all(|x| inside((y, x)))) {
                continue;
            }
            let (mut st, mut sr) = (0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    st += test[[y, x]];
                    sr += reference[[y, x]];
                }
            }
            let (mt, mr) = (st / n, sr / n);
            let (mut vt, mut vr, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let (a, b) = (test[[y, x]] - mt, reference[[y, x]] - mr);
                    vt += a * a;
                    vr += b * b;
                    cov += a * b;
                }
            }
            let (vt, vr, cov) = (vt / n, vr / n, cov / n);
            total += ((2.0 * mt * mr + c1) * (2.0 * cov + c2)) / ((mt * mt + mr * mr + c1) * (vt + vr + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::RoiTooSmall { window });
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_images() {
        let a = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f64);
        assert_eq!(nrmse(a.view(), a.view(), None), Ok(0.0));
        assert_eq!(nmse(a.view(), a.view(), None), Ok(0.0));
        assert_eq!(psnr(a.view(), a.view(), None), Ok(f64::INFINITY));
        assert!((ssim(a.view(), a.view(), 5, None).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn doubled_test_has_unit_nrmse() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| 1.0 + (y + x) as f64);
        assert!((nrmse((&a * 2.0).view(), a.view(), None).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn psnr_formula() {
        let r = array![[1.0, 0.0], [0.0, 0.0]];
        let t = &r + 0.1;
        assert!((psnr(t.view(), r.view(), None).unwrap() - 20.0).abs() < 1e-12);
        let t = &r + 0.01;
        assert!((psnr(t.view(), r.view(), None).unwrap() - 40.0).abs() < 1e-12);
    }

    #[test]
    fn error_cases() {
        let z = Array2::<f64>::zeros((6, 6));
        let o = Array2::<f64>::ones((6, 6));
        assert_eq!(nrmse(o.view(), z.view(), None), Err(MetricError::ZeroReference));
        let roi = Array2::from_elem((6, 6), false);
        assert_eq!(nrmse(o.view(), o.view(), Some(roi.view())), Err(MetricError::EmptyRoi));
        assert!(matches!(nrmse(o.view(), Array2::ones((5, 6)).view(), None), Err(MetricError::DimensionMismatch { .. })));
        let mut thin = Array2::from_elem((6, 6), false);
        thin.row_mut(2).fill(true);
        assert_eq!(ssim(o.view(), o.view(), 5, Some(thin.view())), Ok(1.0));
        let t = &o + &thin.mapv(|b| if b { 0.5 } else { 0.0 });
        assert_eq!(ssim(t.view(), o.view(), 5, Some(thin.view())), Err(MetricError::RoiTooSmall { window: 5 }));
    }
}
