//! Voxelwise relaxometry.
//!
//! T1 uses the three-parameter inversion-recovery model
//! `S(TI) = A - B exp(-TI / T1*)` with the Look-Locker correction
//! `T1 = (B / A - 1) T1*`; T2 uses `S(Tprep) = A exp(-Tprep / T2)`.
//!
//! Each voxel is fitted by a separable search: for every candidate time
//! constant on a log grid the amplitudes follow from linear least squares,
//! and the best cell is refined by golden-section search. Magnitude
//! inversion-recovery data get their polarity restored by trying every
//! "negate the first k samples" pattern.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::ContrastStack;
use crate::par;

pub const T1_INVERSION_TIMES: [f64; 9] = [100.0, 180.0, 260.0, 900.0, 1000.0, 1050.0, 1700.0, 1800.0, 2500.0];
pub const T2_PREP_TIMES: [f64; 3] = [0.0, 35.0, 55.0];

pub const T1_BOUNDS: (f64, f64) = (0.0, 5000.0);
pub const T2_BOUNDS: (f64, f64) = (0.0, 250.0);

/// Bit flags stored per voxel.
pub mod flags {
    /// Series was identically zero.
    pub const ZERO_SIGNAL: u8 = 1;
    /// Estimate hit a parameter bound.
    pub const CLAMPED: u8 = 2;
    /// No valid fit was found; the value is a bounded fallback.
    pub const NONCONVERGENT: u8 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T2,
}

impl Modality {
    pub fn default_timing(self) -> Vec<f64> {
        match self {
            Modality::T1 => T1_INVERSION_TIMES.to_vec(),
            Modality::T2 => T2_PREP_TIMES.to_vec(),
        }
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            Modality::T1 => T1_BOUNDS,
            Modality::T2 => T2_BOUNDS,
        }
    }

    pub fn min_samples(self) -> usize {
        match self {
            Modality::T1 => 3,
            Modality::T2 => 2,
        }
    }

    /// Archive entry name of the fitted map.
    pub fn map_name(self) -> &'static str {
        match self {
            Modality::T1 => "t1map",
            Modality::T2 => "t2map",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
        }
    }

    pub(crate) fn seed_offset(self) -> u64 {
        match self {
            Modality::T1 => 1,
            Modality::T2 => 2,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Modality::T1),
            "t2" => Ok(Modality::T2),
            other => Err(format!("unknown modality `{other}` (expected t1 or t2)")),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("timing must be non-negative and strictly increasing: {0:?}")]
    InvalidTiming(Vec<f64>),
    #[error("{modality} fitting needs at least {needed} samples, got {got}")]
    TooFewSamples {
        modality: Modality,
        needed: usize,
        got: usize,
    },
    #[error("{contrasts} contrasts but {timing} timing values")]
    LengthMismatch { contrasts: usize, timing: usize },
}

/// Magnitude signals `(time, y, x)` with their timing in ms.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSeries {
    pub signals: Array3<f64>,
    pub timing: Vec<f64>,
    pub modality: Modality,
}

impl RelaxationSeries {
    pub fn new(signals: Array3<f64>, timing: Vec<f64>, modality: Modality) -> Result<Self, FitError> {
        let nt = signals.len_of(Axis(0));
        if nt != timing.len() {
            return Err(FitError::LengthMismatch {
                contrasts: nt,
                timing: timing.len(),
            });
        }
        if nt < modality.min_samples() {
            return Err(FitError::TooFewSamples {
                modality,
                needed: modality.min_samples(),
                got: nt,
            });
        }
        let ok = timing.iter().all(|t| t.is_finite() && *t >= 0.0)
            && timing.windows(2).all(|w| w[1] > w[0]);
        if !ok {
            return Err(FitError::InvalidTiming(timing));
        }
        Ok(Self {
            signals,
            timing,
            modality,
        })
    }

    /// Series of a single voxel.
    pub fn single(values: &[f64], timing: &[f64], modality: Modality) -> Result<Self, FitError> {
        let a = Array3::from_shape_vec((values.len(), 1, 1), values.to_vec())
            .expect("vector reshapes to (n, 1, 1)");
        Self::new(a, timing.to_vec(), modality)
    }
}

/// Fitted parameter maps for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMap {
    pub modality: Modality,
    /// T1 or T2 in ms.
    pub value: Array2<f64>,
    /// T1: fitted `A`. T2: `M0`, the fitted amplitude scaled to `[0, 1]`.
    pub amplitude: Array2<f64>,
    /// T1 only: fitted `B`.
    pub inversion: Option<Array2<f64>>,
    /// T1 only: apparent `T1*` in ms.
    pub t1_star: Option<Array2<f64>>,
    /// Root-mean-square fit error per voxel.
    pub residual: Array2<f64>,
    pub flags: Array2<u8>,
    pub bounds: (f64, f64),
    pub timing: Vec<f64>,
}

impl ParameterMap {
    /// Exact maps for a phantom (zero residual, no flags).
    pub fn from_truth(modality: Modality, value: Array2<f64>, m0: Array2<f64>, timing: Vec<f64>) -> Self {
        let dim = value.dim();
        let (inversion, t1_star) = match modality {
            Modality::T1 => (Some(m0.mapv(|a| 2.0 * a)), Some(value.clone())),
            Modality::T2 => (None, None),
        };
        Self {
            modality,
            value,
            amplitude: m0,
            inversion,
            t1_star,
            residual: Array2::zeros(dim),
            flags: Array2::zeros(dim),
            bounds: modality.bounds(),
            timing,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub value: f64,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub residual: f64,
    pub flags: u8,
}

impl VoxelFit {
    fn zero() -> Self {
        Self {
            value: 0.0,
            a: 0.0,
            b: 0.0,
            tau: 0.0,
            residual: 0.0,
            flags: flags::ZERO_SIGNAL,
        }
    }
}

const T1_STAR_RANGE: (f64, f64) = (5.0, 10_000.0);
const T1_GRID: usize = 240;
const T2_MIN: f64 = 0.5;
const T2_GRID: usize = 200;
const GOLDEN_ITERS: usize = 80;

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Minimize `f` on `[lo, hi]` (in log space) by golden-section search.
fn golden(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let (mut fc, mut fd) = (f(c.exp()), f(d.exp()));
    for _ in 0..GOLDEN_ITERS {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = f(d.exp());
        }
        if (b - a).abs() < 1e-14 {
            break;
        }
    }
    let x = (0.5 * (a + b)).exp();
    (x, f(x))
}

/// Least-squares `(A, B, rss)` for `s = A - B e` with fixed decay `e`.
fn ir_amplitudes(s: &[f64], e: &[f64]) -> Option<(f64, f64, f64)> {
    let n = s.len() as f64;
    let (mut se, mut ee, mut ss, mut ssum) = (0.0, 0.0, 0.0, 0.0);
    let mut esum = 0.0;
    for (&si, &ei) in s.iter().zip(e) {
        se += si * ei;
        ee += ei * ei;
        ss += si;
        ssum += si * si;
        esum += ei;
    }
    let _ = ssum;
    // normal equations for (A, C) with C = -B: [n esum; esum ee] [A; C] = [ss; se]
    let det = n * ee - esum * esum;
    if det.abs() <= 1e-12 * (n * ee).max(1e-300) {
        return None;
    }
    let a = (ss * ee - esum * se) / det;
    let c = (n * se - esum * ss) / det;
    let b = -c;
    let rss: f64 = s
        .iter()
        .zip(e)
        .map(|(&si, &ei)| (si - a + b * ei).powi(2))
        .sum();
    Some((a, b, rss))
}

fn decay(timing: &[f64], tau: f64) -> Vec<f64> {
    timing.iter().map(|&t| (-t / tau).exp()).collect()
}

/// Fit one magnitude inversion-recovery series.
pub fn fit_t1_voxel(signal: &[f64], timing: &[f64]) -> VoxelFit {
    let grid = log_grid(T1_STAR_RANGE.0, T1_STAR_RANGE.1, T1_GRID);
    let table: Vec<Vec<f64>> = grid.iter().map(|&tau| decay(timing, tau)).collect();
    fit_t1_with_table(signal, timing, &grid, &table)
}

fn fit_t1_with_table(signal: &[f64], timing: &[f64], grid: &[f64], table: &[Vec<f64>]) -> VoxelFit {
    if signal.iter().all(|&v| v == 0.0) {
        return VoxelFit::zero();
    }
    let n = signal.len();
    let mut signed = signal.to_vec();
    let mut best: Option<(f64, f64, f64, f64)> = None; // rss, a, b, tau
    for k in 0..=n {
        if k > 0 {
            signed[k - 1] = -signal[k - 1].abs();
        }
        let mut cell: Option<(usize, f64)> = None;
        for (g, e) in table.iter().enumerate() {
            if let Some((_, _, rss)) = ir_amplitudes(&signed, e) {
                if cell.is_none_or(|(_, r)| rss < r) {
                    cell = Some((g, rss));
                }
            }
        }
        let Some((g, _)) = cell else { continue };
        let lo = grid[g.saturating_sub(1)];
        let hi = grid[(g + 1).min(grid.len() - 1)];
        let eval = |tau: f64| {
            ir_amplitudes(&signed, &decay(timing, tau)).map_or(f64::INFINITY, |r| r.2)
        };
        let (tau, rss) = golden(lo, hi, eval);
        if let Some((a, b, rss)) = ir_amplitudes(&signed, &decay(timing, tau)).filter(|_| rss.is_finite()) {
            if best.is_none_or(|(r, ..)| rss < r) {
                best = Some((rss, a, b, tau));
            }
        }
    }
    let (lo, hi) = T1_BOUNDS;
    let Some((rss, a, b, tau)) = best else {
        return VoxelFit {
            value: 0.0,
            a: 0.0,
            b: 0.0,
            tau: 0.0,
            residual: rms(signal),
            flags: flags::NONCONVERGENT,
        };
    };
    let residual = (rss / n as f64).sqrt();
    if a <= 0.0 || !a.is_finite() || !b.is_finite() {
        return VoxelFit {
            value: 0.0,
            a,
            b,
            tau,
            residual,
            flags: flags::NONCONVERGENT,
        };
    }
    let t1 = (b / a - 1.0) * tau;
    let mut fl = 0;
    let value = if !t1.is_finite() {
        fl |= flags::NONCONVERGENT;
        0.0
    } else if t1 < lo || t1 > hi {
        fl |= flags::CLAMPED;
        t1.clamp(lo, hi)
    } else {
        t1
    };
    VoxelFit {
        value,
        a,
        b,
        tau,
        residual,
        flags: fl,
    }
}

fn rms(s: &[f64]) -> f64 {
    (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
}

/// `(A, rss)` for `s = A e`.
fn t2_amplitude(s: &[f64], e: &[f64]) -> (f64, f64) {
    let se: f64 = s.iter().zip(e).map(|(a, b)| a * b).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let a = se / ee;
    let rss = s.iter().zip(e).map(|(&si, &ei)| (si - a * ei).powi(2)).sum();
    (a, rss)
}

/// Fit one mono-exponential decay series.
pub fn fit_t2_voxel(signal: &[f64], timing: &[f64]) -> VoxelFit {
    let grid = log_grid(T2_MIN, T2_BOUNDS.1, T2_GRID);
    let table: Vec<Vec<f64>> = grid.iter().map(|&tau| decay(timing, tau)).collect();
    fit_t2_with_table(signal, timing, &grid, &table)
}

fn fit_t2_with_table(signal: &[f64], timing: &[f64], grid: &[f64], table: &[Vec<f64>]) -> VoxelFit {
    if signal.iter().all(|&v| v == 0.0) {
        return VoxelFit::zero();
    }
    let n = signal.len();
    let (g, _) = table
        .iter()
        .enumerate()
        .map(|(g, e)| (g, t2_amplitude(signal, e).1))
        .fold((0, f64::INFINITY), |acc, (g, r)| if r < acc.1 { (g, r) } else { acc });
    let lo = grid[g.saturating_sub(1)];
    let hi = grid[(g + 1).min(grid.len() - 1)];
    let (mut tau, _) = golden(lo, hi, |tau| t2_amplitude(signal, &decay(timing, tau)).1);
    let mut fl = 0;
    let (lo_b, hi_b) = (T2_MIN, T2_BOUNDS.1);
    // an optimum at the grid edge means the true minimizer lies beyond the bound
    if g + 1 == grid.len() && hi_b - tau < 1e-6 * hi_b {
        tau = hi_b;
        fl |= flags::CLAMPED;
    } else if g == 0 && tau - lo_b < 1e-6 * lo_b {
        fl |= flags::CLAMPED;
    }
    let (a, rss) = t2_amplitude(signal, &decay(timing, tau));
    VoxelFit {
        value: tau.clamp(T2_BOUNDS.0, T2_BOUNDS.1),
        a,
        b: 0.0,
        tau,
        residual: (rss / n as f64).sqrt(),
        flags: fl,
    }
}

fn fit_series(series: &RelaxationSeries) -> ParameterMap {
    let (_, ny, nx) = series.signals.dim();
    let timing = &series.timing;
    let (grid, fit): (Vec<f64>, fn(&[f64], &[f64], &[f64], &[Vec<f64>]) -> VoxelFit) =
        match series.modality {
            Modality::T1 => (log_grid(T1_STAR_RANGE.0, T1_STAR_RANGE.1, T1_GRID), fit_t1_with_table),
            Modality::T2 => (log_grid(T2_MIN, T2_BOUNDS.1, T2_GRID), fit_t2_with_table),
        };
    let table: Vec<Vec<f64>> = grid.iter().map(|&tau| decay(timing, tau)).collect();
    let fits = par::map_indices(ny * nx, |i| {
        let (y, x) = (i / nx, i % nx);
        let s: Vec<f64> = series.signals.slice(ndarray::s![.., y, x]).to_vec();
        fit(&s, timing, &grid, &table)
    });
    let grab = |f: fn(&VoxelFit) -> f64| {
        Array2::from_shape_vec((ny, nx), fits.iter().map(f).collect()).expect("voxel count")
    };
    let value = grab(|v| v.value);
    let mut amplitude = grab(|v| v.a);
    let residual = grab(|v| v.residual);
    let flags_map = Array2::from_shape_vec((ny, nx), fits.iter().map(|v| v.flags).collect())
        .expect("voxel count");
    let (inversion, t1_star) = match series.modality {
        Modality::T1 => (Some(grab(|v| v.b)), Some(grab(|v| v.tau))),
        Modality::T2 => {
            let peak = amplitude.iter().copied().fold(0.0, f64::max);
            if peak > 0.0 {
                amplitude.mapv_inplace(|a| (a / peak).clamp(0.0, 1.0));
            }
            (None, None)
        }
    };
    ParameterMap {
        modality: series.modality,
        value,
        amplitude,
        inversion,
        t1_star,
        residual,
        flags: flags_map,
        bounds: series.modality.bounds(),
        timing: series.timing.clone(),
    }
}

pub fn fit_t1(series: &RelaxationSeries) -> Result<ParameterMap, FitError> {
    let series = RelaxationSeries::new(series.signals.clone(), series.timing.clone(), Modality::T1)?;
    Ok(fit_series(&series))
}

pub fn fit_t2(series: &RelaxationSeries) -> Result<ParameterMap, FitError> {
    let series = RelaxationSeries::new(series.signals.clone(), series.timing.clone(), Modality::T2)?;
    Ok(fit_series(&series))
}

/// Fit the magnitude of a reconstructed stack voxel by voxel.
pub fn fit_map(stack: &ContrastStack, timing: &[f64], modality: Modality) -> Result<ParameterMap, FitError> {
    let series = RelaxationSeries::new(stack.mapv(|v| v.norm()), timing.to_vec(), modality)?;
    Ok(fit_series(&series))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ir(a: f64, b: f64, tau: f64) -> Vec<f64> {
        T1_INVERSION_TIMES
            .iter()
            .map(|&ti| (a - b * (-ti / tau).exp()).abs())
            .collect()
    }

    #[test]
    fn t1_perfect_inversion() {
        let f = fit_t1_voxel(&ir(1.0, 2.0, 1000.0), &T1_INVERSION_TIMES);
        assert!((f.value - 1000.0).abs() < 1.0, "{f:?}");
        assert!(f.residual < 1e-6);
        assert_eq!(f.flags, 0);
    }

    #[test]
    fn t1_look_locker_correction() {
        let f = fit_t1_voxel(&ir(1.0, 1.8, 800.0), &T1_INVERSION_TIMES);
        assert!((f.value - 640.0).abs() < 1.0, "{f:?}");
    }

    #[test]
    fn t1_scale_invariant() {
        let base = fit_t1_voxel(&ir(0.7, 1.3, 900.0), &T1_INVERSION_TIMES).value;
        for alpha in [0.5, 2.0, 10.0] {
            let s: Vec<f64> = ir(0.7, 1.3, 900.0).iter().map(|v| v * alpha).collect();
            let v = fit_t1_voxel(&s, &T1_INVERSION_TIMES).value;
            assert!((v - base).abs() < 1.0);
        }
    }

    #[test]
    fn t2_exact_inverse() {
        let s: Vec<f64> = T2_PREP_TIMES.iter().map(|&t| (-t / 50.0).exp()).collect();
        let f = fit_t2_voxel(&s, &T2_PREP_TIMES);
        assert!((f.value - 50.0).abs() < 0.1, "{f:?}");
        assert!(f.residual < 1e-6);
        assert_eq!(f.flags, 0);
    }

    #[test]
    fn t2_constant_series_clamps() {
        let f = fit_t2_voxel(&[0.4, 0.4, 0.4], &T2_PREP_TIMES);
        assert_eq!(f.value, 250.0);
        assert!(f.flags & flags::CLAMPED != 0);
    }

    #[test]
    fn t2_increasing_series_clamps() {
        let f = fit_t2_voxel(&[0.3, 0.4, 0.5], &T2_PREP_TIMES);
        assert_eq!(f.value, 250.0);
        assert!(f.flags & flags::CLAMPED != 0);
    }

    #[test]
    fn zero_voxels_flagged() {
        let f = fit_t1_voxel(&[0.0; 9], &T1_INVERSION_TIMES);
        assert_eq!((f.value, f.residual, f.flags), (0.0, 0.0, flags::ZERO_SIGNAL));
        let f = fit_t2_voxel(&[0.0; 3], &T2_PREP_TIMES);
        assert_eq!(f.flags, flags::ZERO_SIGNAL);
    }

    #[test]
    fn series_validation() {
        let s = Array3::zeros((3, 2, 2));
        assert!(matches!(
            RelaxationSeries::new(s.clone(), vec![0.0, 35.0], Modality::T2),
            Err(FitError::LengthMismatch { .. })
        ));
        assert!(matches!(
            RelaxationSeries::new(s.clone(), vec![0.0, 55.0, 35.0], Modality::T2),
            Err(FitError::InvalidTiming(_))
        ));
        assert!(matches!(
            RelaxationSeries::new(Array3::zeros((2, 1, 1)), vec![1.0, 2.0], Modality::T1),
            Err(FitError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn uniform_stack_gives_constant_map() {
        let s: Vec<f64> = T2_PREP_TIMES.iter().map(|&t| 0.8 * (-t / 60.0).exp()).collect();
        let stack = ContrastStack::from_shape_fn((3, 4, 5), |(t, _, _)| crate::c64::new(s[t], 0.0));
        let m = fit_map(&stack, &T2_PREP_TIMES, Modality::T2).unwrap();
        let v0 = m.value[[0, 0]];
        assert!(m.value.iter().all(|&v| v == v0));
        assert!(m.amplitude.iter().all(|&a| (a - 1.0).abs() < 1e-12));
    }
}
