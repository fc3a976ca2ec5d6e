//! Cartesian undersampling masks.

use ndarray::{Array3, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EncodingError;

/// Binary k-space sampling pattern over `(ky, kx)`, optionally one per contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    /// `(n_masks, ky, kx)`; `n_masks` is 1 when the pattern is shared.
    grid: Array3<bool>,
    accel: usize,
    acs_lines: usize,
}

impl SamplingMask {
    pub fn from_grid(grid: Array3<bool>, accel: usize, acs_lines: usize) -> Self {
        assert!(grid.len_of(Axis(0)) >= 1, "mask needs at least one pattern");
        Self {
            grid,
            accel,
            acs_lines,
        }
    }

    pub fn full(ny: usize, nx: usize) -> Self {
        Self::from_grid(Array3::from_elem((1, ny, nx), true), 1, ny)
    }

    pub fn empty(ny: usize, nx: usize) -> Self {
        Self::from_grid(Array3::from_elem((1, ny, nx), false), 1, 0)
    }

    /// Every `accel`-th phase-encode line (aligned to the k-space center)
    /// plus `acs_lines` contiguous central lines. Shared across contrasts.
    pub fn uniform(ny: usize, nx: usize, accel: usize, acs_lines: usize) -> Self {
        assert!(accel >= 1, "acceleration must be >= 1");
        let center = ny / 2;
        let mut lines = vec![false; ny];
        for (ky, l) in lines.iter_mut().enumerate() {
            *l = (ky as isize - center as isize).rem_euclid(accel as isize) == 0;
        }
        mark_acs(&mut lines, acs_lines);
        Self::from_lines(&[lines], nx, accel, acs_lines)
    }

    /// Time-varying pseudorandom line selection: the ACS band plus, per
    /// contrast, a random subset of the remaining lines sized so that the
    /// overall sampled fraction is about `1/accel`.
    pub fn pseudo_random(
        ny: usize,
        nx: usize,
        accel: usize,
        acs_lines: usize,
        n_contrasts: usize,
        seed: u64,
    ) -> Self {
        assert!(accel >= 1 && n_contrasts >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = vec![false; ny];
        mark_acs(&mut base, acs_lines);
        let outer: Vec<usize> = (0..ny).filter(|&k| !base[k]).collect();
        let acs = ny - outer.len();
        let target = (ny / accel).saturating_sub(acs).min(outer.len());
        let patterns: Vec<Vec<bool>> = (0..n_contrasts)
            .map(|_| {
                let mut l = base.clone();
                for i in sample(&mut rng, outer.len(), target).into_iter() {
                    l[outer[i]] = true;
                }
                l
            })
            .collect();
        Self::from_lines(&patterns, nx, accel, acs_lines)
    }

    fn from_lines(patterns: &[Vec<bool>], nx: usize, accel: usize, acs_lines: usize) -> Self {
        let ny = patterns[0].len();
        let grid = Array3::from_shape_fn((patterns.len(), ny, nx), |(t, ky, _)| patterns[t][ky]);
        Self::from_grid(grid, accel, acs_lines)
    }

    /// Zero the leading phase-encode lines so only `fraction` of k-space
    /// along ky remains. No completion is performed.
    pub fn with_partial_fourier(mut self, fraction: f64) -> Self {
        assert!(fraction > 0.5 && fraction <= 1.0, "partial Fourier fraction in (0.5, 1]");
        let ny = self.ny();
        let drop = ((1.0 - fraction) * ny as f64).round() as usize;
        for mut m in self.grid.outer_iter_mut() {
            for ky in 0..drop {
                m.row_mut(ky).fill(false);
            }
        }
        self
    }

    pub fn ny(&self) -> usize {
        self.grid.len_of(Axis(1))
    }

    pub fn nx(&self) -> usize {
        self.grid.len_of(Axis(2))
    }

    pub fn n_masks(&self) -> usize {
        self.grid.len_of(Axis(0))
    }

    pub fn accel(&self) -> usize {
        self.accel
    }

    pub fn acs_lines(&self) -> usize {
        self.acs_lines
    }

    pub fn varies_across_contrasts(&self) -> bool {
        self.n_masks() > 1
    }

    pub fn grid(&self) -> &Array3<bool> {
        &self.grid
    }

    /// Pattern applied to contrast `t`.
    pub fn for_contrast(&self, t: usize) -> ArrayView2<'_, bool> {
        let idx = if self.n_masks() == 1 { 0 } else { t };
        self.grid.index_axis(Axis(0), idx)
    }

    pub fn check_contrasts(&self, n_contrasts: usize) -> Result<(), EncodingError> {
        if self.n_masks() != 1 && self.n_masks() != n_contrasts {
            return Err(EncodingError::DimensionMismatch(format!(
                "mask has {} patterns for {} contrasts",
                self.n_masks(),
                n_contrasts
            )));
        }
        Ok(())
    }

    /// Fraction of sampled points across all patterns.
    pub fn sampled_fraction(&self) -> f64 {
        self.grid.iter().filter(|&&b| b).count() as f64 / self.grid.len() as f64
    }

    /// Nominal central ACS line range.
    pub fn acs_range(&self) -> std::ops::Range<usize> {
        acs_range(self.ny(), self.acs_lines)
    }

    /// Widest contiguous band of fully sampled ky lines containing the
    /// k-space center, taken over the first pattern. `None` when the center
    /// line itself is not fully sampled.
    pub fn fully_sampled_center_band(&self) -> Option<std::ops::Range<usize>> {
        let m = self.for_contrast(0);
        let full = |ky: usize| m.row(ky).iter().all(|&b| b);
        let center = self.ny() / 2;
        if !full(center) {
            return None;
        }
        let mut lo = center;
        while lo > 0 && full(lo - 1) {
            lo -= 1;
        }
        let mut hi = center + 1;
        while hi < self.ny() && full(hi) {
            hi += 1;
        }
        Some(lo..hi)
    }
}

pub(crate) fn acs_range(ny: usize, acs_lines: usize) -> std::ops::Range<usize> {
    let n = acs_lines.min(ny);
    let start = (ny / 2).saturating_sub(n / 2);
    let start = start.min(ny - n);
    start..start + n
}

fn mark_acs(lines: &mut [bool], acs_lines: usize) {
    for ky in acs_range(lines.len(), acs_lines) {
        lines[ky] = true;
    }
}
