//! Synthetic cardiac phantom with known relaxation parameters, coil
//! sensitivities and undersampled multi-coil k-space.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::{
    sense_forward, ContrastStack, EncodingError, MultiCoilKSpace, SamplingMask, SensitivityMaps,
};
use crate::fitting::{Modality, ParameterMap};
use crate::c64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    Background,
    Fat,
    SkeletalMuscle,
    Myocardium,
    Blood,
}

impl Tissue {
    pub fn label(self) -> u8 {
        match self {
            Tissue::Background => 0,
            Tissue::Fat => 1,
            Tissue::SkeletalMuscle => 2,
            Tissue::Myocardium => 3,
            Tissue::Blood => 4,
        }
    }

    /// Region of interest used for map metrics: myocardium and blood pools.
    pub fn in_roi(self) -> bool {
        matches!(self, Tissue::Myocardium | Tissue::Blood)
    }
}

/// Rotated ellipse in normalized field-of-view coordinates (`[-1, 1]` on
/// both axes, y pointing down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compartment {
    pub tissue: Tissue,
    pub shape: Ellipse,
    /// ms
    pub t1: f64,
    /// ms
    pub t2: f64,
    pub proton_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub ny: usize,
    pub nx: usize,
    /// Painted in order; later compartments overwrite earlier ones.
    pub compartments: Vec<Compartment>,
    pub coils: usize,
    /// Complex k-space noise standard deviation relative to the peak
    /// magnitude of the ground-truth images.
    pub noise_std: f64,
    pub seed: u64,
}

fn comp(tissue: Tissue, shape: Ellipse, t1: f64, t2: f64, pd: f64) -> Compartment {
    Compartment {
        tissue,
        shape,
        t1,
        t2,
        proton_density: pd,
    }
}

fn ell(cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> Ellipse {
    Ellipse {
        cy,
        cx,
        ry,
        rx,
        angle,
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        use Tissue::*;
        Self {
            ny: 192,
            nx: 192,
            compartments: vec![
                comp(Fat, ell(0.0, 0.0, 0.78, 0.90, 0.0), 400.0, 70.0, 0.9),
                comp(SkeletalMuscle, ell(0.0, 0.0, 0.70, 0.82, 0.0), 1400.0, 35.0, 0.6),
                comp(Blood, ell(-0.02, -0.26, 0.26, 0.20, 0.3), 1900.0, 180.0, 1.0),
                comp(Myocardium, ell(-0.04, 0.08, 0.32, 0.30, -0.2), 1200.0, 45.0, 0.75),
                comp(Blood, ell(-0.04, 0.08, 0.19, 0.17, -0.2), 1900.0, 180.0, 1.0),
            ],
            coils: 8,
            noise_std: 0.002,
            seed: 1,
        }
    }
}

impl PhantomSpec {
    /// Jittered copy of the default anatomy for subject `index`, used to
    /// build training corpora. Index 0 returns `self` unchanged.
    pub fn subject(&self, index: u64) -> Self {
        if index == 0 {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut out = self.clone();
        let dy = rng.random_range(-0.06..0.06);
        let dx = rng.random_range(-0.06..0.06);
        let scale = rng.random_range(0.9..1.1);
        for c in out.compartments.iter_mut() {
            if matches!(c.tissue, Tissue::Myocardium | Tissue::Blood) {
                c.shape.cy += dy;
                c.shape.cx += dx;
                c.shape.ry *= scale;
                c.shape.rx *= scale;
            }
            c.t1 *= rng.random_range(0.95..1.05);
            c.t2 *= rng.random_range(0.95..1.05);
        }
        out.seed = self.seed.wrapping_add(index);
        out
    }

    fn coords(&self, y: usize, x: usize) -> (f64, f64) {
        (
            2.0 * (y as f64 + 0.5) / self.ny as f64 - 1.0,
            2.0 * (x as f64 + 0.5) / self.nx as f64 - 1.0,
        )
    }

    /// Index of the compartment covering each pixel (`None` for background).
    pub fn compartment_map(&self) -> Array2<Option<usize>> {
        Array2::from_shape_fn((self.ny, self.nx), |(y, x)| {
            let (u, v) = self.coords(y, x);
            self.compartments
                .iter()
                .rposition(|c| c.shape.contains(u, v))
        })
    }

    pub fn labels(&self) -> Array2<u8> {
        self.compartment_map()
            .mapv(|c| c.map_or(Tissue::Background.label(), |i| self.compartments[i].tissue.label()))
    }

    pub fn support(&self) -> Array2<bool> {
        self.compartment_map().mapv(|c| c.is_some())
    }

    pub fn roi(&self) -> Array2<bool> {
        self.compartment_map()
            .mapv(|c| c.is_some_and(|i| self.compartments[i].tissue.in_roi()))
    }
}

/// Signal of one voxel at each timing value.
pub fn signal(modality: Modality, pd: f64, t1: f64, t2: f64, timing: &[f64]) -> Vec<f64> {
    match modality {
        // perfect inversion: B = 2A, so the apparent T1* equals T1
        Modality::T1 => timing
            .iter()
            .map(|&ti| (pd - 2.0 * pd * (-ti / t1).exp()).abs())
            .collect(),
        Modality::T2 => timing.iter().map(|&tp| pd * (-tp / t2).exp()).collect(),
    }
}

/// Ground-truth images and parameter maps for one modality.
pub fn generate_truth(spec: &PhantomSpec, modality: Modality) -> (ContrastStack, ParameterMap) {
    let timing = modality.default_timing();
    let cmap = spec.compartment_map();
    let nt = timing.len();
    let mut stack = ContrastStack::zeros((nt, spec.ny, spec.nx));
    let mut value = Array2::zeros((spec.ny, spec.nx));
    let mut m0 = Array2::zeros((spec.ny, spec.nx));
    for ((y, x), c) in cmap.indexed_iter() {
        let Some(i) = *c else { continue };
        let cp = &spec.compartments[i];
        let s = signal(modality, cp.proton_density, cp.t1, cp.t2, &timing);
        for (t, v) in s.into_iter().enumerate() {
            stack[[t, y, x]] = c64::new(v, 0.0);
        }
        value[[y, x]] = match modality {
            Modality::T1 => cp.t1,
            Modality::T2 => cp.t2,
        };
        m0[[y, x]] = cp.proton_density;
    }
    let map = ParameterMap::from_truth(modality, value, m0, timing);
    (stack, map)
}

/// Ring radius and lobe width of the simulated receive coils, in normalized
/// field-of-view units.
pub const COIL_RING_RADIUS: f64 = 1.1;
pub const COIL_LOBE_WIDTH: f64 = 0.7;
/// Linear phase slope across the field of view, radians per unit length.
pub const COIL_PHASE_SLOPE: f64 = 0.8;

/// Unnormalized complex profile of coil `q` at normalized position (u, v).
pub fn coil_profile(q: usize, coils: usize, u: f64, v: f64) -> c64 {
    if coils == 1 {
        return c64::new(1.0, 0.0);
    }
    let theta = 2.0 * std::f64::consts::PI * q as f64 / coils as f64;
    let (s, c) = theta.sin_cos();
    let (cy, cx) = (COIL_RING_RADIUS * s, COIL_RING_RADIUS * c);
    let d2 = (u - cy).powi(2) + (v - cx).powi(2);
    let amp = (-d2 / (2.0 * COIL_LOBE_WIDTH * COIL_LOBE_WIDTH)).exp();
    let phase = theta + COIL_PHASE_SLOPE * (u * c - v * s);
    c64::from_polar(amp, phase)
}

/// Smooth Gaussian-lobe coils on a ring, normalized to unit sum of squares
/// on the phantom support and zero elsewhere.
pub fn simulate_coils(spec: &PhantomSpec) -> SensitivityMaps {
    assert!(spec.coils >= 1, "need at least one coil");
    let support = spec.support();
    let mut maps = Array3::<c64>::zeros((spec.coils, spec.ny, spec.nx));
    for ((y, x), &inside) in support.indexed_iter() {
        if !inside {
            continue;
        }
        let (u, v) = spec.coords(y, x);
        let raw: Vec<c64> = (0..spec.coils).map(|q| coil_profile(q, spec.coils, u, v)).collect();
        let rss = raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for (q, z) in raw.into_iter().enumerate() {
            maps[[q, y, x]] = z / rss;
        }
    }
    SensitivityMaps { maps, support }
}

/// `sense_forward(truth)` plus complex white Gaussian noise
/// (`E|n|^2 = noise_std^2`), then masked.
pub fn acquire(
    truth: &ContrastStack,
    maps: &SensitivityMaps,
    mask: &SamplingMask,
    noise_std: f64,
    seed: u64,
) -> Result<MultiCoilKSpace, EncodingError> {
    let (_, ny, nx) = truth.dim();
    let full = SamplingMask::full(ny, nx);
    let mut k = sense_forward(truth, maps, &full)?;
    if noise_std > 0.0 {
        add_noise(&mut k.data, noise_std, seed);
    }
    apply_mask(&mut k.data, mask)?;
    k.mask = mask.clone();
    Ok(k)
}

fn add_noise(data: &mut Array4<c64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = std / std::f64::consts::SQRT_2;
    for v in data.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v += c64::new(re * s, im * s);
    }
}

pub(crate) fn apply_mask(data: &mut Array4<c64>, mask: &SamplingMask) -> Result<(), EncodingError> {
    let (nt, _, ny, nx) = data.dim();
    mask.check_contrasts(nt)?;
    if (mask.ny(), mask.nx()) != (ny, nx) {
        return Err(EncodingError::DimensionMismatch(format!(
            "mask {:?} vs k-space {:?}",
            (mask.ny(), mask.nx()),
            (ny, nx)
        )));
    }
    for (t, mut contrast) in data.axis_iter_mut(Axis(0)).enumerate() {
        let m = mask.for_contrast(t);
        for mut coil in contrast.outer_iter_mut() {
            ndarray::Zip::from(&mut coil).and(&m).for_each(|v, &keep| {
                if !keep {
                    *v = c64::new(0.0, 0.0);
                }
            });
        }
    }
    Ok(())
}

/// Everything generated for one subject and modality.
#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub modality: Modality,
    pub truth: ContrastStack,
    pub params: ParameterMap,
    pub maps: SensitivityMaps,
    pub labels: Array2<u8>,
    pub roi: Array2<bool>,
    pub full: MultiCoilKSpace,
    /// `(R, k-space)` per requested acceleration.
    pub undersampled: Vec<(usize, MultiCoilKSpace)>,
}

/// Sampling options for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionOptions {
    pub accelerations: Vec<usize>,
    pub acs_lines: usize,
    pub time_varying: bool,
    /// Fraction of ky retained (1.0 = no partial Fourier).
    pub partial_fourier: f64,
}

impl Default for AcquisitionOptions {
    fn default() -> Self {
        Self {
            accelerations: vec![4, 8, 10],
            acs_lines: 24,
            time_varying: false,
            partial_fourier: 1.0,
        }
    }
}

impl AcquisitionOptions {
    pub fn mask(&self, ny: usize, nx: usize, accel: usize, n_contrasts: usize, seed: u64) -> SamplingMask {
        let m = if self.time_varying {
            SamplingMask::pseudo_random(ny, nx, accel, self.acs_lines, n_contrasts, seed)
        } else {
            SamplingMask::uniform(ny, nx, accel, self.acs_lines)
        };
        if self.partial_fourier < 1.0 {
            m.with_partial_fourier(self.partial_fourier)
        } else {
            m
        }
    }
}

/// Absolute k-space noise level for a spec and truth stack.
pub fn absolute_noise(spec: &PhantomSpec, truth: &ContrastStack) -> f64 {
    let peak = truth.iter().map(|v| v.norm()).fold(0.0, f64::max);
    spec.noise_std * peak
}

pub fn generate_dataset(
    spec: &PhantomSpec,
    modality: Modality,
    opts: &AcquisitionOptions,
) -> Result<PhantomDataset, EncodingError> {
    let (truth, params) = generate_truth(spec, modality);
    let maps = simulate_coils(spec);
    let noise = absolute_noise(spec, &truth);
    let nt = truth.len_of(Axis(0));
    // one noise realization shared by every sampling pattern
    let noise_seed = spec.seed.wrapping_mul(31).wrapping_add(modality.seed_offset());
    let full = acquire(&truth, &maps, &SamplingMask::full(spec.ny, spec.nx), noise, noise_seed)?;
    let mut undersampled = Vec::new();
    for &r in &opts.accelerations {
        let mask = opts.mask(spec.ny, spec.nx, r, nt, spec.seed.wrapping_add(r as u64));
        let mut data = full.data.clone();
        apply_mask(&mut data, &mask)?;
        undersampled.push((r, MultiCoilKSpace { data, mask }));
    }
    Ok(PhantomDataset {
        modality,
        truth,
        params,
        labels: spec.labels(),
        roi: spec.roi(),
        maps,
        full,
        undersampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t2_signal_values() {
        let s = signal(Modality::T2, 1.0, 1000.0, 50.0, &[0.0, 35.0, 55.0]);
        let expect = [1.0, (-0.7f64).exp(), (-1.1f64).exp()];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_density_is_silent() {
        for m in [Modality::T1, Modality::T2] {
            let s = signal(m, 0.0, 1200.0, 45.0, &m.default_timing());
            assert!(s.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn t1_tail_approaches_density() {
        let s = signal(Modality::T1, 0.8, 300.0, 45.0, &[2500.0]);
        assert!((s[0] - 0.8).abs() <= 0.01 * 0.8);
    }

    #[test]
    fn default_spec_geometry() {
        let spec = PhantomSpec::default();
        let roi = spec.roi();
        let labels = spec.labels();
        assert!(roi.iter().filter(|&&b| b).count() > 1000);
        for tissue in [Tissue::Fat, Tissue::SkeletalMuscle, Tissue::Myocardium, Tissue::Blood] {
            assert!(labels.iter().any(|&l| l == tissue.label()), "{tissue:?} missing");
        }
        // the 128x128 network crop contains the whole heart
        for ((y, x), &inside) in roi.indexed_iter() {
            if inside {
                assert!((32..160).contains(&y) && (32..160).contains(&x));
            }
        }
    }

    #[test]
    fn single_coil_is_unity_on_support() {
        let spec = PhantomSpec {
            ny: 32,
            nx: 32,
            coils: 1,
            ..Default::default()
        };
        let maps = simulate_coils(&spec);
        for ((_, y, x), v) in maps.maps.indexed_iter() {
            if maps.support[[y, x]] {
                assert_eq!(*v, c64::new(1.0, 0.0));
            } else {
                assert_eq!(*v, c64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn coils_are_normalized() {
        let spec = PhantomSpec {
            ny: 64,
            nx: 64,
            ..Default::default()
        };
        let maps = simulate_coils(&spec);
        let sos = maps.sum_of_squares();
        for ((y, x), &s) in sos.indexed_iter() {
            if maps.support[[y, x]] {
                assert!((s - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(s, 0.0);
            }
        }
    }

    #[test]
    fn noiseless_full_acquisition_is_forward_model() {
        let spec = PhantomSpec {
            ny: 32,
            nx: 32,
            coils: 4,
            ..Default::default()
        };
        let (truth, _) = generate_truth(&spec, Modality::T2);
        let maps = simulate_coils(&spec);
        let mask = SamplingMask::full(32, 32);
        let a = acquire(&truth, &maps, &mask, 0.0, 1).unwrap();
        let b = sense_forward(&truth, &maps, &mask).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn acquisition_is_deterministic() {
        let spec = PhantomSpec {
            ny: 32,
            nx: 32,
            coils: 2,
            ..Default::default()
        };
        let (truth, _) = generate_truth(&spec, Modality::T1);
        let maps = simulate_coils(&spec);
        let mask = SamplingMask::uniform(32, 32, 4, 8);
        let a = acquire(&truth, &maps, &mask, 0.01, 9).unwrap();
        let b = acquire(&truth, &maps, &mask, 0.01, 9).unwrap();
        assert_eq!(a, b);
        let c = acquire(&truth, &maps, &mask, 0.01, 10).unwrap();
        assert_ne!(a, c);
    }
}
