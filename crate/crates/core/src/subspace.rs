//! Partially separable model `X = sum_l a_l C_l (x) T_l`: Casorati SVD,
//! rank truncation, network input preparation and recombination.

use nalgebra::DMatrix;
use ndarray::{s, Array2, Array3, Axis};
use thiserror::Error;

use crate::c64;
use crate::encoding::ContrastStack;
use crate::tensor_io::{Tensor, TensorArchive, TensorIoError};

/// Spatial size the refinement network operates on.
pub const PREPARED_SIZE: usize = 128;

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    /// Spatial vectors `(L, y, x)`, unit norm.
    pub c: Array3<c64>,
    /// Temporal vectors `(L, t)`, orthonormal rows.
    pub t: Array2<c64>,
    /// Singular values, descending.
    pub a: Vec<f64>,
}

impl SubspaceBasis {
    pub fn rank(&self) -> usize {
        self.a.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.c.len_of(Axis(1)), self.c.len_of(Axis(2)))
    }

    pub fn n_contrasts(&self) -> usize {
        self.t.len_of(Axis(1))
    }

    pub fn to_archive(&self) -> TensorArchive {
        let entries = vec![
            Tensor::from_complex("C", self.c.view()),
            Tensor::from_complex("T", self.t.view()),
            Tensor::from_vec("a", &self.a),
        ];
        TensorArchive::from_entries(entries).expect("distinct names")
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self, SubspaceError> {
        let c = ar.require("C")?.expect_rank(3)?.to_complex()?;
        let t = ar.require("T")?.expect_rank(2)?.to_complex()?;
        let a = ar.require("a")?.expect_rank(1)?.to_real()?;
        let c = c.into_dimensionality().expect("rank checked");
        let t: Array2<c64> = t.into_dimensionality().expect("rank checked");
        let a: Vec<f64> = a.iter().copied().collect();
        if c.len_of(Axis(0)) != a.len() || t.len_of(Axis(0)) != a.len() {
            return Err(SubspaceError::DimensionMismatch(format!(
                "C {:?}, T {:?}, a {}",
                c.dim(),
                t.dim(),
                a.len()
            )));
        }
        Ok(Self { c, t, a })
    }
}

/// Rank-`rank` SVD of the `(pixels x contrasts)` Casorati matrix of `x`.
///
/// Each `(C_l, T_l)` pair is rotated so the largest-magnitude entry of
/// `T_l` is real and positive.
pub fn decompose(x: &ContrastStack, rank: usize) -> Result<SubspaceBasis, SubspaceError> {
    let (nt, ny, nx) = x.dim();
    let npix = ny * nx;
    let max = nt.min(npix);
    if rank == 0 || rank > max {
        return Err(SubspaceError::RankOutOfRange { rank, max });
    }
    let cas = DMatrix::from_fn(npix, nt, |p, t| x[[t, p / nx, p % nx]]);
    let svd = cas.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^H");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut c = Array3::zeros((rank, ny, nx));
    let mut t = Array2::zeros((rank, nt));
    let mut a = Vec::with_capacity(rank);
    for (l, &k) in order.iter().take(rank).enumerate() {
        a.push(svd.singular_values[k]);
        let row: Vec<c64> = (0..nt).map(|j| vt[(k, j)]).collect();
        let peak = row
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (j, z)| if z.norm() > acc.1 { (j, z.norm()) } else { acc });
        let p = row[peak.0];
        let rot = if p.norm() > 0.0 { p.conj() / p.norm() } else { c64::new(1.0, 0.0) };
        for (j, z) in row.iter().enumerate() {
            t[[l, j]] = z * rot;
        }
        t[[l, peak.0]] = c64::new(t[[l, peak.0]].norm(), 0.0);
        let back = rot.conj();
        for p in 0..npix {
            c[[l, p / nx, p % nx]] = u[(p, k)] * back;
        }
    }
    Ok(SubspaceBasis { c, t, a })
}

/// Keep the leading `rank` triples.
pub fn truncate(b: &SubspaceBasis, rank: usize) -> Result<SubspaceBasis, SubspaceError> {
    if rank == 0 || rank > b.rank() {
        return Err(SubspaceError::RankOutOfRange { rank, max: b.rank() });
    }
    if rank == b.rank() {
        return Ok(b.clone());
    }
    Ok(SubspaceBasis {
        c: b.c.slice(s![..rank, .., ..]).to_owned(),
        t: b.t.slice(s![..rank, ..]).to_owned(),
        a: b.a[..rank].to_vec(),
    })
}

/// Where the network window sits relative to the full image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    /// Full image extent.
    pub full: (usize, usize),
    /// Network input extent.
    pub size: (usize, usize),
    /// Top-left of the copied region in the full image.
    pub src: (usize, usize),
    /// Top-left of the copied region in the network input.
    pub dst: (usize, usize),
    /// Extent of the copied region.
    pub extent: (usize, usize),
}

impl CropWindow {
    /// Centered crop, or centered zero padding along axes smaller than `size`.
    pub fn centered(full: (usize, usize), size: (usize, usize)) -> Self {
        let axis = |n: usize, m: usize| {
            if n >= m {
                ((n - m) / 2, 0, m)
            } else {
                (0, (m - n) / 2, n)
            }
        };
        let (sy, dy, ey) = axis(full.0, size.0);
        let (sx, dx, ex) = axis(full.1, size.1);
        Self {
            full,
            size,
            src: (sy, sx),
            dst: (dy, dx),
            extent: (ey, ex),
        }
    }

    fn to_vec(self) -> Vec<f64> {
        [
            self.full.0, self.full.1, self.size.0, self.size.1, self.src.0, self.src.1, self.dst.0,
            self.dst.1, self.extent.0, self.extent.1,
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    fn from_slice(v: &[f64]) -> Option<Self> {
        if v.len() != 10 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return None;
        }
        let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        Some(Self {
            full: (u[0], u[1]),
            size: (u[2], u[3]),
            src: (u[4], u[5]),
            dst: (u[6], u[7]),
            extent: (u[8], u[9]),
        })
    }
}

/// Real network input `(2L, 128, 128)` plus what is needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBasis {
    /// Channels `[Re C_1, Im C_1, ..., Re C_L, Im C_L]`, z-scored.
    pub data: Array3<f64>,
    /// Removed phase per spatial vector.
    pub phi: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub window: CropWindow,
}

impl PreparedBasis {
    pub fn rank(&self) -> usize {
        self.phi.len()
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    /// Copy with new channel data and the same metadata.
    pub fn with_data(&self, data: Array3<f64>) -> Result<Self, SubspaceError> {
        if data.dim() != self.data.dim() {
            return Err(SubspaceError::DimensionMismatch(format!(
                "refined {:?} vs prepared {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    /// Complex spatial vectors in the window, still dephased.
    pub fn unstandardize(&self) -> Array3<c64> {
        let (ch, h, w) = self.data.dim();
        Array3::from_shape_fn((ch / 2, h, w), |(l, y, x)| {
            let re = self.data[[2 * l, y, x]] * self.std[2 * l] + self.mean[2 * l];
            let im = self.data[[2 * l + 1, y, x]] * self.std[2 * l + 1] + self.mean[2 * l + 1];
            c64::new(re, im)
        })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let zstats: Vec<f64> = self.mean.iter().zip(&self.std).flat_map(|(m, s)| [*m, *s]).collect();
        let zstats = Array2::from_shape_vec((self.mean.len(), 2), zstats).expect("pairs");
        let entries = vec![
            Tensor::from_real("prepared", self.data.view()),
            Tensor::from_vec("phi", &self.phi),
            Tensor::from_real("zstats", zstats.view()),
            Tensor::from_vec("crop", &self.window.to_vec()),
        ];
        TensorArchive::from_entries(entries).expect("distinct names")
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self, SubspaceError> {
        let data = ar.require("prepared")?.expect_rank(3)?.to_real()?;
        let data: Array3<f64> = data.into_dimensionality().expect("rank checked");
        let phi: Vec<f64> = ar.require("phi")?.expect_rank(1)?.to_real()?.iter().copied().collect();
        let z = ar.require("zstats")?.expect_rank(2)?.to_real()?;
        let crop: Vec<f64> = ar.require("crop")?.to_real()?.iter().copied().collect();
        let window = CropWindow::from_slice(&crop)
            .ok_or_else(|| SubspaceError::DimensionMismatch(format!("bad crop record {crop:?}")))?;
        let ch = data.len_of(Axis(0));
        if z.shape() != [ch, 2] || phi.len() * 2 != ch {
            return Err(SubspaceError::DimensionMismatch(format!(
                "{ch} channels, zstats {:?}, {} phases",
                z.shape(),
                phi.len()
            )));
        }
        let mean = (0..ch).map(|c| z[[c, 0]]).collect();
        let std = (0..ch).map(|c| z[[c, 1]]).collect();
        Ok(Self {
            data,
            phi,
            mean,
            std,
            window,
        })
    }
}

pub fn prepare_basis(b: &SubspaceBasis) -> PreparedBasis {
    prepare_basis_sized(b, (PREPARED_SIZE, PREPARED_SIZE))
}

/// Dephase each `C_l` so its spatial sum is real non-negative, crop (or
/// pad) to `size`, split into real/imaginary channels and z-score them.
pub fn prepare_basis_sized(b: &SubspaceBasis, size: (usize, usize)) -> PreparedBasis {
    let window = CropWindow::centered(b.shape(), size);
    let l = b.rank();
    let mut data = Array3::zeros((2 * l, size.0, size.1));
    let mut phi = Vec::with_capacity(l);
    let mut mean = Vec::with_capacity(2 * l);
    let mut std = Vec::with_capacity(2 * l);
    let (sy, sx) = window.src;
    let (dy, dx) = window.dst;
    let (ey, ex) = window.extent;
    for (k, c) in b.c.outer_iter().enumerate() {
        let sum: c64 = c.iter().sum();
        let p = if sum.norm() > 0.0 { sum.arg() } else { 0.0 };
        phi.push(p);
        let rot = c64::from_polar(1.0, -p);
        let region = c.slice(s![sy..sy + ey, sx..sx + ex]);
        for ((y, x), v) in region.indexed_iter() {
            let d = v * rot;
            data[[2 * k, dy + y, dx + x]] = d.re;
            data[[2 * k + 1, dy + y, dx + x]] = d.im;
        }
        // channels that are zero up to rounding keep unit scale
        let n = (size.0 * size.1) as f64;
        let rms = (c.iter().map(|z| z.norm_sqr()).sum::<f64>() / c.len() as f64).sqrt();
        for ch in [2 * k, 2 * k + 1] {
            let mut plane = data.index_axis_mut(Axis(0), ch);
            let m = plane.sum() / n;
            let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = if var.sqrt() > 1e-10 * rms { var.sqrt() } else { 1.0 };
            plane.mapv_inplace(|v| (v - m) / sd);
            mean.push(m);
            std.push(sd);
        }
    }
    PreparedBasis {
        data,
        phi,
        mean,
        std,
        window,
    }
}

/// `X = sum_l a_l C_l (x) T_l`, with the network window of each `C_l`
/// replaced by `refined` when given.
pub fn recombine(b: &SubspaceBasis, refined: Option<&PreparedBasis>) -> Result<ContrastStack, SubspaceError> {
    let (ny, nx) = b.shape();
    let c = match refined {
        None => b.c.clone(),
        Some(p) => paste(b, p)?,
    };
    let nt = b.n_contrasts();
    let mut x = ContrastStack::zeros((nt, ny, nx));
    for l in 0..b.rank() {
        let cl = c.index_axis(Axis(0), l);
        for t in 0..nt {
            let w = b.t[[l, t]] * b.a[l];
            let mut frame = x.index_axis_mut(Axis(0), t);
            frame.zip_mut_with(&cl, |o, v| *o += v * w);
        }
    }
    Ok(x)
}

fn paste(b: &SubspaceBasis, p: &PreparedBasis) -> Result<Array3<c64>, SubspaceError> {
    let expect = (2 * b.rank(), p.window.size.0, p.window.size.1);
    if p.data.dim() != expect || p.rank() != b.rank() || p.window.full != b.shape() {
        return Err(SubspaceError::DimensionMismatch(format!(
            "prepared {:?} (window {:?}) vs basis rank {} at {:?}",
            p.data.dim(),
            p.window.full,
            b.rank(),
            b.shape()
        )));
    }
    let d = p.unstandardize();
    let mut c = b.c.clone();
    let (sy, sx) = p.window.src;
    let (dy, dx) = p.window.dst;
    let (ey, ex) = p.window.extent;
    for l in 0..b.rank() {
        let rot = c64::from_polar(1.0, p.phi[l]);
        for y in 0..ey {
            for x in 0..ex {
                c[[l, sy + y, sx + x]] = d[[l, dy + y, dx + x]] * rot;
            }
        }
    }
    Ok(c)
}
