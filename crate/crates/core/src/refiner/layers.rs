//! Layer kernels on `(channels, height, width)` activations.
//!
//! Convolutions lower to matrix products: an im2col block of a pixel tile
//! times the `(out, in * k * k)` weight matrix. Tiles are independent and
//! each output element is produced by exactly one tile, so results do not
//! depend on the thread count.

use ndarray::{s, Array3, ArrayView3, Axis, Zip};

use crate::par;

pub type Activation = Array3<f64>;

pub const BN_EPS: f64 = 1e-5;

const PIXEL_TILE: usize = 1024;
const CHANNEL_TILE: usize = 64;

/// `c = a b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slices have the asserted lengths and row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Columns `(ci, ky, kx)` by pixels `p0..p0+len` with zero padding `k / 2`.
fn im2col(x: &ArrayView3<f64>, k: usize, p0: usize, len: usize, out: &mut [f64]) {
    let (cin, h, w) = x.dim();
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * len..(row + 1) * len];
                for (j, d) in dst.iter_mut().enumerate() {
                    let p = p0 + j;
                    let yy = (p / w) as isize + ky as isize - pad;
                    let xx = (p % w) as isize + kx as isize - pad;
                    *d = if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        plane[[yy as usize, xx as usize]]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Same-size cross-correlation with an odd square kernel.
///
/// `weight` is `(cout, cin, k, k)` row-major.
pub fn conv2d(x: &ArrayView3<f64>, weight: &[f64], cout: usize, k: usize, bias: Option<&[f64]>) -> Activation {
    let (cin, h, w) = x.dim();
    assert!(k % 2 == 1, "kernel must be odd");
    assert_eq!(weight.len(), cout * cin * k * k, "weight size");
    let hw = h * w;
    let kk = cin * k * k;
    let tile = PIXEL_TILE.min(hw);
    let pixel_tiles = hw.div_ceil(tile);
    let channel_tiles = cout.div_ceil(CHANNEL_TILE);
    let blocks = par::map_indices(pixel_tiles * channel_tiles, |task| {
        let (pt, ct) = (task / channel_tiles, task % channel_tiles);
        let p0 = pt * tile;
        let len = tile.min(hw - p0);
        let c0 = ct * CHANNEL_TILE;
        let m = CHANNEL_TILE.min(cout - c0);
        let mut cols = vec![0.0; kk * len];
        im2col(x, k, p0, len, &mut cols);
        let mut out = vec![0.0; m * len];
        gemm(m, kk, len, &weight[c0 * kk..(c0 + m) * kk], &cols, &mut out);
        out
    });
    let mut y = Activation::zeros((cout, h, w));
    {
        let flat = y.as_slice_mut().expect("standard layout");
        for (task, block) in blocks.iter().enumerate() {
            let (pt, ct) = (task / channel_tiles, task % channel_tiles);
            let p0 = pt * tile;
            let len = tile.min(hw - p0);
            let c0 = ct * CHANNEL_TILE;
            for (r, row) in block.chunks_exact(len).enumerate() {
                let o = (c0 + r) * hw + p0;
                flat[o..o + len].copy_from_slice(row);
            }
        }
    }
    if let Some(b) = bias {
        add_bias(&mut y, b);
    }
    y
}

fn add_bias(y: &mut Activation, b: &[f64]) {
    assert_eq!(b.len(), y.len_of(Axis(0)), "bias size");
    for (mut plane, &bv) in y.outer_iter_mut().zip(b) {
        plane += bv;
    }
}

/// Inference batch norm: `gamma (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm(x: &mut Activation, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Result<(), usize> {
    let c = x.len_of(Axis(0));
    assert!(gamma.len() == c && beta.len() == c && mean.len() == c && var.len() == c, "batch norm size");
    if let Some(bad) = var.iter().position(|&v| !(v + eps > 0.0)) {
        return Err(bad);
    }
    for (ch, mut plane) in x.outer_iter_mut().enumerate() {
        let sd = (var[ch] + eps).sqrt();
        let (g, m, b) = (gamma[ch], mean[ch], beta[ch]);
        plane.mapv_inplace(|v| g * (v - m) / sd + b);
    }
    Ok(())
}

pub fn relu(x: &mut Activation) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2(x: &ArrayView3<f64>) -> Activation {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even extents, got {h}x{w}");
    Activation::from_shape_fn((c, h / 2, w / 2), |(ch, y, xx)| {
        let a = x[[ch, 2 * y, 2 * xx]];
        let b = x[[ch, 2 * y, 2 * xx + 1]];
        let cc = x[[ch, 2 * y + 1, 2 * xx]];
        let d = x[[ch, 2 * y + 1, 2 * xx + 1]];
        a.max(b).max(cc).max(d)
    })
}

/// 2x2 transposed convolution with stride 2.
///
/// `weight` is `(cin, cout, 2, 2)` row-major.
pub fn conv_transpose2(x: &ArrayView3<f64>, weight: &[f64], cout: usize, bias: &[f64]) -> Activation {
    let (cin, h, w) = x.dim();
    assert_eq!(weight.len(), cin * cout * 4, "weight size");
    let mut y = Activation::zeros((cout, 2 * h, 2 * w));
    for a in 0..2 {
        for b in 0..2 {
            // per output phase this is a 1x1 convolution with W_ab[o, i] = w[i, o, a, b]
            let wab: Vec<f64> = (0..cout)
                .flat_map(|o| (0..cin).map(move |i| (i, o)))
                .map(|(i, o)| weight[((i * cout + o) * 2 + a) * 2 + b])
                .collect();
            let part = conv2d(x, &wab, cout, 1, None);
            y.slice_mut(s![.., a..;2, b..;2]).assign(&part);
        }
    }
    add_bias(&mut y, bias);
    y
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Activation {
    assert_eq!((a.dim().1, a.dim().2), (b.dim().1, b.dim().2), "spatial extents differ");
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching extents")
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    Zip::from(a).and(b).fold(0.0, |m, x, y| f64::max(m, (x - y).abs()))
}
