//! Centered, orthonormal 2-D FFTs.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rustfft::{Fft, FftPlanner};

use crate::c64;

struct Plan2 {
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, usize), Arc<Plan2>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(ny: usize, nx: usize) -> Arc<Plan2> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((ny, nx))
            .or_insert_with(|| {
                Arc::new(Plan2 {
                    row_fwd: planner.plan_fft_forward(nx),
                    row_inv: planner.plan_fft_inverse(nx),
                    col_fwd: planner.plan_fft_forward(ny),
                    col_inv: planner.plan_fft_inverse(ny),
                })
            })
            .clone()
    })
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

/// Circularly shift a row-major `ny x nx` buffer by (`sy`, `sx`).
fn roll(src: &[c64], dst: &mut [c64], ny: usize, nx: usize, sy: usize, sx: usize) {
    for y in 0..ny {
        let ty = (y + sy) % ny;
        let s = &src[y * nx..(y + 1) * nx];
        let d = &mut dst[ty * nx..(ty + 1) * nx];
        // d[(x + sx) % nx] = s[x]
        d[sx..].copy_from_slice(&s[..nx - sx]);
        d[..sx].copy_from_slice(&s[nx - sx..]);
    }
}

fn transform(buf: &mut [c64], ny: usize, nx: usize, dir: Direction) {
    assert_eq!(buf.len(), ny * nx, "buffer does not match grid");
    let p = plan(ny, nx);
    let (row, col) = match dir {
        Direction::Forward => (&p.row_fwd, &p.col_fwd),
        Direction::Inverse => (&p.row_inv, &p.col_inv),
    };

    // ifftshift: index n/2 moves to 0
    let mut tmp = vec![c64::new(0.0, 0.0); ny * nx];
    roll(buf, &mut tmp, ny, nx, ny - ny / 2, nx - nx / 2);

    row.process(&mut tmp);
    let mut column = vec![c64::new(0.0, 0.0); ny];
    for x in 0..nx {
        for y in 0..ny {
            column[y] = tmp[y * nx + x];
        }
        col.process(&mut column);
        for y in 0..ny {
            tmp[y * nx + x] = column[y];
        }
    }

    let scale = 1.0 / ((ny * nx) as f64).sqrt();
    tmp.iter_mut().for_each(|v| *v *= scale);
    // fftshift: index 0 moves to n/2
    roll(&tmp, buf, ny, nx, ny / 2, nx / 2);
}

fn with_slice(mut img: ArrayViewMut2<c64>, dir: Direction) {
    let (ny, nx) = img.dim();
    match img.as_slice_mut() {
        Some(s) => transform(s, ny, nx, dir),
        None => {
            let mut owned: Vec<c64> = img.iter().copied().collect();
            transform(&mut owned, ny, nx, dir);
            img.iter_mut().zip(owned).for_each(|(d, s)| *d = s);
        }
    }
}

/// In-place centered orthonormal forward DFT.
pub fn fft2c_inplace(img: ArrayViewMut2<c64>) {
    with_slice(img, Direction::Forward);
}

/// In-place centered orthonormal inverse DFT.
pub fn ifft2c_inplace(img: ArrayViewMut2<c64>) {
    with_slice(img, Direction::Inverse);
}

/// Unitary centered 2-D DFT: `fftshift(fft2(ifftshift(x))) / sqrt(N)`.
pub fn fft2c(img: ArrayView2<c64>) -> Array2<c64> {
    let mut out = img.to_owned();
    fft2c_inplace(out.view_mut());
    out
}

/// Inverse of [`fft2c`].
pub fn ifft2c(kspace: ArrayView2<c64>) -> Array2<c64> {
    let mut out = kspace.to_owned();
    ifft2c_inplace(out.view_mut());
    out
}
