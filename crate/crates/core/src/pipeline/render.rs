//! Grayscale PNG panels with fixed display windows.

use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::Array2;

use crate::fitting::Modality;

use super::PipelineError;

/// Display window `(lo, hi)` for a quantitative map.
pub fn map_window(modality: Modality) -> (f64, f64) {
    match modality {
        Modality::T1 => (0.0, 3000.0),
        Modality::T2 => (0.0, 250.0),
    }
}

pub const M0_WINDOW: (f64, f64) = (0.0, 1.0);

fn gray(v: f64, (lo, hi): (f64, f64)) -> u8 {
    if !v.is_finite() || hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Images laid side by side with a 2-pixel black gutter, all sharing `window`.
pub fn panel(images: &[&Array2<f64>], window: (f64, f64)) -> Result<GrayImage, PipelineError> {
    let Some(first) = images.first() else {
        return Err(PipelineError::Data("empty panel".into()));
    };
    let (h, w) = first.dim();
    if images.iter().any(|im| im.dim() != (h, w)) {
        return Err(PipelineError::Data("panel images differ in size".into()));
    }
    const GUTTER: usize = 2;
    let width = images.len() * w + (images.len() - 1) * GUTTER;
    let mut out = GrayImage::new(width as u32, h as u32);
    for (i, im) in images.iter().enumerate() {
        let x0 = i * (w + GUTTER);
        for ((y, x), &v) in im.indexed_iter() {
            out.put_pixel((x0 + x) as u32, y as u32, Luma([gray(v, window)]));
        }
    }
    Ok(out)
}

pub fn write_panel(path: &Path, images: &[&Array2<f64>], window: (f64, f64)) -> Result<(), PipelineError> {
    panel(images, window)?
        .save(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_clamps() {
        assert_eq!(gray(-5.0, (0.0, 1.0)), 0);
        assert_eq!(gray(0.5, (0.0, 1.0)), 128);
        assert_eq!(gray(7.0, (0.0, 1.0)), 255);
        assert_eq!(gray(f64::NAN, (0.0, 1.0)), 0);
    }

    #[test]
    fn panel_layout() {
        let a = Array2::from_elem((3, 4), 3000.0);
        let b = Array2::zeros((3, 4));
        let p = panel(&[&a, &b], map_window(Modality::T1)).unwrap();
        assert_eq!(p.dimensions(), (10, 3));
        assert_eq!(p.get_pixel(0, 0)[0], 255);
        assert_eq!(p.get_pixel(4, 0)[0], 0);
        assert_eq!(p.get_pixel(6, 0)[0], 0);
        assert!(panel(&[&a, &Array2::zeros((2, 2))], (0.0, 1.0)).is_err());
    }
}
