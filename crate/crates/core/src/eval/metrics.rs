use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of images normalized to `[-1, 1]`.
pub const SSIM_RANGE: f64 = 2.0;
pub const THRESHOLD: f32 = 0.5;

/// `2|P ∩ G| / (|P| + |G|)` over nonzero entries; 1 when both are empty.
pub fn dice_score(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("dice: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

pub fn binarize(prob: ArrayView2<'_, f32>) -> Array2<u8> {
    prob.mapv(|v| u8::from(v >= THRESHOLD))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable Gaussian filtering.
fn filter(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w - n + 1), |(i, j)| (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean structural similarity over all full `11 x 11` Gaussian windows.
pub fn ssim(x: ArrayView2<'_, f32>, y: ArrayView2<'_, f32>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("ssim: {:?} vs {:?}", x.dim(), y.dim())));
    }
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let x = x.mapv(f64::from);
    let y = y.mapv(f64::from);
    let k = gaussian_window();
    let mx = filter(&x, &k);
    let my = filter(&y, &k);
    let sxx = filter(&(&x * &x), &k) - &mx * &mx;
    let syy = filter(&(&y * &y), &k) - &my * &my;
    let sxy = filter(&(&x * &y), &k) - &mx * &my;
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let map = ((2.0 * &mx * &my + c1) * (2.0 * &sxy + c2)) / ((&mx * &mx + &my * &my + c1) * (sxx + syy + c2));
    Ok(map.mean().expect("nonempty map"))
}
