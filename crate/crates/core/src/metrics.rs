//! PSNR and SSIM on `3×H×W` images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported when the MSE falls below `1e-12`.
pub const PSNR_CAP: f64 = 120.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Neumaier-compensated sum.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    stable_sum(values.iter().copied()) / values.len() as f64
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (stable_sum(values.iter().map(|v| (v - m) * (v - m))) / values.len() as f64).sqrt()
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse", a.shape(), b.shape()));
    }
    let s = stable_sum(a.data().iter().zip(b.data()).map(|(&x, &y)| {
        let d = x as f64 - y as f64;
        d * d
    }));
    Ok(s / a.numel() as f64)
}

/// `10·log10(max²/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over the valid region.
fn blur_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, data range 1),
/// per channel and then averaged.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (c, h, w) = match a.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("ssim", s, &[3, 0, 0])),
    };
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Param(format!("ssim needs H, W ≥ {SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut per_channel = Vec::with_capacity(c);
    for ch in 0..c {
        let range = ch * h * w..(ch + 1) * h * w;
        let x: Vec<f64> = a.data()[range.clone()].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[range].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = blur_valid(&x, h, w, &k);
        let my = blur_valid(&y, h, w, &k);
        let sxx = blur_valid(&prod(&x, &x), h, w, &k);
        let syy = blur_valid(&prod(&y, &y), h, w, &k);
        let sxy = blur_valid(&prod(&x, &y), h, w, &k);
        let map: Vec<f64> = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .collect();
        per_channel.push(mean(&map));
    }
    Ok(mean(&per_channel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(seed: usize, h: usize, w: usize) -> Tensor<f32> {
        let n = 3 * h * w;
        let data = (0..n).map(|i| ((i * (37 + seed * 16) + seed) % 101) as f32 / 100.0).collect();
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(&[3, 4, 4], 0.3f32);
        let b = Tensor::full(&[3, 4, 4], 0.4f32);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_brute_force_mse() {
        let (a, b) = (pattern(1, 8, 8), pattern(2, 8, 8));
        let mut m = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            m += (*x as f64 - *y as f64).powi(2);
        }
        m /= a.numel() as f64;
        assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = pattern(3, 8, 8);
        let mut last = f64::INFINITY;
        for step in 1..10 {
            let mut b = a.clone();
            b.data_mut().iter_mut().enumerate().for_each(|(i, v)| {
                *v += if i % 2 == 0 { 0.01 } else { -0.01 } * step as f32
            });
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_self_is_one_and_symmetric() {
        let (a, b) = (pattern(4, 16, 16), pattern(5, 16, 16));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9);
        assert!(ssim(&Tensor::zeros(&[3, 10, 16]), &Tensor::zeros(&[3, 10, 16])).is_err());
    }

    #[test]
    fn ssim_inverted_checkerboard_is_low() {
        let data = (0..3 * 16 * 16).map(|i| (((i % 16) + (i / 16) % 16) % 2) as f32).collect();
        let x = Tensor::new(&[3, 16, 16], data).unwrap();
        let mut inv = x.clone();
        inv.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&x, &inv).unwrap() < 0.5);
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // skimage.metrics.structural_similarity(gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1, channel_axis=0)
        let (a, b) = (pattern(1, 16, 20), pattern(2, 16, 20));
        assert!((ssim(&a, &b).unwrap() - 0.03693910777982206).abs() < 1e-9);
        let mut c = a.clone();
        c.data_mut().iter_mut().for_each(|v| *v = *v * 0.8 + 0.1);
        assert!((ssim(&a, &c).unwrap() - 0.9743715301572514).abs() < 1e-9);
    }

    #[test]
    fn compensated_statistics() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(stable_sum(v), 2.0);
        assert_eq!(std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
    }
}
