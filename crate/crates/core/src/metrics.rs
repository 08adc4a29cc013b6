//! Image container and quality metrics.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::{Error, Result};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut im = Self::new(width, height);
        for px in im.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        im
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch { expected: width * height * 3, actual: data.len() });
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    }

    /// 8-bit sRGB-agnostic quantization (plain `round(255 v)`).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    fn same_shape(&self, o: &Image) -> Result<()> {
        if self.width != o.width || self.height != o.height {
            return Err(Error::ShapeMismatch { expected: self.data.len(), actual: o.data.len() });
        }
        Ok(())
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::Degenerate("empty image"));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * Float::log10(1.0 / mse)).min(PSNR_CAP)
    }
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = Float::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WIN]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WIN, h + 1 - SSIM_WIN);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity of the luminance channels (11x11 Gaussian
/// window, sigma 1.5, dynamic range 1). Both sides must be at least 11 pixels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WIN || h < SSIM_WIN {
        return Err(Error::InvalidArgument("ssim needs images of at least 11x11"));
    }
    let la = a.luminance();
    let lb = b.luminance();
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, ow, oh) = filter(&la, w, h, &k);
    let (mu_b, _, _) = filter(&lb, w, h, &k);
    let (aa, _, _) = filter(&prod(&la, &la), w, h, &k);
    let (bb, _, _) = filter(&prod(&lb, &lb), w, h, &k);
    let (ab, _, _) = filter(&prod(&la, &lb), w, h, &k);
    let c1 = (K1 * 1.0) * (K1 * 1.0);
    let c2 = (K2 * 1.0) * (K2 * 1.0);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ow * oh) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.25; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 10.0 * (16.0f64).log10()).abs() < 1e-9);
        assert!((psnr_from_mse(1e-4) - 40.0).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn ssim_constants_and_identity() {
        let a = Image::filled(16, 16, [0.5; 3]);
        let b = Image::filled(16, 16, [0.25; 3]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (m1, m2) = (0.5f64, 0.25f64);
        let c1 = 1e-4;
        let expect = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let mut a = Image::new(16, 16);
        let mut b = Image::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = ((x + y) % 2) as f32;
                a.set(x, y, [v; 3]);
                b.set(x, y, [1.0 - v; 3]);
            }
        }
        assert!(ssim(&a, &b).unwrap() < 0.0);
        assert!(ssim(&Image::new(8, 8), &Image::new(8, 8)).is_err());
    }
}
