//! Image-quality measures on `1 x 3 x H x W` sRGB tensors in `[0, 1]`.
//!
//! * PSNR over all channels and pixels, peak 1.
//! * Y-PSNR on the luma plane of the YCbCr conversion.
//! * SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, valid
//!   region only, averaged over channels.
//! * Delta E: mean CIE76 distance after gamma 2.2 linearization, the sRGB
//!   (D65) XYZ matrix and CIELAB, with the white point taken as the matrix
//!   applied to RGB white.

use crate::color::{srgb_to_ycc, SrgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// PSNR of two equally shaped tensors. Identical inputs give `+inf`.
pub fn psnr_tensor(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sse / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    psnr_tensor(&a.tensor, &b.tensor, 1.0)
}

fn luma(img: &SrgbImage) -> Tensor<f32> {
    let ycc = srgb_to_ycc(img).tensor;
    let [n, _, h, w] = ycc.shape();
    Tensor::from_fn([n, 1, h, w], |[b, _, y, x]| ycc.at([b, 0, y, x]))
}

pub fn y_psnr(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    same_shape(&a.tensor, &b.tensor)?;
    psnr_tensor(&luma(a), &luma(b), 1.0)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * tmp[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels.
pub fn ssim(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    ssim_tensor(&a.tensor, &b.tensor)
}

pub fn ssim_tensor(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let hw = h * w;
    let mut total = 0.0;
    for plane in 0..n * c {
        let pa: Vec<f64> = a.data()[plane * hw..(plane + 1) * hw].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data()[plane * hw..(plane + 1) * hw].iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&aa, h, w, &k);
        let e_bb = filter_valid(&bb, h, w, &k);
        let e_ab = filter_valid(&ab, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIELAB of a gamma-encoded RGB triple.
pub fn srgb_to_lab([r, g, b]: [f64; 3]) -> [f64; 3] {
    let lin = [r, g, b].map(|v| v.clamp(0.0, 1.0).powf(2.2));
    let xyz = RGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let white = RGB_TO_XYZ.map(|row| row[0] + row[1] + row[2]);
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Mean per-pixel CIE76 colour difference.
pub fn delta_e(a: &SrgbImage, b: &SrgbImage) -> Result<f64> {
    same_shape(&a.tensor, &b.tensor)?;
    let [n, _, h, w] = a.tensor.shape();
    let hw = h * w;
    let (da, db) = (a.tensor.data(), b.tensor.data());
    let mut total = 0.0;
    for bi in 0..n {
        let base = bi * 3 * hw;
        for p in 0..hw {
            let px = |d: &[f32]| [0, 1, 2].map(|c| d[base + c * hw + p] as f64);
            let la = srgb_to_lab(px(da));
            let lb = srgb_to_lab(px(db));
            total += ((la[0] - lb[0]).powi(2) + (la[1] - lb[1]).powi(2) + (la[2] - lb[2]).powi(2)).sqrt();
        }
    }
    Ok(total / (n * hw).max(1) as f64)
}

/// Metrics of one (prediction, reference) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub y_psnr_db: f64,
    pub ssim: f64,
    pub delta_e: f64,
}

pub fn evaluate_pair(pred: &SrgbImage, gt: &SrgbImage) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr_db: psnr(pred, gt)?,
        y_psnr_db: y_psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        delta_e: delta_e(pred, gt)?,
    })
}

/// Arithmetic means over a set of images. Infinite PSNR values propagate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub y_psnr_db: f64,
    pub ssim: f64,
    pub delta_e: f64,
    pub n_images: usize,
}

impl MetricReport {
    pub fn aggregate(items: &[ImageMetrics]) -> Self {
        let n = items.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                items.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            psnr_db: mean(|m| m.psnr_db),
            y_psnr_db: mean(|m| m.y_psnr_db),
            ssim: mean(|m| m.ssim),
            delta_e: mean(|m| m.delta_e),
            n_images: n,
        }
    }
}
