//! Image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Reported in place of +∞ for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape("image pair", a.data.len(), b.data.len()));
    }
    Ok(())
}

/// `-10 log10(MSE)` over all channels.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

/// Same as [`psnr`] restricted to pixels where `mask` is true.
pub fn masked_psnr(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    check_pair(a, b)?;
    if mask.len() != a.pixels() {
        return Err(Error::shape("mask", a.pixels(), mask.len()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            let d = a.data[3 * p + c] - b.data[3 * p + c];
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("mask selects no pixels".into()));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

fn gaussian_kernel() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-0.5 * (x * x) as f64 / (SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(plane: &[f64], width: usize, height: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (width + 1 - n, height + 1 - n);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize, k: &[f64]) -> f64 {
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let (mu_a, ..) = filter_valid(a, width, height, k);
    let (mu_b, ..) = filter_valid(b, width, height, k);
    let (aa, ..) = filter_valid(&prod(a, a), width, height, k);
    let (bb, ..) = filter_valid(&prod(b, b), width, height, k);
    let (ab, ..) = filter_valid(&prod(a, b), width, height, k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean structural similarity: 11×11 Gaussian window (σ = 1.5), data range 1,
/// averaged over the valid region of each channel and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let win = 2 * SSIM_RADIUS + 1;
    if a.width < win || a.height < win {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {win}x{win} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let k = gaussian_kernel();
    let sum: f64 = (0..3)
        .map(|c| ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height, &k))
        .sum();
    Ok(sum / 3.0)
}

/// Population variance.
pub fn psnr_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_view_psnr: Vec<f64>,
    pub per_view_ssim: Vec<f64>,
    pub mean_psnr: f64,
    /// Zero when fewer than two views were evaluated.
    pub psnr_variance: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// Scores `(rendered, reference)` pairs. SSIM is skipped (NaN) for views
    /// smaller than the SSIM window.
    pub fn from_pairs(pairs: &[(Image, Image)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no views to evaluate".into()));
        }
        let mut per_view_psnr = Vec::with_capacity(pairs.len());
        let mut per_view_ssim = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            per_view_psnr.push(psnr(a, b)?);
            per_view_ssim.push(ssim(a, b).unwrap_or(f64::NAN));
        }
        let n = pairs.len() as f64;
        Ok(Self {
            mean_psnr: per_view_psnr.iter().sum::<f64>() / n,
            psnr_variance: psnr_variance(&per_view_psnr).unwrap_or(0.0),
            mean_ssim: per_view_ssim.iter().sum::<f64>() / n,
            per_view_psnr,
            per_view_ssim,
        })
    }
}
