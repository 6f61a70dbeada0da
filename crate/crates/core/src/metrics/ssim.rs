use super::gray::Gray;
use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const LEVELS: usize = 5;
/// Per-scale exponents of the five-scale MS-SSIM, finest first.
pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|k| (-((k as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering.
fn filter(img: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = g.iter().enumerate().map(|(k, t)| t * img[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = g.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term over all valid windows.
pub fn ssim_components(a: &Gray, b: &Gray, window: usize, sigma: f64) -> Result<(f64, f64)> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    if a.height < window || a.width < window {
        return Err(Error::invalid(format!("{}x{} image is smaller than the {window}px window", a.height, a.width)));
    }
    let (h, w) = (a.height, a.width);
    let g = gaussian_window(window, sigma);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, _, _) = filter(&a.data, h, w, &g);
    let (mu_b, _, _) = filter(&b.data, h, w, &g);
    let (aa, _, _) = filter(&prod(&a.data, &a.data), h, w, &g);
    let (bb, _, _) = filter(&prod(&b.data, &b.data), h, w, &g);
    let (ab, oh, ow) = filter(&prod(&a.data, &b.data), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for k in 0..oh * ow {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = aa[k] - ma * ma;
        let vb = bb[k] - mb * mb;
        let cov = ab[k] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    let n = (oh * ow) as f64;
    Ok((s_sum / n, cs_sum / n))
}

/// Gaussian-window SSIM of two images in `[0, 1]`.
pub fn ssim(a: &Gray, b: &Gray, window: usize, sigma: f64) -> Result<f64> {
    Ok(ssim_components(a, b, window, sigma)?.0)
}

/// Scales usable at this size: each level must still hold a full window.
pub fn usable_levels(height: usize, width: usize, levels: usize) -> usize {
    let side = height.min(width);
    (1..=levels).rev().find(|&l| WINDOW << (l - 1) <= side).unwrap_or(0)
}

/// Exponents for `levels` scales: the canonical five, truncated and
/// renormalized to sum to one when fewer scales fit.
pub fn level_weights(levels: usize) -> Vec<f64> {
    let w = &MS_WEIGHTS[..levels.min(MS_WEIGHTS.len())];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// MS-SSIM: contrast-structure at every scale, luminance only at the coarsest.
/// Negative per-scale terms are clamped to zero; the result lies in `[0, 1]`.
pub fn ms_ssim(a: &Gray, b: &Gray, levels: usize) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    let used = usable_levels(a.height, a.width, levels.clamp(1, MS_WEIGHTS.len()));
    if used == 0 {
        return Err(Error::invalid(format!("{}x{} image is smaller than the {WINDOW}px window", a.height, a.width)));
    }
    if used < levels {
        log::warn!("{}x{} image fits {used} of {levels} MS-SSIM scales", a.height, a.width);
    }
    let weights = level_weights(used);
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut score = 1.0;
    for (l, wgt) in weights.iter().enumerate() {
        let (s, cs) = ssim_components(&x, &y, WINDOW, SIGMA)?;
        let term = if l + 1 == used { s } else { cs };
        score *= term.max(0.0).powf(*wgt);
        if l + 1 < used {
            x = x.downsample();
            y = y.downsample();
        }
    }
    Ok(score.clamp(0.0, 1.0))
}
