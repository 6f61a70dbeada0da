//! Independent oracles and test images shared by integration tests.
#![allow(dead_code)]

use dewarp_core::metrics::Gray;
use dewarp_core::rng;

pub fn noise(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..h * w).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect()
}

/// Noise blurred by a separable box of radius 2: textured but locally smooth.
pub fn texture(h: usize, w: usize, seed: u64) -> Gray {
    let n = noise(h, w, seed);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (mut s, mut c) = (0.0, 0.0);
            for di in -2i64..=2 {
                for dj in -2i64..=2 {
                    let (y, x) = (i as i64 + di, j as i64 + dj);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        s += n[y as usize * w + x as usize];
                        c += 1.0;
                    }
                }
            }
            out[i * w + j] = s / c;
        }
    }
    Gray::new(h, w, out).unwrap()
}

pub fn crop(g: &Gray, y0: usize, x0: usize, h: usize, w: usize) -> Gray {
    let data = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).map(|(i, j)| g.at(y0 + i, x0 + j)).collect();
    Gray::new(h, w, data).unwrap()
}

/// Direct evaluation of the MS-SSIM definition: explicit 2-D Gaussian weights
/// at every window position, 2x2 averaging between scales.
pub fn naive_ms_ssim(a: &[f64], b: &[f64], mut h: usize, mut w: usize) -> f64 {
    let canonical = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut levels = 5;
    while 11 * (1 << (levels - 1)) > h.min(w) {
        levels -= 1;
    }
    let total: f64 = canonical[..levels].iter().sum();
    let mut kernel = [[0.0f64; 11]; 11];
    let mut ks = 0.0;
    for (u, row) in kernel.iter_mut().enumerate() {
        for (v, k) in row.iter_mut().enumerate() {
            let r2 = ((u as f64 - 5.0).powi(2) + (v as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *k = (-r2).exp();
            ks += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut x, mut y) = (a.to_vec(), b.to_vec());
    let mut result = 1.0;
    for level in 0..levels {
        let (mut ssum, mut cssum, mut count) = (0.0, 0.0, 0.0);
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let k = kernel[u][v] / ks;
                        mx += k * x[(i + u) * w + j + v];
                        my += k * y[(i + u) * w + j + v];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let k = kernel[u][v] / ks;
                        let (dx, dy) = (x[(i + u) * w + j + v] - mx, y[(i + u) * w + j + v] - my);
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cov += k * dx * dy;
                    }
                }
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                ssum += l * cs;
                cssum += cs;
                count += 1.0;
            }
        }
        let term = if level + 1 == levels { ssum / count } else { cssum / count };
        result *= term.max(0.0).powf(canonical[level] / total);
        let (nh, nw) = (h / 2, w / 2);
        let down = |img: &[f64]| -> Vec<f64> {
            let mut o = Vec::with_capacity(nh * nw);
            for i in 0..nh {
                for j in 0..nw {
                    o.push((img[2 * i * w + 2 * j] + img[2 * i * w + 2 * j + 1] + img[(2 * i + 1) * w + 2 * j] + img[(2 * i + 1) * w + 2 * j + 1]) / 4.0);
                }
            }
            o
        };
        x = down(&x);
        y = down(&y);
        h = nh;
        w = nw;
    }
    result.clamp(0.0, 1.0)
}

/// Levenshtein distance from the full table, no row reuse.
pub fn dp_oracle(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..=a.len() {
        for j in 0..=b.len() {
            t[i][j] = if i == 0 {
                j
            } else if j == 0 {
                i
            } else {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                (t[i - 1][j - 1] + c).min(t[i - 1][j] + 1).min(t[i][j - 1] + 1)
            };
        }
    }
    t[a.len()][b.len()]
}
