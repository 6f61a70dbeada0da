//! LD-like local distortion: dense block matching by normalized
//! cross-correlation standing in for SIFT flow.

use super::gray::Gray;
use crate::error::{Error, Result};

pub const BLOCK: usize = 16;
pub const SEARCH: usize = 24;
pub const PYRAMID_LEVELS: usize = 3;
/// Blocks whose best correlation does not exceed this are excluded.
pub const MIN_NCC: f64 = 0.5;
/// Above this fraction of excluded blocks the score is flagged unreliable.
pub const MAX_LOW_CONFIDENCE: f64 = 0.5;
/// Radius of the refinement search at finer pyramid levels.
const REFINE: i64 = 2;
const TIE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalDistortion {
    /// Mean flow magnitude in pixels over confident blocks (NaN if none).
    pub ld: f64,
    /// Fraction of blocks excluded for low correlation.
    pub low_confidence: f64,
    pub reliable: bool,
    /// Per-block `(dx, dy)` after median filtering, row-major over the block grid.
    pub flow: Vec<(f64, f64)>,
    pub blocks: (usize, usize),
}

/// NCC of the `b x b` patch of `a` at top-left `(ay, ax)` against `g` at
/// `(gy, gx)`. `None` when either patch is flat or falls outside its image.
fn ncc(a: &Gray, ay: i64, ax: i64, g: &Gray, gy: i64, gx: i64, b: usize) -> Option<f64> {
    let inside = |img: &Gray, y: i64, x: i64| {
        y >= 0 && x >= 0 && y as usize + b <= img.height && x as usize + b <= img.width
    };
    if !inside(a, ay, ax) || !inside(g, gy, gx) {
        return None;
    }
    let n = (b * b) as f64;
    let (mut sa, mut sg, mut saa, mut sgg, mut sag) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..b {
        let ra = (ay as usize + i) * a.width + ax as usize;
        let rg = (gy as usize + i) * g.width + gx as usize;
        for j in 0..b {
            let (p, q) = (a.data[ra + j], g.data[rg + j]);
            sa += p;
            sg += q;
            saa += p * p;
            sgg += q * q;
            sag += p * q;
        }
    }
    let va = saa - sa * sa / n;
    let vg = sgg - sg * sg / n;
    if va <= 1e-9 * n || vg <= 1e-9 * n {
        return None;
    }
    Some((sag - sa * sg / n) / (va * vg).sqrt())
}

/// Best integer offset within `radius` of `centre`; ties go to the smaller shift.
fn search(a: &Gray, ay: i64, ax: i64, g: &Gray, b: usize, centre: (i64, i64), radius: i64) -> Option<((i64, i64), f64)> {
    let mut best: Option<((i64, i64), f64)> = None;
    for dy in centre.1 - radius..=centre.1 + radius {
        for dx in centre.0 - radius..=centre.0 + radius {
            let Some(s) = ncc(a, ay, ax, g, ay + dy, ax + dx, b) else { continue };
            let better = match best {
                None => true,
                Some(((bx, by), bs)) => s > bs + TIE || (s > bs - TIE && dx * dx + dy * dy < bx * bx + by * by),
            };
            if better {
                best = Some(((dx, dy), s));
            }
        }
    }
    best
}

/// Parabolic sub-pixel offset from three samples around a peak.
fn parabola(lo: Option<f64>, mid: f64, hi: Option<f64>) -> f64 {
    match (lo, hi) {
        (Some(l), Some(h)) => {
            let den = l - 2.0 * mid + h;
            if den < 0.0 {
                (0.5 * (l - h) / den).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Local distortion of `rectified` against `gt` (same size, grayscale).
///
/// Blocks of `block` pixels are matched coarse to fine over three pyramid
/// levels within `search` pixels, refined to sub-pixel precision, and the
/// flow is median-filtered over 3x3 confident neighbours.
pub fn local_distortion(rectified: &Gray, gt: &Gray, block: usize, search_radius: usize) -> Result<LocalDistortion> {
    if (rectified.height, rectified.width) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            rectified.height, rectified.width, gt.height, gt.width
        )));
    }
    if block < 4 || rectified.height < block || rectified.width < block {
        return Err(Error::invalid(format!("block {block} does not fit {}x{}", rectified.height, rectified.width)));
    }
    let mut pa = vec![rectified.clone()];
    let mut pg = vec![gt.clone()];
    for _ in 1..PYRAMID_LEVELS {
        let (a, g) = (pa.last().unwrap().downsample(), pg.last().unwrap().downsample());
        if a.height < 4 || a.width < 4 {
            break;
        }
        pa.push(a);
        pg.push(g);
    }
    let (by, bx) = (rectified.height / block, rectified.width / block);
    let mut flow = vec![(0.0, 0.0); by * bx];
    let mut confident = vec![false; by * bx];
    for r in 0..by {
        for c in 0..bx {
            let mut d: Option<(i64, i64)> = None;
            let mut score = None;
            for lvl in (0..pa.len()).rev() {
                let b = (block >> lvl).max(4);
                let (ay, ax) = (((r * block) >> lvl) as i64, ((c * block) >> lvl) as i64);
                let (centre, radius) = match d {
                    None => ((0, 0), (search_radius as i64 + (1 << lvl) - 1) >> lvl),
                    Some((x, y)) => ((2 * x, 2 * y), REFINE),
                };
                match search(&pa[lvl], ay, ax, &pg[lvl], b, centre, radius) {
                    Some((best, s)) => {
                        d = Some(best);
                        score = Some(s);
                    }
                    None => {
                        d = Some(centre);
                        score = None;
                    }
                }
            }
            let (dx, dy) = d.unwrap_or((0, 0));
            let k = r * bx + c;
            if let Some(s) = score.filter(|s| *s > MIN_NCC) {
                let (ay, ax) = ((r * block) as i64, (c * block) as i64);
                let at = |ox: i64, oy: i64| ncc(rectified, ay, ax, gt, ay + dy + oy, ax + dx + ox, block);
                // a perfect correlation is already the peak
                let (fx, fy) = if s >= 1.0 - TIE {
                    (0.0, 0.0)
                } else {
                    (parabola(at(-1, 0), s, at(1, 0)), parabola(at(0, -1), s, at(0, 1)))
                };
                flow[k] = (dx as f64 + fx, dy as f64 + fy);
                confident[k] = true;
            }
        }
    }
    let mut filtered = flow.clone();
    for r in 0..by {
        for c in 0..bx {
            if !confident[r * bx + c] {
                continue;
            }
            let mut xs = Vec::with_capacity(9);
            let mut ys = Vec::with_capacity(9);
            for rr in r.saturating_sub(1)..(r + 2).min(by) {
                for cc in c.saturating_sub(1)..(c + 2).min(bx) {
                    if confident[rr * bx + cc] {
                        xs.push(flow[rr * bx + cc].0);
                        ys.push(flow[rr * bx + cc].1);
                    }
                }
            }
            filtered[r * bx + c] = (median(xs), median(ys));
        }
    }
    let n_conf = confident.iter().filter(|c| **c).count();
    let low_confidence = 1.0 - n_conf as f64 / (by * bx) as f64;
    let ld = if n_conf == 0 {
        f64::NAN
    } else {
        filtered
            .iter()
            .zip(&confident)
            .filter(|(_, c)| **c)
            .map(|((x, y), _)| x.hypot(*y))
            .sum::<f64>()
            / n_conf as f64
    };
    Ok(LocalDistortion {
        ld,
        low_confidence,
        reliable: low_confidence <= MAX_LOW_CONFIDENCE,
        flow: filtered,
        blocks: (by, bx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize, seed: u64) -> Gray {
        // smooth random texture: sum of a few random sinusoids
        let mut r = crate::rng::seeded(seed);
        let waves: Vec<[f64; 4]> = (0..6)
            .map(|_| {
                let u = |r: &mut crate::rng::Rng, lo, hi| crate::rng::uniform(r, lo, hi);
                [u(&mut r, 0.05, 0.4), u(&mut r, 0.05, 0.4), u(&mut r, 0.0, 6.3), u(&mut r, 0.3, 1.0)]
            })
            .collect();
        let data = (0..h * w)
            .map(|k| {
                let (i, j) = ((k / w) as f64, (k % w) as f64);
                waves.iter().map(|[fx, fy, p, a]| a * (fx * j + fy * i + p).sin()).sum::<f64>()
            })
            .collect();
        Gray::new(h, w, data).unwrap()
    }

    #[test]
    fn identical_images_have_zero_distortion() {
        let a = texture(96, 96, 1);
        let r = local_distortion(&a, &a, BLOCK, SEARCH).unwrap();
        assert_eq!(r.ld, 0.0);
        assert!(r.reliable);
    }

    #[test]
    fn flat_images_are_unreliable() {
        let a = Gray::new(64, 64, vec![0.5; 64 * 64]).unwrap();
        let r = local_distortion(&a, &a, BLOCK, SEARCH).unwrap();
        assert!(!r.reliable);
        assert!(r.ld.is_nan());
    }
}
