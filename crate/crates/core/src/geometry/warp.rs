//! Analytic page warps and their numerical inverse.
//!
//! The forward map takes a normalized point of the distorted image to the flat
//! page: `f(x, y) = P(x + a_x sin(2πk y + φ), y + a_y sin(2πm x + ψ))`, where `P`
//! is the homography sending the unit square's corners to the jittered corners.

use std::f64::consts::TAU;

use rayon::prelude::*;

use super::field::DeformationField;
use crate::error::{Error, Result};
use crate::rng;

/// Largest sinusoid amplitude a [`WarpParams`] may carry.
pub const MAX_AMPLITUDE: f64 = 0.08;
/// Largest corner offset per axis.
pub const MAX_CORNER_JITTER: f64 = 0.05;
/// Side of the Jacobian probe grid.
pub const PROBE_GRID: usize = 32;
pub const INVERT_TOL: f64 = 1e-6;
pub const INVERT_MAX_ITER: usize = 100;
pub const INVERT_DAMPING: f64 = 0.8;
/// Fraction of pixels allowed to miss the tolerance before a sample is rejected.
pub const MAX_UNCONVERGED: f64 = 1e-3;

/// Unit-square corners in the order `(0,0), (1,0), (1,1), (0,1)`.
const SQUARE: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct WarpParams {
    pub a_x: f64,
    pub a_y: f64,
    /// Cycles of the x displacement along y.
    pub k: u32,
    /// Cycles of the y displacement along x.
    pub m: u32,
    pub phi: f64,
    pub psi: f64,
    /// Offsets added to the unit-square corners, same order as the corners.
    pub corners: [[f64; 2]; 4],
    pub background: u32,
    pub seed: u64,
}

impl WarpParams {
    pub fn identity() -> Self {
        WarpParams {
            a_x: 0.0,
            a_y: 0.0,
            k: 1,
            m: 1,
            phi: 0.0,
            psi: 0.0,
            corners: [[0.0; 2]; 4],
            background: 0,
            seed: 0,
        }
    }

    /// Random warp for synthesis. Corners move outward by 0.03 to 0.05 and the
    /// amplitudes stay at or below 0.025, so the page lands strictly inside the
    /// frame with background around it.
    pub fn sample(seed: u64) -> Self {
        let mut r = rng::derived(seed, 2, 0);
        let mut u = |lo: f64, hi: f64| rng::uniform(&mut r, lo, hi);
        let a_x = u(0.0, 0.025);
        let a_y = u(0.0, 0.025);
        let k = 1 + (u(0.0, 3.0) as u32).min(2);
        let m = 1 + (u(0.0, 3.0) as u32).min(2);
        let phi = u(0.0, TAU);
        let psi = u(0.0, TAU);
        let mut corners = [[0.0; 2]; 4];
        for (c, sq) in corners.iter_mut().zip(SQUARE) {
            for axis in 0..2 {
                let outward = if sq[axis] == 0.0 { -1.0 } else { 1.0 };
                c[axis] = outward * u(0.03, MAX_CORNER_JITTER);
            }
        }
        let background = u(0.0, 4.0) as u32;
        WarpParams { a_x, a_y, k, m, phi, psi, corners, background: background.min(3), seed }
    }

    /// Parameter bounds and injectivity (positive Jacobian on the probe grid).
    pub fn validate(&self) -> Result<()> {
        let amp_ok = |a: f64| (0.0..=MAX_AMPLITUDE).contains(&a);
        if !amp_ok(self.a_x) || !amp_ok(self.a_y) {
            return Err(Error::invalid(format!(
                "amplitudes ({}, {}) outside [0, {MAX_AMPLITUDE}]",
                self.a_x, self.a_y
            )));
        }
        if !(1..=3).contains(&self.k) || !(1..=3).contains(&self.m) {
            return Err(Error::invalid(format!("frequencies ({}, {}) outside 1..=3", self.k, self.m)));
        }
        if self.corners.iter().flatten().any(|c| c.abs() > MAX_CORNER_JITTER || !c.is_finite()) {
            return Err(Error::invalid(format!("corner jitter {:?} exceeds {MAX_CORNER_JITTER}", self.corners)));
        }
        let map = ForwardMap::new(self)?;
        for i in 0..PROBE_GRID {
            for j in 0..PROBE_GRID {
                let x = (j as f64 + 0.5) / PROBE_GRID as f64;
                let y = (i as f64 + 0.5) / PROBE_GRID as f64;
                let det = map.jacobian_det(x, y);
                if !(det > 0.0) {
                    return Err(Error::invalid(format!(
                        "warp folds: Jacobian determinant {det:.3e} at ({x:.3}, {y:.3})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `key=value` lines for bundle metadata.
    pub fn to_meta(&self) -> String {
        let c = &self.corners;
        format!(
            "a_x={:e}\na_y={:e}\nk={}\nm={}\nphi={:e}\npsi={:e}\ncorners={:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\nbackground={}\nseed={}\n",
            self.a_x, self.a_y, self.k, self.m, self.phi, self.psi,
            c[0][0], c[0][1], c[1][0], c[1][1], c[2][0], c[2][1], c[3][0], c[3][1],
            self.background, self.seed
        )
    }
}

/// Projective map given by its 3x3 matrix (row-major, last entry 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// The homography taking the unit-square corners to `targets`.
    pub fn from_square(targets: &[[f64; 2]; 4]) -> Result<Self> {
        let mut a = [[0.0; 9]; 8];
        for (r, (s, t)) in SQUARE.iter().zip(targets).enumerate() {
            let (x, y, u, v) = (s[0], s[1], t[0], t[1]);
            a[2 * r] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * r + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve8(a).ok_or_else(|| Error::invalid(format!("degenerate corners {targets:?}")))?;
        Ok(Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
    }
}

/// Gaussian elimination with partial pivoting on an augmented 8x9 system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Some(x)
}

/// Forward map with its homography precomputed.
#[derive(Clone, Debug)]
pub struct ForwardMap {
    params: WarpParams,
    homography: Homography,
}

impl ForwardMap {
    pub fn new(params: &WarpParams) -> Result<Self> {
        let mut targets = SQUARE;
        for (t, d) in targets.iter_mut().zip(&params.corners) {
            t[0] += d[0];
            t[1] += d[1];
        }
        let homography = if params.corners == [[0.0; 2]; 4] {
            Homography::IDENTITY
        } else {
            Homography::from_square(&targets)?
        };
        Ok(ForwardMap { params: params.clone(), homography })
    }

    /// Distorted-image point to flat-page point.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = &self.params;
        let sx = x + p.a_x * (TAU * p.k as f64 * y + p.phi).sin();
        let sy = y + p.a_y * (TAU * p.m as f64 * x + p.psi).sin();
        self.homography.apply(sx, sy)
    }

    /// Jacobian determinant by central differences.
    pub fn jacobian_det(&self, x: f64, y: f64) -> f64 {
        let h = 1e-5;
        let (xp, yp) = self.apply(x + h, y);
        let (xm, ym) = self.apply(x - h, y);
        let (xq, yq) = self.apply(x, y + h);
        let (xn, yn) = self.apply(x, y - h);
        let (dxdx, dydx) = ((xp - xm) / (2.0 * h), (yp - ym) / (2.0 * h));
        let (dxdy, dydy) = ((xq - xn) / (2.0 * h), (yq - yn) / (2.0 * h));
        dxdx * dydy - dxdy * dydx
    }

    /// Solves `f(q) = p` by `q <- q - damping * (f(q) - p)` from `q = p`.
    /// Returns the last iterate and whether the residual met `tol`.
    pub fn solve(&self, p: (f64, f64), tol: f64, max_iter: usize) -> ((f64, f64), bool) {
        let mut q = p;
        for _ in 0..=max_iter {
            let (fx, fy) = self.apply(q.0, q.1);
            let (rx, ry) = (fx - p.0, fy - p.1);
            if rx.abs().max(ry.abs()) < tol {
                return (q, true);
            }
            q = (q.0 - INVERT_DAMPING * rx, q.1 - INVERT_DAMPING * ry);
        }
        (q, false)
    }
}

/// Distorted-to-flat map of `params` at one point.
pub fn forward_map(params: &WarpParams, x: f64, y: f64) -> Result<(f64, f64)> {
    Ok(ForwardMap::new(params)?.apply(x, y))
}

/// Backward map of an `height x width` rectified image: entry `(i, j)` is the
/// distorted-image point that the forward map sends to pixel centre `(i, j)`.
pub fn invert_forward_map(
    params: &WarpParams,
    height: usize,
    width: usize,
    tol: f64,
    max_iter: usize,
) -> Result<DeformationField> {
    let map = ForwardMap::new(params)?;
    let rows: Vec<(Vec<(f64, f64)>, usize)> = (0..height)
        .into_par_iter()
        .map(|i| {
            let y = (i as f64 + 0.5) / height as f64;
            let mut failed = 0;
            let row = (0..width)
                .map(|j| {
                    let x = (j as f64 + 0.5) / width as f64;
                    let (q, ok) = map.solve((x, y), tol, max_iter);
                    failed += usize::from(!ok);
                    q
                })
                .collect();
            (row, failed)
        })
        .collect();
    let failed: usize = rows.iter().map(|r| r.1).sum();
    let total = height * width;
    if failed as f64 > MAX_UNCONVERGED * total as f64 {
        return Err(Error::Inversion(format!(
            "{failed} of {total} pixels did not converge within {max_iter} iterations"
        )));
    }
    let hw = height * width;
    let mut data = vec![0.0; 2 * hw];
    for (i, (row, _)) in rows.into_iter().enumerate() {
        for (j, (qx, qy)) in row.into_iter().enumerate() {
            data[i * width + j] = qx.clamp(0.0, 1.0);
            data[hw + i * width + j] = qy.clamp(0.0, 1.0);
        }
    }
    DeformationField::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_params_are_identity() {
        let map = ForwardMap::new(&WarpParams::identity()).unwrap();
        assert_eq!(map.apply(0.3, 0.7), (0.3, 0.7));
    }

    #[test]
    fn homography_hits_corners() {
        let t = [[-0.04, -0.03], [1.05, -0.02], [1.03, 1.04], [-0.05, 1.01]];
        let h = Homography::from_square(&t).unwrap();
        for (s, t) in SQUARE.iter().zip(&t) {
            let (u, v) = h.apply(s[0], s[1]);
            assert!((u - t[0]).abs() < 1e-12 && (v - t[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_params_are_valid() {
        for seed in 0..20 {
            WarpParams::sample(seed).validate().unwrap();
        }
    }

    #[test]
    fn folding_warp_is_rejected() {
        let p = WarpParams { a_x: 0.08, a_y: 0.08, k: 3, m: 3, ..WarpParams::identity() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn inverse_of_identity_is_identity_field() {
        let f = invert_forward_map(&WarpParams::identity(), 8, 6, INVERT_TOL, INVERT_MAX_ITER).unwrap();
        assert_eq!(f, DeformationField::identity(8, 6));
    }

    #[test]
    fn residual_is_below_tolerance() {
        let p = WarpParams::sample(3);
        let field = invert_forward_map(&p, 24, 24, INVERT_TOL, INVERT_MAX_ITER).unwrap();
        let map = ForwardMap::new(&p).unwrap();
        for i in 0..24 {
            for j in 0..24 {
                let (qx, qy) = field.at(i, j);
                let (fx, fy) = map.apply(qx, qy);
                let (px, py) = ((j as f64 + 0.5) / 24.0, (i as f64 + 0.5) / 24.0);
                assert!((fx - px).abs().max((fy - py).abs()) < 1e-6);
            }
        }
    }

    #[test]
    fn meta_lists_every_parameter() {
        let meta = WarpParams::sample(1).to_meta();
        for key in ["a_x=", "a_y=", "k=", "m=", "phi=", "psi=", "corners=", "background=", "seed=1"] {
            assert!(meta.contains(key), "{key}");
        }
    }
}
