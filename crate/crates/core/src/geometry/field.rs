//! Backward maps and bilinear image resampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fractional offsets closer than this to a pixel centre are snapped onto it,
/// so sampling at exact centres reproduces the input bit for bit.
const SNAP: f64 = 1e-4;

/// Per-pixel backward map stored channel-first (`2 x H x W`): channel 0 holds
/// the normalized source x, channel 1 the source y, both in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn centre(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

impl DeformationField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroExtent(vec![2, height, width]));
        }
        if data.len() != 2 * height * width {
            return Err(Error::shape(format!(
                "field {height}x{width} needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        Ok(DeformationField { height, width, data })
    }

    /// `grid(i, j) = ((j + 0.5) / W, (i + 0.5) / H)`.
    pub fn identity(height: usize, width: usize) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; 2 * hw];
        for i in 0..height {
            for j in 0..width {
                data[i * width + j] = centre(j, width);
                data[hw + i * width + j] = centre(i, height);
            }
        }
        DeformationField { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Source point `(x, y)` of rectified pixel `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let k = i * self.width + j;
        (self.data[k], self.data[self.height * self.width + k])
    }

    /// Finite and inside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(Error::invalid(format!("field value {v} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![2, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64c(v)).collect(),
        )
    }

    /// From a `2 x H x W` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [2, h, w] => Self::new(h, w, t.data().iter().map(|v| v.to_f64c()).collect()),
            ref s => Err(Error::shape(format!("field tensor must be 2 x H x W, got {s:?}"))),
        }
    }

    /// Resized by interpolating the displacement from the identity map, which
    /// keeps an identity field exact at every size.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        let (h0, w0) = (self.height, self.width);
        let id = Self::identity(h0, w0);
        let disp: Vec<f64> = self.data.iter().zip(&id.data).map(|(a, b)| a - b).collect();
        let disp = Tensor::from_parts(vec![2, h0, w0], disp);
        let resized = resize_bilinear(&disp, height, width)?;
        let mut out = Self::identity(height, width);
        for (o, d) in out.data.iter_mut().zip(resized.data()) {
            *o += d;
        }
        Ok(out)
    }

    /// Field of a crop: the rectified grid stays the same, source coordinates
    /// are re-expressed relative to the crop window `[x0, x0+w] x [y0, y0+h]`.
    pub fn crop_renormalized(&self, x0: f64, y0: f64, w: f64, h: f64) -> Self {
        let hw = self.height * self.width;
        let mut data = self.data.clone();
        for v in &mut data[..hw] {
            *v = ((*v - x0) / w).clamp(0.0, 1.0);
        }
        for v in &mut data[hw..] {
            *v = ((*v - y0) / h).clamp(0.0, 1.0);
        }
        DeformationField { height: self.height, width: self.width, data }
    }

    /// Mean displacement from the identity, in pixels of an `height x width` image.
    pub fn mean_displacement_px(&self) -> f64 {
        let id = Self::identity(self.height, self.width);
        let hw = self.height * self.width;
        let mut total = 0.0;
        for k in 0..hw {
            let dx = (self.data[k] - id.data[k]) * self.width as f64;
            let dy = (self.data[hw + k] - id.data[hw + k]) * self.height as f64;
            total += dx.hypot(dy);
        }
        total / hw as f64
    }
}

/// Bilinear sample of channel-first `src` (`C x H x W`) at pixel coordinates
/// `(sx, sy)` (pixel centres at integers), clamped to the border.
pub(crate) fn sample_bilinear<T: Scalar>(src: &Tensor<T>, sx: f64, sy: f64, out: &mut [T]) {
    let [c, h, w] = [src.shape()[0], src.shape()[1], src.shape()[2]];
    let snap = |v: f64| if (v - v.round()).abs() < SNAP { v.round() } else { v };
    let sx = snap(sx).clamp(0.0, (w - 1) as f64);
    let sy = snap(sy).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let d = src.data();
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let base = ch * h * w;
        let v00 = d[base + y0 * w + x0];
        if fx == 0.0 && fy == 0.0 {
            *o = v00;
            continue;
        }
        let v01 = d[base + y0 * w + x1].to_f64c();
        let v10 = d[base + y1 * w + x0].to_f64c();
        let v11 = d[base + y1 * w + x1].to_f64c();
        let top = v00.to_f64c() * (1.0 - fx) + v01 * fx;
        let bottom = v10 * (1.0 - fx) + v11 * fx;
        *o = T::from_f64c(top * (1.0 - fy) + bottom * fy);
    }
}

fn chw<T: Scalar>(image: &Tensor<T>) -> Result<[usize; 3]> {
    match *image.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::shape(format!("image must be C x H x W, got {s:?}"))),
    }
}

/// Rectifies `image` (`C x H_in x W_in`) with `field`: output pixel `(i, j)` is
/// the bilinear sample at the field's source point. Output size is the field's.
pub fn resample<T: Scalar>(image: &Tensor<T>, field: &DeformationField) -> Result<Tensor<T>> {
    let [c, h, w] = chw(image)?;
    let (oh, ow) = (field.height, field.width);
    let mut out = vec![T::zero(); c * oh * ow];
    let mut px = vec![T::zero(); c];
    for i in 0..oh {
        for j in 0..ow {
            let (x, y) = field.at(i, j);
            sample_bilinear(image, x * w as f64 - 0.5, y * h as f64 - 0.5, &mut px);
            for (ch, v) in px.iter().enumerate() {
                out[(ch * oh + i) * ow + j] = *v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

/// Half-pixel-centre bilinear resize of a `C x H x W` image.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let [c, h, w] = chw(image)?;
    if height == 0 || width == 0 {
        return Err(Error::ZeroExtent(vec![c, height, width]));
    }
    let (sy, sx) = (h as f64 / height as f64, w as f64 / width as f64);
    let mut out = vec![T::zero(); c * height * width];
    let mut px = vec![T::zero(); c];
    for i in 0..height {
        for j in 0..width {
            sample_bilinear(image, (j as f64 + 0.5) * sx - 0.5, (i as f64 + 0.5) * sy - 0.5, &mut px);
            for (ch, v) in px.iter().enumerate() {
                out[(ch * height + i) * width + j] = *v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, height, width], out))
}

/// Sets every value above 0.5 to 1 and the rest to 0.
pub fn threshold<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64c(0.5);
    mask.map(|v| if v > half { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor<f32> {
        Tensor::uniform(&[3, 9, 7], 0.0, 1.0, &mut crate::rng::seeded(seed)).unwrap()
    }

    #[test]
    fn identity_resample_is_exact() {
        let img = image(1);
        assert_eq!(resample(&img, &DeformationField::identity(9, 7)).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::<f32>::full(&[1, 9, 7], 0.375).unwrap();
        let f = DeformationField::new(5, 4, (0..40).map(|k| (k as f64 * 0.37) % 1.0).collect()).unwrap();
        assert!(resample(&img, &f).unwrap().data().iter().all(|&v| v == 0.375));
    }

    #[test]
    fn identity_field_resizes_to_identity() {
        let f = DeformationField::identity(8, 8).resize(64, 48).unwrap();
        let id = DeformationField::identity(64, 48);
        let diff = f.data().iter().zip(id.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = image(2);
        assert_eq!(resize_bilinear(&img, 9, 7).unwrap(), img);
    }

    #[test]
    fn crop_renormalization() {
        let f = DeformationField::identity(4, 4).crop_renormalized(0.25, 0.0, 0.5, 1.0);
        assert_eq!(f.at(0, 1), (0.125 / 0.5 - 0.0, 0.125));
        assert_eq!(f.at(0, 0).0, 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(DeformationField::new(2, 2, vec![0.0; 7]).is_err());
        assert!(DeformationField::from_tensor(&Tensor::<f32>::zeros(&[3, 2, 2]).unwrap()).is_err());
        assert!(resample(&Tensor::<f32>::zeros(&[2, 2]).unwrap(), &DeformationField::identity(2, 2)).is_err());
    }
}
