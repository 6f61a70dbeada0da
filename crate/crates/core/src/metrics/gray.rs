use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-channel image in `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl Gray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ZeroExtent(vec![height, width]));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} image needs {} values, got {}", height * width, data.len())));
        }
        Ok(Gray { height, width, data })
    }

    /// From a `1 x H x W` or `3 x H x W` image; colour goes through luma.
    pub fn from_tensor<T: Scalar>(image: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match *image.shape() {
            [c, h, w] if c == 1 || c == 3 => (c, h, w),
            [h, w] => (1, h, w),
            ref s => return Err(Error::shape(format!("expected 1 or 3 channel image, got {s:?}"))),
        };
        let d = image.data();
        let hw = h * w;
        let data = (0..hw)
            .map(|k| {
                if c == 1 {
                    d[k].to_f64c()
                } else {
                    (0..3).map(|ch| LUMA[ch] * d[ch * hw + k].to_f64c()).sum()
                }
            })
            .collect();
        Gray::new(h, w, data)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    /// 2x2 box average, dropping an odd trailing row or column.
    pub fn downsample(&self) -> Gray {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let s = self.at(2 * i, 2 * j) + self.at(2 * i, 2 * j + 1) + self.at(2 * i + 1, 2 * j) + self.at(2 * i + 1, 2 * j + 1);
                data.push(s / 4.0);
            }
        }
        Gray { height: h, width: w, data }
    }
}
