//! Dewarping arbitrary images with a trained model.

use crate::error::{Error, Result};
use crate::geometry::{resample, resize_bilinear, DeformationField};
use crate::model::Model;
use crate::tensor::Tensor;

/// Result of dewarping one image.
pub struct Dewarped {
    /// Same channel count and size as the input.
    pub rectified: Tensor<f32>,
    /// Backward map at the input's resolution.
    pub field: DeformationField,
    /// Per-layer line probabilities at the network input size, `1 x S x S`.
    pub h_lines: Vec<Tensor<f32>>,
    pub v_lines: Vec<Tensor<f32>>,
}

fn sigmoid(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|x| 1.0 / (1.0 + (-x).exp()))
}

/// Resizes `image` (`1 x H x W` or `3 x H x W`) to the network input, predicts
/// the backward map, upsamples it to `H x W` and resamples the original.
pub fn dewarp(model: &Model<f32>, image: &Tensor<f32>) -> Result<Dewarped> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        ref s => return Err(Error::shape(format!("expected a 1 or 3 channel image, got {s:?}"))),
    };
    let rgb = if c == 3 {
        image.clone()
    } else {
        Tensor::from_parts(vec![3, h, w], image.data().repeat(3))
    };
    let s = model.config().input_size;
    let x = resize_bilinear(&rgb, s, s)?.reshape(&[1, 3, s, s])?;
    let out = model.infer(&x)?;
    let field = DeformationField::from_tensor(&out.field.value().reshape(&[2, s, s])?)?
        .resize(h, w)?
        .clamped();
    let lines = |v: &[crate::autodiff::Var<f32>]| -> Result<Vec<Tensor<f32>>> {
        v.iter().map(|l| sigmoid(l.value()).reshape(&[1, s, s])).collect()
    };
    Ok(Dewarped {
        rectified: resample(image, &field)?,
        field,
        h_lines: lines(&out.h_logits)?,
        v_lines: lines(&out.v_logits)?,
    })
}
