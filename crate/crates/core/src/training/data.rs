use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::{resize_bilinear, threshold, WarpedSample};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// One sample cropped and resized to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Tensor<f32>,
    pub field: Tensor<f32>,
    pub h_mask: Tensor<f32>,
    pub v_mask: Tensor<f32>,
}

/// Examples stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image: Tensor<f32>,
    pub field: Tensor<f32>,
    pub h_mask: Tensor<f32>,
    pub v_mask: Tensor<f32>,
}

fn crop_chw(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let [c, th, tw] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    debug_assert!(y0 + h <= th && x0 + w <= tw);
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let row = (ch * th + y0 + i) * tw + x0;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Square-aspect random crop covering `[crop_min_area, 1]` of the sample,
/// resized to `size`. The field's source coordinates are re-expressed in the
/// crop window; masks are re-thresholded after resizing.
pub fn prepare(sample: &WarpedSample, size: usize, crop_min_area: f64, rng: &mut Rng) -> Result<Example> {
    let [_, h, w] = [sample.image.shape()[0], sample.image.shape()[1], sample.image.shape()[2]];
    let area = rng::uniform(rng, crop_min_area, 1.0);
    let side = area.sqrt();
    let (ch, cw) = (((h as f64 * side).round() as usize).clamp(1, h), ((w as f64 * side).round() as usize).clamp(1, w));
    let y0 = (rng::uniform(rng, 0.0, 1.0) * (h - ch + 1) as f64) as usize;
    let x0 = (rng::uniform(rng, 0.0, 1.0) * (w - cw + 1) as f64) as usize;
    let (y0, x0) = (y0.min(h - ch), x0.min(w - cw));
    let fit = |t: &Tensor<f32>| resize_bilinear(&crop_chw(t, y0, x0, ch, cw), size, size);
    let field = sample
        .field
        .crop_renormalized(x0 as f64 / w as f64, y0 as f64 / h as f64, cw as f64 / w as f64, ch as f64 / h as f64)
        .resize(size, size)?;
    Ok(Example {
        image: fit(&sample.image)?,
        field: field.to_tensor(),
        h_mask: threshold(&fit(&sample.h_mask)?),
        v_mask: threshold(&fit(&sample.v_mask)?),
    })
}

/// Whole sample resized to `size`, no crop.
pub fn prepare_full(sample: &WarpedSample, size: usize) -> Result<Example> {
    let fit = |t: &Tensor<f32>| resize_bilinear(t, size, size);
    Ok(Example {
        image: fit(&sample.image)?,
        field: sample.field.resize(size, size)?.to_tensor(),
        h_mask: threshold(&fit(&sample.h_mask)?),
        v_mask: threshold(&fit(&sample.v_mask)?),
    })
}

fn stack(parts: Vec<&Tensor<f32>>) -> Result<Tensor<f32>> {
    let first = parts.first().ok_or_else(|| Error::invalid("empty batch"))?.shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in &parts {
        if p.shape() != first.as_slice() {
            return Err(Error::shape(format!("batch mixes {:?} and {:?}", first, p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend(first);
    Ok(Tensor::from_parts(shape, data))
}

pub fn collate(examples: &[Example]) -> Result<Batch> {
    Ok(Batch {
        image: stack(examples.iter().map(|e| &e.image).collect())?,
        field: stack(examples.iter().map(|e| &e.field).collect())?,
        h_mask: stack(examples.iter().map(|e| &e.h_mask).collect())?,
        v_mask: stack(examples.iter().map(|e| &e.v_mask).collect())?,
    })
}

/// Visiting order for `epoch`: a seeded Fisher-Yates shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derived(seed, 7, epoch as u64));
    order
}
