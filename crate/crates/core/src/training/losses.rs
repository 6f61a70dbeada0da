//! Line segmentation and backward-map losses.
//!
//! Line losses act on `sigmoid(logits)` clamped to `[1e-7, 1 - 1e-7]`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
pub const ALPHA: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the reconstruction term.
    pub alpha: f64,
    /// Weighted line loss at every decoder layer (otherwise the last only).
    pub line_loss_all_layers: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: ALPHA, line_loss_all_layers: true }
    }
}

/// Loss components of one batch. Per-layer entries are indexed from layer 1;
/// lists for a disabled branch are empty.
#[derive(Clone, Debug)]
pub struct LossReport<T: Scalar> {
    pub bce_h: Vec<f64>,
    pub bce_v: Vec<f64>,
    pub line_h: Vec<f64>,
    pub line_v: Vec<f64>,
    pub line: f64,
    pub rec: f64,
    pub alpha: f64,
    /// `alpha * rec + line`, differentiable.
    pub total: Var<T>,
}

impl<T: Scalar> LossReport<T> {
    pub fn total_value(&self) -> f64 {
        self.total.value().data()[0].to_f64c()
    }
}

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: prediction {:?} vs target {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn clamped<T: Scalar>(probs: &Var<T>) -> Result<Var<T>> {
    probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy over every pixel.
pub fn bce_loss<T: Scalar>(probs: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    same_shape(probs, target, "bce_loss")?;
    let p = clamped(probs)?;
    let one_minus_p = p.neg()?.add_scalar(1.0)?;
    let one_minus_y = target.neg()?.add_scalar(1.0)?;
    let ll = target.mul(&p.log()?)?.add(&one_minus_y.mul(&one_minus_p.log()?)?)?;
    ll.mean()?.neg()
}

/// Inverse-frequency pixel weights of a binary mask: `N_neg / K` on positive
/// pixels and `N_pos / K` on negative ones, computed per image (leading axis
/// when the mask has rank 3 or more).
pub fn line_weights<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let images = if mask.ndim() >= 3 { mask.shape()[0] } else { 1 };
    let k = mask.numel() / images;
    let mut out = Vec::with_capacity(mask.numel());
    for img in mask.data().chunks(k) {
        let pos = img.iter().filter(|v| v.to_f64c() > 0.5).count();
        let neg = k - pos;
        let (wp, wn) = (neg as f64 / k as f64, pos as f64 / k as f64);
        out.extend(img.iter().map(|v| T::from_f64c(if v.to_f64c() > 0.5 { wp } else { wn })));
    }
    Tensor::from_parts(mask.shape().to_vec(), out)
}

/// Pixel-proportion weighted squared error `mean(w(y) * (p - y)^2)`.
pub fn weighted_line_loss<T: Scalar>(probs: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    same_shape(probs, target, "weighted_line_loss")?;
    let w = target.constant_like(line_weights(target.value()));
    clamped(probs)?.sub(target)?.square()?.mul(&w)?.mean()
}

/// Mean absolute difference between predicted and target backward maps.
pub fn rec_loss<T: Scalar>(pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    same_shape(pred, target, "rec_loss")?;
    pred.sub(target)?.abs()?.mean()
}

/// BCE weight of decoder layer `i` (1-based) out of `layers`: `1 / (2L - i)`.
pub fn layer_weight(layers: usize, i: usize) -> f64 {
    1.0 / (2 * layers - i) as f64
}

/// `alpha * rec + line`.
pub fn total_loss<T: Scalar>(alpha: f64, rec: &Var<T>, line: &Var<T>) -> Result<Var<T>> {
    rec.scale(alpha)?.add(line)
}

/// Per-layer parts and the aggregated line loss.
pub struct LineTotal<T> {
    pub bce_h: Vec<f64>,
    pub bce_v: Vec<f64>,
    pub line_h: Vec<f64>,
    pub line_v: Vec<f64>,
    pub total: Var<T>,
}

/// `sum_i [line_h(i) + line_v(i) + (bce_h(i) + bce_v(i)) / (2L - i)]` over the
/// branches that are present.
pub fn line_total_loss<T: Scalar>(
    h_logits: &[Var<T>],
    v_logits: &[Var<T>],
    h_mask: &Var<T>,
    v_mask: &Var<T>,
    cfg: &LossConfig,
) -> Result<LineTotal<T>> {
    let layers = h_logits.len().max(v_logits.len());
    if layers == 0 {
        return Err(Error::invalid("no line predictions"));
    }
    for (name, list) in [("horizontal", h_logits), ("vertical", v_logits)] {
        if !list.is_empty() && list.len() != layers {
            return Err(Error::invalid(format!(
                "{name} branch has {} layers, expected {layers}",
                list.len()
            )));
        }
    }
    let mut out = LineTotal {
        bce_h: Vec::new(),
        bce_v: Vec::new(),
        line_h: Vec::new(),
        line_v: Vec::new(),
        total: h_mask.constant_like(Tensor::scalar(T::zero())),
    };
    for (logits, mask, bce_log, line_log) in [
        (h_logits, h_mask, &mut out.bce_h, &mut out.line_h),
        (v_logits, v_mask, &mut out.bce_v, &mut out.line_v),
    ] {
        for (idx, logit) in logits.iter().enumerate() {
            let i = idx + 1;
            let probs = logit.sigmoid()?;
            let bce = bce_loss(&probs, mask)?;
            bce_log.push(bce.value().data()[0].to_f64c());
            let mut term = bce.scale(layer_weight(layers, i))?;
            if cfg.line_loss_all_layers || i == layers {
                let line = weighted_line_loss(&probs, mask)?;
                line_log.push(line.value().data()[0].to_f64c());
                term = term.add(&line)?;
            }
            out.total = out.total.add(&term)?;
        }
    }
    Ok(out)
}

/// Every loss term for one forward pass against its targets.
pub fn compute_losses<T: Scalar>(
    output: &ModelOutput<T>,
    h_mask: &Var<T>,
    v_mask: &Var<T>,
    field: &Var<T>,
    cfg: &LossConfig,
) -> Result<LossReport<T>> {
    let line = line_total_loss(&output.h_logits, &output.v_logits, h_mask, v_mask, cfg)?;
    let rec = rec_loss(&output.field, field)?;
    let total = total_loss(cfg.alpha, &rec, &line.total)?;
    Ok(LossReport {
        bce_h: line.bce_h,
        bce_v: line.bce_v,
        line_h: line.line_h,
        line_v: line.line_v,
        line: line.total.value().data()[0].to_f64c(),
        rec: rec.value().data()[0].to_f64c(),
        alpha: cfg.alpha,
        total,
    })
}

/// Random binary mask with roughly a quarter of pixels set.
pub fn random_mask<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng::seeded(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng::uniform(&mut r, 0.0, 1.0) < 0.25 { T::one() } else { T::zero() })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn var(t: &Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var<f64> {
        t.leaf(Tensor::new(shape, data).unwrap())
    }

    fn value(v: &Var<f64>) -> f64 {
        v.value().data()[0]
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let t = Tape::new();
        let p = var(&t, &[2, 2], vec![0.5; 4]);
        let y = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!((value(&bce_loss(&p, &y).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_are_near_zero() {
        let t = Tape::new();
        let mask = Tensor::new(&[4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = t.leaf(mask.clone());
        let y = t.constant(mask);
        assert!(value(&bce_loss(&p, &y).unwrap()) < 2e-6);
        assert!(value(&weighted_line_loss(&p, &y).unwrap()) < 1e-12);
        assert_eq!(value(&rec_loss(&p, &y).unwrap()), 0.0);
    }

    #[test]
    fn line_loss_hand_value() {
        let t = Tape::new();
        let p = var(&t, &[4], vec![0.0; 4]);
        let y = t.constant(Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        // clamping moves the prediction by 1e-7, far below the tolerance
        assert!((value(&weighted_line_loss(&p, &y).unwrap()) - 0.1875).abs() < 1e-6);
    }

    #[test]
    fn rare_class_pixels_get_larger_gradients() {
        let t = Tape::new();
        let p = var(&t, &[4], vec![0.5; 4]);
        let y = t.constant(Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        weighted_line_loss(&p, &y).unwrap().backward().unwrap();
        let g = p.grad().unwrap();
        assert!(g.data()[0].abs() > g.data()[1].abs());
    }

    #[test]
    fn degenerate_masks_weight_the_absent_class_zero() {
        let w = line_weights(&Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap());
        assert!(w.data().iter().all(|&v| v == 0.0));
        let w = line_weights(&Tensor::<f64>::ones(&[1, 1, 2, 2]).unwrap());
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_are_per_image() {
        let mask = Tensor::new(&[2, 1, 1, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(line_weights(&mask).data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn layer_weights() {
        let w: Vec<f64> = (1..=4).map(|i| layer_weight(4, i)).collect();
        assert_eq!(w, vec![1.0 / 7.0, 1.0 / 6.0, 1.0 / 5.0, 1.0 / 4.0]);
        assert_eq!(layer_weight(1, 1), 1.0);
    }

    #[test]
    fn rec_of_constant_offset() {
        let t = Tape::new();
        let g = Tensor::<f64>::randn(&[2, 3, 3], 1).unwrap();
        let p = t.leaf(g.map(|v| v + 0.1));
        assert!((value(&rec_loss(&p, &t.constant(g)).unwrap()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_combines_with_alpha() {
        let t = Tape::<f64>::new();
        let rec = t.leaf(Tensor::scalar(0.2));
        let line = t.leaf(Tensor::scalar(0.3));
        assert!((value(&total_loss(5.0, &rec, &line).unwrap()) - 1.3).abs() < 1e-12);
        assert_eq!(value(&total_loss(0.0, &rec, &line).unwrap()), 0.3);
    }

    #[test]
    fn line_total_checks_lengths() {
        let t = Tape::<f64>::new();
        let z = t.leaf(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let m = t.constant(Tensor::zeros(&[1, 1, 2, 2]).unwrap());
        let cfg = LossConfig::default();
        assert!(line_total_loss(&[z.clone(), z.clone()], &[z.clone()], &m, &m, &cfg).is_err());
        assert!(line_total_loss(&[z.clone()], &[], &m, &m, &cfg).is_ok());
    }
}
