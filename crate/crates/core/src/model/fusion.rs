//! HV fusion: directional pooling, mixed X/Y attention and sigmoid coordinate
//! gates applied back onto the horizontal and vertical line features.

use super::layers::sequence_attention;
use super::params::{Bound, Init, ModelParams, SpecList};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) const PREFIX: &str = "fuse";

/// Every intermediate map of the fusion module.
///
/// Column-pooled maps (`*_x`) are `N x C x H x 1`; row-pooled maps (`*_y`) are
/// `N x C x 1 x W` as pooled and `N x C x W x 1` once transposed into sequences.
#[derive(Clone, Debug)]
pub struct FusionState<T: Scalar> {
    pub f_h_x: Var<T>,
    pub f_h_y: Var<T>,
    pub f_v_x: Var<T>,
    pub f_v_y: Var<T>,
    /// `CAT(F_h_X, Trans(F_v_Y))` along the token axis: `N x C x (H+W) x 1`.
    pub f_mix1: Var<T>,
    /// `CAT(Trans(F_h_Y), F_v_X)` along the token axis: `N x C x (W+H) x 1`.
    pub f_mix2: Var<T>,
    pub f_mix1_att: Var<T>,
    pub f_mix2_att: Var<T>,
    /// `N x 2C x H x 1`.
    pub f_cat_x: Var<T>,
    /// `N x 2C x W x 1`.
    pub f_cat_y: Var<T>,
    pub gate_h_x: Var<T>,
    /// Broadcast-ready `N x C x 1 x W`.
    pub gate_h_y: Var<T>,
    pub gate_v_x: Var<T>,
    pub gate_v_y: Var<T>,
    pub fused_h: Var<T>,
    pub fused_v: Var<T>,
}

pub(crate) fn describe(specs: &mut SpecList, c: usize) {
    specs.attention(&format!("{PREFIX}.mix1"), c);
    specs.attention(&format!("{PREFIX}.mix2"), c);
    for branch in ["h_x", "v_x", "h_y", "v_y"] {
        specs.conv(&format!("{PREFIX}.proj_{branch}"), c, c, 1, Init::KaimingUniform);
    }
    specs.attention(&format!("{PREFIX}.x_attn"), 2 * c);
    specs.attention(&format!("{PREFIX}.y_attn"), 2 * c);
    for branch in ["h_x", "v_x", "h_y", "v_y"] {
        specs.conv(&format!("{PREFIX}.gate_{branch}"), c, c, 1, Init::KaimingUniform);
    }
}

fn conv1x1<T: Scalar>(bound: &Bound<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let w = bound.get(&format!("{PREFIX}.{name}.weight"))?;
    let b = bound.get(&format!("{PREFIX}.{name}.bias"))?;
    x.conv2d(&w, Some(&b), 1, 0)
}

/// Fuses `F_h`, `F_v` (both `N x C x S x S`) into gated `F'_h`, `F'_v`.
pub fn hv_fuse<T: Scalar>(
    f_h: &Var<T>,
    f_v: &Var<T>,
    bound: &Bound<T>,
) -> Result<(Var<T>, Var<T>, FusionState<T>)> {
    let [_, c, h, w] = f_h.shape()[..] else {
        return Err(Error::shape(format!("F_h must be N x C x H x W, got {:?}", f_h.shape())));
    };
    if f_v.shape() != f_h.shape() {
        return Err(Error::shape(format!("F_h {:?} vs F_v {:?}", f_h.shape(), f_v.shape())));
    }
    if h != w {
        return Err(Error::shape(format!("fusion needs square maps, got {h}x{w}")));
    }

    let f_h_x = f_h.adaptive_avgpool_x()?;
    let f_h_y = f_h.adaptive_avgpool_y()?;
    let f_v_y = f_v.adaptive_avgpool_y()?;
    let f_v_x = f_v.adaptive_avgpool_x()?;
    let f_mix1 = Var::concat(&[&f_h_x, &f_v_y.transpose(2, 3)?], 2)?;
    let f_mix2 = Var::concat(&[&f_h_y.transpose(2, 3)?, &f_v_x], 2)?;

    let f_mix1_att = sequence_attention(bound, &format!("{PREFIX}.mix1"), &f_mix1)?;
    let f_mix2_att = sequence_attention(bound, &format!("{PREFIX}.mix2"), &f_mix2)?;
    // split by token position: mix1 = [h_x | v_y], mix2 = [h_y | v_x]
    let [hx1, vy1] = <[Var<T>; 2]>::try_from(f_mix1_att.split(2, &[h, w])?).expect("two parts");
    let [hy1, vx1] = <[Var<T>; 2]>::try_from(f_mix2_att.split(2, &[w, h])?).expect("two parts");

    let f_cat_x =
        Var::concat(&[&conv1x1(bound, "proj_h_x", &hx1)?, &conv1x1(bound, "proj_v_x", &vx1)?], 1)?;
    let f_cat_y =
        Var::concat(&[&conv1x1(bound, "proj_h_y", &hy1)?, &conv1x1(bound, "proj_v_y", &vy1)?], 1)?;

    let x_att = sequence_attention(bound, &format!("{PREFIX}.x_attn"), &f_cat_x)?;
    let y_att = sequence_attention(bound, &format!("{PREFIX}.y_attn"), &f_cat_y)?;
    let [hx2, vx2] = <[Var<T>; 2]>::try_from(x_att.split(1, &[c, c])?).expect("two parts");
    let [hy2, vy2] = <[Var<T>; 2]>::try_from(y_att.split(1, &[c, c])?).expect("two parts");

    let gate_h_x = conv1x1(bound, "gate_h_x", &hx2)?.sigmoid()?;
    let gate_v_x = conv1x1(bound, "gate_v_x", &vx2)?.sigmoid()?;
    let gate_h_y = conv1x1(bound, "gate_h_y", &hy2)?.sigmoid()?.transpose(2, 3)?;
    let gate_v_y = conv1x1(bound, "gate_v_y", &vy2)?.sigmoid()?.transpose(2, 3)?;

    let fused_h = f_h.mul(&gate_h_x)?.mul(&gate_h_y)?;
    let fused_v = f_v.mul(&gate_v_x)?.mul(&gate_v_y)?;
    let state = FusionState {
        f_h_x,
        f_h_y,
        f_v_x,
        f_v_y,
        f_mix1,
        f_mix2,
        f_mix1_att,
        f_mix2_att,
        f_cat_x,
        f_cat_y,
        gate_h_x,
        gate_h_y,
        gate_v_x,
        gate_v_y,
        fused_h: fused_h.clone(),
        fused_v: fused_v.clone(),
    };
    Ok((fused_h, fused_v, state))
}

/// Stand-alone fusion weights, for exercising the module outside a model.
#[derive(Clone, Debug)]
pub struct FusionParams<T> {
    params: ModelParams<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn random(channels: usize, seed: u64) -> Result<Self> {
        let mut specs = SpecList::default();
        describe(&mut specs, channels);
        Ok(FusionParams { params: ModelParams::init(&specs, seed)? })
    }

    pub fn names(&self) -> Vec<String> {
        self.params.learnable_names()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.params.get(name).expect("fusion parameter name")
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.params.set(name, value)
    }

    pub fn bind_on(&self, tape: &Tape<T>) -> Bound<T> {
        self.params.bind(tape)
    }

    /// Pairs `names` with already-created vars.
    pub fn bind(names: &[String], vars: &[Var<T>]) -> Bound<T> {
        Bound::from_pairs(names.iter().cloned().zip(vars.iter().cloned()))
    }
}
