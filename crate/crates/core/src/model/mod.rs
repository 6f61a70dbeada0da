//! The dual-decoder line segmentation network.
//!
//! A shared five-stage encoder feeds `l` residual self-attention blocks, then
//! two UNet-style decoders (horizontal and vertical lines) with a 1x1 line head
//! per layer. Each decoder's four outputs are resized to `S/8`, concatenated and
//! projected to `F_h` / `F_v`, which the HV fusion module gates before the flow
//! head predicts the backward map.

mod config;
mod fusion;
mod layers;
mod params;

use std::collections::BTreeMap;

pub use config::{
    ModelConfig, Variant, ATTENTION_LAYERS, DECODER_CHANNELS, ENCODER_CHANNELS, FUSION_CHANNELS,
    INPUT_SIZE, MIN_CHANNELS,
};
pub use fusion::{hv_fuse, FusionParams, FusionState};
pub use params::{Bound, Init, ModelParams, ParamSpec};

pub use crate::autodiff::BnMode as Mode;
use crate::autodiff::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use layers::{positional_encoding, self_attention, Ctx};
use params::SpecList;

/// Line branch of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    H,
    V,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::H => "dec_h",
            Branch::V => "dec_v",
        }
    }

    fn agg(self) -> &'static str {
        match self {
            Branch::H => "agg_h",
            Branch::V => "agg_v",
        }
    }
}

fn branches(variant: Variant) -> Vec<Branch> {
    let mut out = Vec::new();
    if variant.has_h() {
        out.push(Branch::H);
    }
    if variant.has_v() {
        out.push(Branch::V);
    }
    out
}

fn describe(config: &ModelConfig) -> SpecList {
    let mut s = SpecList::default();
    let enc = config.encoder_channels;
    let dec = config.decoder_channels;
    let mut cin = 3;
    for (i, &c) in enc.iter().enumerate() {
        s.conv_bn(&format!("enc.{i}.a"), cin, c, 3);
        s.conv_bn(&format!("enc.{i}.b"), c, c, 3);
        cin = c;
    }
    for j in 0..config.attention_layers {
        s.attention(&format!("bott.{j}.attn"), enc[4]);
        s.conv_bn(&format!("bott.{j}.ffn"), enc[4], enc[4], 1);
    }
    for branch in branches(config.variant) {
        let p = branch.prefix();
        let mut prev = enc[4];
        for (i, &d) in dec.iter().enumerate() {
            s.conv_bn(&format!("{p}.{i}.a"), prev + enc[3 - i], d, 3);
            s.conv_bn(&format!("{p}.{i}.b"), d, d, 3);
            s.conv(&format!("{p}.{i}.head"), d, 1, 1, Init::KaimingUniform);
            prev = d;
        }
        s.conv_bn(branch.agg(), dec.iter().sum(), config.fusion_channels, 3);
    }
    if config.variant.fuses() {
        fusion::describe(&mut s, config.fusion_channels);
    }
    let flow_in = config.fusion_channels * branches(config.variant).len();
    let hid = config.flow_hidden();
    s.conv_bn("flow.a", flow_in, hid, 3);
    s.conv_bn("flow.b", hid, hid, 3);
    s.conv("flow.proj", hid, 2, 1, Init::ScaledKaiming(0.1));
    s.conv("flow.refine", 2, 2, 3, Init::IdentityKernel);
    s
}

/// Parameter names, shapes and initializers implied by `config`.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    describe(config).params
}

/// Batch-norm layer names and channel counts implied by `config`.
pub fn norm_specs(config: &ModelConfig) -> Vec<(String, usize)> {
    describe(config).norms
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput<T: Scalar> {
    /// `E1..E5`.
    pub encoder: Vec<Var<T>>,
    pub bottleneck: Var<T>,
    /// `D1..D4` of each decoder (empty when the branch is disabled).
    pub h_decoder: Vec<Var<T>>,
    pub v_decoder: Vec<Var<T>>,
    /// Per-layer line logits at input resolution, `N x 1 x S x S`.
    pub h_logits: Vec<Var<T>>,
    pub v_logits: Vec<Var<T>>,
    pub f_h: Option<Var<T>>,
    pub f_v: Option<Var<T>>,
    pub fusion: Option<FusionState<T>>,
    /// Predicted backward map `N x 2 x S x S` in `(0, 1)`.
    pub field: Var<T>,
}

/// Output plus the batch-norm statistics a training-mode pass produced.
pub struct Forward<T: Scalar> {
    pub output: ModelOutput<T>,
    pub stats: BTreeMap<String, RunningStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ModelParams<T>,
}

/// `logit` of the identity backward map, `1 x 2 x S x S`.
fn identity_logits<T: Scalar>(s: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * s * s);
    for ch in 0..2 {
        for i in 0..s {
            for j in 0..s {
                let u = (if ch == 0 { j } else { i } as f64 + 0.5) / s as f64;
                data.push(T::from_f64c((u / (1.0 - u)).ln()));
            }
        }
    }
    Tensor::from_parts(vec![1, 2, s, s], data)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&describe(&config), seed)?;
        Ok(Model { config, params })
    }

    /// Wraps loaded parameters, refusing any shape the config does not imply.
    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.validate(&describe(&config))?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// Binds the parameters onto `image`'s tape and runs the network.
    pub fn forward(&self, image: &Var<T>, mode: Mode) -> Result<(Forward<T>, Bound<T>)> {
        let bound = self.params.bind(image.tape());
        let fwd = self.forward_with(image, &bound, mode)?;
        Ok((fwd, bound))
    }

    /// Eval-mode pass that records nothing.
    pub fn infer(&self, image: &Tensor<T>) -> Result<ModelOutput<T>> {
        let tape = Tape::no_grad();
        let x = tape.constant(image.clone());
        Ok(self.forward(&x, Mode::Eval)?.0.output)
    }

    /// Folds running statistics from a training-mode pass into the model.
    pub fn apply_stats(&mut self, stats: BTreeMap<String, RunningStats<T>>) {
        self.params.stats_mut().extend(stats);
    }

    /// Runs the network with parameters taken from `bound`.
    pub fn forward_with(&self, image: &Var<T>, bound: &Bound<T>, mode: Mode) -> Result<Forward<T>> {
        let cfg = &self.config;
        let s = cfg.input_size;
        match image.shape() {
            [_, 3, h, w] if *h == s && *w == s => {}
            other => {
                return Err(Error::shape(format!("image must be N x 3 x {s} x {s}, got {other:?}")))
            }
        }
        let ctx = Ctx::new(bound, self.params.stats(), mode);

        let mut encoder = Vec::with_capacity(5);
        let mut x = image.clone();
        for i in 0..5 {
            if i > 0 {
                x = x.maxpool2d(2, 2)?;
            }
            x = ctx.conv_bn_relu(&format!("enc.{i}.a"), &x)?;
            x = ctx.conv_bn_relu(&format!("enc.{i}.b"), &x)?;
            encoder.push(x.clone());
        }

        let bottleneck = self.bottleneck(&ctx, &encoder[4])?;

        let mut h = None;
        let mut v = None;
        for branch in branches(cfg.variant) {
            let out = self.decoder(&ctx, branch, &bottleneck, &encoder)?;
            match branch {
                Branch::H => h = Some(out),
                Branch::V => v = Some(out),
            }
        }

        let (h_decoder, h_logits, f_h) = split3(h);
        let (v_decoder, v_logits, f_v) = split3(v);
        let mut fusion = None;
        let head_in = match (&f_h, &f_v) {
            (Some(fh), Some(fv)) if cfg.variant.fuses() => {
                let (fh2, fv2, state) = hv_fuse(fh, fv, bound)?;
                fusion = Some(state);
                Var::concat(&[&fh2, &fv2], 1)?
            }
            (Some(fh), Some(fv)) => Var::concat(&[fh, fv], 1)?,
            (Some(f), None) | (None, Some(f)) => f.clone(),
            (None, None) => unreachable!("every variant keeps a branch"),
        };

        let y = ctx.conv_bn_relu("flow.a", &head_in)?;
        let y = ctx.conv_bn_relu("flow.b", &y)?;
        let y = ctx.conv("flow.proj", &y)?.bilinear_resize(s, s)?;
        let y = ctx.conv("flow.refine", &y)?;
        let field = y.add(&y.constant_like(identity_logits(s)))?.sigmoid()?;

        let output = ModelOutput {
            encoder,
            bottleneck,
            h_decoder,
            v_decoder,
            h_logits,
            v_logits,
            f_h,
            f_v,
            fusion,
            field,
        };
        Ok(Forward { output, stats: ctx.updated.into_inner() })
    }

    fn bottleneck(&self, ctx: &Ctx<'_, T>, e5: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = e5.shape()[..] else { unreachable!("encoder output is 4-D") };
        let position = self
            .config
            .positional_encoding
            .then(|| e5.constant_like(positional_encoding(h, w, c)));
        let mut x = e5.clone();
        for j in 0..self.config.attention_layers {
            let tokens = x.reshape(&[n, c, h * w])?.transpose(1, 2)?;
            let tokens = self_attention(ctx.bound, &format!("bott.{j}.attn"), &tokens, position.as_ref())?;
            x = tokens.transpose(1, 2)?.reshape(&[n, c, h, w])?;
            x = x.add(&ctx.conv_bn_relu(&format!("bott.{j}.ffn"), &x)?)?;
        }
        Ok(x)
    }

    fn decoder(
        &self,
        ctx: &Ctx<'_, T>,
        branch: Branch,
        bottleneck: &Var<T>,
        encoder: &[Var<T>],
    ) -> Result<DecoderOut<T>> {
        let p = branch.prefix();
        let s = self.config.input_size;
        let mut layers = Vec::with_capacity(4);
        let mut logits = Vec::with_capacity(4);
        let mut x = bottleneck.clone();
        for i in 0..4 {
            let skip = &encoder[3 - i];
            let up = x.bilinear_resize(skip.shape()[2], skip.shape()[3])?;
            x = Var::concat(&[&up, skip], 1)?;
            x = ctx.conv_bn_relu(&format!("{p}.{i}.a"), &x)?;
            x = ctx.conv_bn_relu(&format!("{p}.{i}.b"), &x)?;
            logits.push(ctx.conv(&format!("{p}.{i}.head"), &x)?.bilinear_resize(s, s)?);
            layers.push(x.clone());
        }
        let f = self.config.fusion_size();
        let resized = layers
            .iter()
            .map(|d| d.bilinear_resize(f, f))
            .collect::<Result<Vec<_>>>()?;
        let cat = Var::concat(&resized.iter().collect::<Vec<_>>(), 1)?;
        let fused = ctx.conv_bn_relu(branch.agg(), &cat)?;
        Ok((layers, logits, fused))
    }
}

type DecoderOut<T> = (Vec<Var<T>>, Vec<Var<T>>, Var<T>);

fn split3<T: Scalar>(out: Option<DecoderOut<T>>) -> (Vec<Var<T>>, Vec<Var<T>>, Option<Var<T>>) {
    match out {
        Some((d, l, f)) => (d, l, Some(f)),
        None => (Vec::new(), Vec::new(), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::toy(32, 8)
    }

    fn image(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[n, 3, s, s], 0.0, 1.0, &mut crate::rng::seeded(seed)).unwrap()
    }

    #[test]
    fn toy_shapes() {
        let m = Model::<f64>::new(ModelConfig::toy(64, 8), 0).unwrap();
        let tape = Tape::no_grad();
        let x = tape.constant(image(1, 64, 1));
        let out = m.forward(&x, Mode::Train).unwrap().0.output;
        let sizes: Vec<_> = out.encoder.iter().map(|e| e.shape().to_vec()).collect();
        assert_eq!(sizes[4], vec![1, 56, 4, 4]);
        assert_eq!(out.bottleneck.shape(), out.encoder[4].shape());
        assert_eq!(out.f_h.as_ref().unwrap().shape(), [1, 56, 8, 8]);
        assert_eq!(out.field.shape(), [1, 2, 64, 64]);
        for l in out.h_logits.iter().chain(&out.v_logits) {
            assert_eq!(l.shape(), [1, 1, 64, 64]);
        }
    }

    #[test]
    fn initial_field_is_close_to_identity() {
        let m = Model::<f64>::new(toy(), 4).unwrap();
        let tape = Tape::no_grad();
        let out = m.forward(&tape.constant(image(2, 32, 2)), Mode::Train).unwrap().0.output;
        let id = identity_logits::<f64>(32).map(|z| 1.0 / (1.0 + (-z).exp()));
        let field = out.field.value();
        let mut worst: f64 = 0.0;
        for (k, v) in field.data().iter().enumerate() {
            worst = worst.max((v - id.data()[k % id.numel()]).abs());
        }
        assert!(worst < 0.1, "initial field strays {worst} from identity");
    }

    #[test]
    fn zero_attention_layers_pass_encoder_through() {
        let mut cfg = toy();
        cfg.attention_layers = 0;
        let m = Model::<f64>::new(cfg, 0).unwrap();
        let tape = Tape::no_grad();
        let out = m.forward(&tape.constant(image(1, 32, 3)), Mode::Train).unwrap().0.output;
        assert_eq!(out.bottleneck.value(), out.encoder[4].value());
    }

    #[test]
    fn variants_drop_their_branches() {
        for v in Variant::ALL {
            let m = Model::<f64>::new(toy().with_variant(v), 0).unwrap();
            let names = m.params().learnable_names();
            assert_eq!(names.iter().any(|n| n.starts_with("dec_h")), v.has_h(), "{v}");
            assert_eq!(names.iter().any(|n| n.starts_with("dec_v")), v.has_v(), "{v}");
            assert_eq!(names.iter().any(|n| n.starts_with("fuse")), v.fuses(), "{v}");
            let tape = Tape::no_grad();
            let out = m.forward(&tape.constant(image(1, 32, 4)), Mode::Train).unwrap().0.output;
            assert_eq!(out.field.shape(), [1, 2, 32, 32]);
        }
    }

    #[test]
    fn eval_needs_trained_stats() {
        let m = Model::<f64>::new(toy(), 0).unwrap();
        assert!(matches!(m.infer(&image(1, 32, 5)), Err(Error::UninitializedStats(_))));
    }

    #[test]
    fn eval_is_deterministic_after_training_stats() {
        let mut m = Model::<f32>::new(toy(), 0).unwrap();
        let tape = Tape::no_grad();
        let x = image(2, 32, 6).cast::<f32>();
        let fwd = m.forward(&tape.constant(x.clone()), Mode::Train).unwrap().0;
        m.apply_stats(fwd.stats);
        let a = m.infer(&x).unwrap().field.value().clone();
        let b = m.infer(&x).unwrap().field.value().clone();
        assert_eq!(a, b);
    }

    #[test]
    fn from_params_rejects_other_config() {
        let m = Model::<f32>::new(toy(), 0).unwrap();
        let mut other = toy();
        other.fusion_channels = 48;
        assert!(Model::from_params(other, m.params().clone()).is_err());
        assert!(Model::from_params(toy(), m.params().clone()).is_ok());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let m = Model::<f64>::new(toy(), 0).unwrap();
        let tape = Tape::no_grad();
        assert!(m.forward(&tape.constant(image(1, 64, 0)), Mode::Train).is_err());
    }
}
