//! Finite-difference gradient suites shared by the test suite and the
//! `gradcheck` command.

use std::time::Instant;

use crate::autodiff::{grad_check, BnMode, GradCheck, GradCheckOptions, RunningStats, Var};
use crate::error::Result;
use crate::model::{Bound, FusionParams, Model, ModelConfig, Mode};
use crate::tensor::Tensor;
use crate::training::{self, LossConfig};

/// Tolerance for single elementwise/linear ops.
pub const ELEMENTWISE_TOL: f64 = 1e-4;
/// Tolerance for composite ops and whole-model checks.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheck,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance
    }
}

/// Which group of checks to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Model,
    All,
}

pub fn run(suite: Suite) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Ops | Suite::All) {
        out.extend(op_suite()?);
    }
    if matches!(suite, Suite::Model | Suite::All) {
        out.extend(model_suite()?);
    }
    Ok(out)
}

fn check<F>(
    name: &str,
    tolerance: f64,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<CheckOutcome>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let start = Instant::now();
    let report = grad_check(f, inputs, opts)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        tolerance,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn randn(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    Tensor::randn(shape, seed)
}

/// Uniform in (lo, hi), for ops with restricted domains.
fn rand_in(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Tensor<f64>> {
    Tensor::uniform(shape, lo, hi, &mut crate::rng::seeded(seed))
}

pub fn op_suite() -> Result<Vec<CheckOutcome>> {
    let o = GradCheckOptions::default();
    let e = ELEMENTWISE_TOL;
    let c = COMPOSITE_TOL;
    let mut out = vec![
        check("add_broadcast", e, &[randn(&[3, 3], 1)?, randn(&[3, 1], 2)?], &o, |v| v[0].add(&v[1]))?,
        check("sub_broadcast", e, &[randn(&[2, 3], 3)?, randn(&[3], 4)?], &o, |v| v[0].sub(&v[1]))?,
        check("mul", e, &[randn(&[3, 3], 5)?, randn(&[3, 3], 6)?], &o, |v| v[0].mul(&v[1]))?,
        check("mul_broadcast", e, &[randn(&[2, 3, 4, 1], 7)?, randn(&[2, 3, 1, 5], 8)?], &o, |v| {
            v[0].mul(&v[1])
        })?,
        check("matmul", e, &[randn(&[2, 3], 9)?, randn(&[3, 2], 10)?], &o, |v| v[0].matmul(&v[1]))?,
        check("matmul_batched", e, &[randn(&[2, 3, 4], 11)?, randn(&[2, 4, 2], 12)?], &o, |v| {
            v[0].matmul(&v[1])
        })?,
        check("transpose", e, &[randn(&[2, 3, 4], 13)?], &o, |v| v[0].transpose(0, 2))?,
        check("concat_split", e, &[randn(&[1, 2, 3, 1], 14)?, randn(&[1, 2, 4, 1], 15)?], &o, |v| {
            let cat = Var::concat(&[&v[0], &v[1]], 2)?;
            let parts = cat.split(2, &[5, 2])?;
            parts[0].mul(&parts[0])?.sum()?.add(&parts[1].sum()?)
        })?,
        check("relu", e, &[randn(&[4, 4], 16)?], &o, |v| v[0].relu())?,
        check("sigmoid", e, &[randn(&[4, 4], 17)?], &o, |v| v[0].sigmoid())?,
        check("softmax", e, &[randn(&[5], 18)?], &o, |v| v[0].softmax(0))?,
        check("softmax_axis1", e, &[randn(&[2, 4, 3], 19)?], &o, |v| v[0].softmax(1))?,
        check("log", e, &[rand_in(&[6], 20, 0.2, 2.0)?], &o, |v| v[0].log())?,
        check("abs", e, &[randn(&[6], 21)?], &o, |v| v[0].abs())?,
        check("conv2d", e, &[randn(&[1, 2, 5, 5], 22)?, randn(&[3, 2, 3, 3], 23)?, randn(&[3], 24)?], &o, |v| {
            v[0].conv2d(&v[1], Some(&v[2]), 1, 1)
        })?,
        check("conv2d_strided", e, &[randn(&[2, 2, 6, 5], 25)?, randn(&[2, 2, 3, 3], 26)?], &o, |v| {
            v[0].conv2d(&v[1], None, 2, 1)
        })?,
        check("maxpool2d", e, &[randn(&[1, 2, 4, 6], 27)?], &o, |v| v[0].maxpool2d(2, 2))?,
        check("bilinear_up", e, &[randn(&[1, 2, 3, 4], 28)?], &o, |v| v[0].bilinear_resize(7, 9))?,
        check("bilinear_down", e, &[randn(&[1, 1, 8, 8], 29)?], &o, |v| v[0].bilinear_resize(3, 5))?,
        check("avgpool_x", e, &[randn(&[2, 3, 4, 5], 30)?], &o, |v| v[0].adaptive_avgpool_x())?,
        check("avgpool_y", e, &[randn(&[2, 3, 4, 5], 31)?], &o, |v| v[0].adaptive_avgpool_y())?,
        check(
            "batchnorm2d_train",
            c,
            &[randn(&[4, 3, 4, 4], 32)?, randn(&[3], 33)?, randn(&[3], 34)?],
            &o,
            |v| v[0].batchnorm2d(&v[1], &v[2], &mut RunningStats::new(3), BnMode::Train, "check"),
        )?,
        check("attention", e, &[randn(&[4, 3], 35)?, randn(&[4, 3], 36)?, randn(&[4, 3], 37)?], &o, |v| {
            Var::scaled_dot_attention(&v[0], &v[1], &v[2])
        })?,
    ];
    out.push(check(
        "bce_loss",
        e,
        &[rand_in(&[8, 8], 38, 0.05, 0.95)?],
        &o,
        |v| {
            let mask = training::random_mask(&[8, 8], 39);
            training::bce_loss(&v[0], &v[0].constant_like(mask))
        },
    )?);
    out.push(check(
        "line_loss",
        e,
        &[rand_in(&[8, 8], 40, 0.05, 0.95)?],
        &o,
        |v| {
            let mask = training::random_mask(&[8, 8], 41);
            training::weighted_line_loss(&v[0], &v[0].constant_like(mask))
        },
    )?);
    out.push(check("rec_loss", e, &[randn(&[2, 4, 4], 42)?], &o, |v| {
        let target = Tensor::randn(&[2, 4, 4], 43)?;
        training::rec_loss(&v[0], &v[0].constant_like(target))
    })?);
    Ok(out)
}

/// Input side and channel divisor of the toy model used for composite checks.
pub const TOY_INPUT: usize = 64;
pub const TOY_SCALE: usize = 8;

pub fn model_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let probe = GradCheckOptions { max_per_input: Some(12), seed: 5, ..Default::default() };

    // HV fusion at C=8, H=W=8 with its own randomly initialized weights.
    let fusion = FusionParams::<f64>::random(8, 11)?;
    let names = fusion.names();
    let mut inputs = vec![randn(&[1, 8, 8, 8], 50)?, randn(&[1, 8, 8, 8], 51)?];
    inputs.extend(names.iter().map(|n| fusion.get(n).clone()));
    out.push(check("hv_fuse", COMPOSITE_TOL, &inputs, &probe, |v| {
        let bound = FusionParams::bind(&names, &v[2..]);
        let (fh, fv, _) = crate::model::hv_fuse(&v[0], &v[1], &bound)?;
        Var::concat(&[&fh, &fv], 1)
    })?);

    // Whole toy model: gradient of the full training loss with respect to the
    // input image and every parameter tensor.
    let config = ModelConfig::toy(TOY_INPUT, TOY_SCALE);
    let model = Model::<f64>::new(config.clone(), 3)?;
    let batch = 2;
    let s = config.input_size;
    let image = rand_in(&[batch, 3, s, s], 60, 0.0, 1.0)?;
    let field = rand_in(&[batch, 2, s, s], 61, 0.05, 0.95)?;
    let h_mask = training::random_mask(&[batch, 1, s, s], 62);
    let v_mask = training::random_mask(&[batch, 1, s, s], 63);
    let pnames = model.params().learnable_names();
    let mut inputs = vec![image];
    inputs.extend(pnames.iter().map(|n| model.params().get(n).expect("listed").clone()));
    let loss_cfg = LossConfig::default();
    let probe = GradCheckOptions { max_per_input: Some(2), seed: 7, freeze_branches: true, ..Default::default() };
    out.push(check("toy_model_total_loss", COMPOSITE_TOL, &inputs, &probe, |v| {
        let bound = Bound::from_pairs(pnames.iter().cloned().zip(v[1..].iter().cloned()));
        let fwd = model.forward_with(&v[0], &bound, Mode::Train)?;
        let report = training::compute_losses(
            &fwd.output,
            &v[0].constant_like(h_mask.clone()),
            &v[0].constant_like(v_mask.clone()),
            &v[0].constant_like(field.clone()),
            &loss_cfg,
        )?;
        Ok(report.total)
    })?);
    Ok(out)
}
