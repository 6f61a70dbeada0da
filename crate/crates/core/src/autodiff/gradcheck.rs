//! Central-difference gradient checking in 64-bit.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// How many elements to probe and how to compare.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many elements per input (all when `None`).
    pub max_per_input: Option<usize>,
    /// Gradients smaller than this are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
    /// Evaluate the perturbed function with relu/abs/clamp/max-pool decisions
    /// frozen at the unperturbed point. Large networks have so many kinks
    /// within `eps` of any point that the plain difference quotient often
    /// straddles one; freezing differentiates the smooth piece the analytic
    /// gradient belongs to.
    pub freeze_branches: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_per_input: None, abs_floor: 1e-6, seed: 0, freeze_branches: false }
    }
}

/// Result of a gradient check; `worst_*` locate the largest relative error.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    /// Perturbed evaluations in which some non-smooth op would have switched
    /// branch (only counted with `freeze_branches`).
    pub branch_flips: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds its output from leaves on a fresh tape every call. Non-scalar
/// outputs are reduced to `sum(out * r)` with a fixed random `r`, so every
/// output element contributes to the probe.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let project = |out: &Var<f64>| -> Result<Var<f64>> {
        if out.value().numel() == 1 {
            return out.reshape(&[]);
        }
        let r = Tensor::randn(out.shape(), opts.seed ^ 0xA5A5)?;
        out.mul(&out.constant_like(r))?.sum()
    };

    let tape = Tape::new();
    if opts.freeze_branches {
        tape.record_branches();
    }
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = project(&f(&vars)?)?;
    let log = tape.take_branches();
    if !loss.value().is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    loss.backward()?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape()).expect("valid shape")))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<(f64, usize)> {
        let tape = if opts.freeze_branches { Tape::replaying(log.clone()) } else { Tape::no_grad() };
        let vars: Vec<Var<f64>> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let value = project(&f(&vars)?)?.value().data()[0];
        Ok((value, tape.branch_flips()))
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
        branch_flips: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut pick = rng::seeded(opts.seed);
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let indices: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                rand::seq::index::sample(&mut pick, n, k).into_iter().collect()
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + opts.eps;
            let (plus, flips_plus) = eval(&work)?;
            work[which].data_mut()[idx] = orig - opts.eps;
            let (minus, flips_minus) = eval(&work)?;
            report.branch_flips += usize::from(flips_plus > 0) + usize::from(flips_minus > 0);
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[which].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.probes += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_input = which;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
