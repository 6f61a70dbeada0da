use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::data::prepare_full;
use super::trainer::{train, TrainOptions, TrainSummary};
use crate::error::{Error, Result};
use crate::geometry::{flat_page_from_meta, read_bundle, read_manifest, resample, DeformationField};
use crate::io;
use crate::metrics::{ms_ssim, Gray, LEVELS};
use crate::model::{Model, Variant};
use crate::tensor::Tensor;

/// Averages over a held-out set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOut {
    pub samples: usize,
    /// Mean `|G_pred - G|` at the network input size.
    pub rec_pred: f64,
    /// Same for the constant identity field.
    pub rec_identity: f64,
    /// MS-SSIM against the flat page after rectifying with the true field.
    pub ms_ssim_gt: f64,
    /// Same with the predicted field, upsampled to the sample size.
    pub ms_ssim_pred: f64,
}

fn mean_abs(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.numel() as f64
}

/// Scores `model` on every bundle of `dataset`.
pub fn evaluate_heldout(model: &Model<f32>, dataset: &Path) -> Result<HeldOut> {
    let names = read_manifest(dataset)?;
    if names.is_empty() {
        return Err(Error::invalid(format!("{} lists no samples", dataset.display())));
    }
    let s = model.config().input_size;
    let identity = DeformationField::identity(s, s).to_tensor::<f32>();
    let mut acc = HeldOut { samples: names.len(), rec_pred: 0.0, rec_identity: 0.0, ms_ssim_gt: 0.0, ms_ssim_pred: 0.0 };
    for name in &names {
        let sample = read_bundle(&dataset.join(name))?;
        let ex = prepare_full(&sample, s)?;
        let out = model.infer(&ex.image.reshape(&[1, 3, s, s])?)?;
        let pred = out.field.value().reshape(&[2, s, s])?;
        acc.rec_pred += mean_abs(&pred, &ex.field);
        acc.rec_identity += mean_abs(&identity, &ex.field);

        let flat = Gray::from_tensor(&flat_page_from_meta(&sample.meta)?)?;
        let (h, w) = (sample.field.height(), sample.field.width());
        let pred_full = DeformationField::from_tensor(&pred)?.resize(h, w)?.clamped();
        let score = |f: &DeformationField| -> Result<f64> {
            ms_ssim(&Gray::from_tensor(&resample(&sample.image, f)?)?, &flat, LEVELS)
        };
        acc.ms_ssim_gt += score(&sample.field)?;
        acc.ms_ssim_pred += score(&pred_full)?;
    }
    let n = names.len() as f64;
    acc.rec_pred /= n;
    acc.rec_identity /= n;
    acc.ms_ssim_gt /= n;
    acc.ms_ssim_pred /= n;
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_rec: f64,
    pub heldout: Option<HeldOut>,
}

pub const ABLATION_TSV: &str = "ablation.tsv";

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "variant\tparams\tsteps\tinitial_loss\tfinal_loss\tfinal_rec\theldout_rec\tidentity_rec\tms_ssim_pred\tms_ssim_gt\n",
    );
    for r in rows {
        write!(s, "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}", r.variant, r.params, r.steps, r.initial_loss, r.final_loss, r.final_rec).unwrap();
        match &r.heldout {
            Some(h) => writeln!(s, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", h.rec_pred, h.rec_identity, h.ms_ssim_pred, h.ms_ssim_gt).unwrap(),
            None => s.push_str("\t-\t-\t-\t-\n"),
        }
    }
    s
}

/// Trains every variant from `base` into `out/<variant>` and writes the
/// comparison table to `out/ablation.tsv`.
pub fn run_ablation(dataset: &Path, heldout: Option<&Path>, base: &TrainConfig, out: &Path) -> Result<Vec<AblationRow>> {
    io::create_dir(out)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        log::info!("ablation: training {variant}");
        let summary: TrainSummary = train(dataset, &cfg, &out.join(variant.to_string()), &TrainOptions::default())?;
        let last = summary.records.last().ok_or_else(|| Error::invalid("training ran no steps"))?;
        let held = heldout.map(|d| evaluate_heldout(&summary.model, d)).transpose()?;
        rows.push(AblationRow {
            variant,
            params: summary.model.param_count(),
            steps: summary.records.len(),
            initial_loss: summary.initial_loss().unwrap_or(f64::NAN),
            final_loss: last.total,
            final_rec: last.rec,
            heldout: held,
        });
    }
    io::write_atomic(&out.join(ABLATION_TSV), ablation_tsv(&rows).as_bytes())?;
    Ok(rows)
}
