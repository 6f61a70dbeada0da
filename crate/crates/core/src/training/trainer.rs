use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::{epoch_dir, load_checkpoint, save_checkpoint, Progress};
use super::config::TrainConfig;
use super::data::{collate, epoch_order, prepare, Batch, Example};
use super::losses::{compute_losses, LossReport};
use super::optim::AdamW;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::{read_bundle, read_manifest, WarpedSample};
use crate::io;
use crate::model::{Mode, Model};
use crate::rng;

pub const LOG_FILE: &str = "train_log.txt";
pub const FINAL_MODEL: &str = "model";
/// Above this share of unreadable bundles training refuses to start.
pub const MAX_CORRUPT: f64 = 0.1;
/// Datasets up to this many stored floats are held in memory.
const CACHE_FLOATS: usize = 64 << 20;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint to continue from; its config must equal the run's.
    pub resume: Option<PathBuf>,
}

/// Loss components of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub rec: f64,
    pub line: f64,
    pub bce_h: Vec<f64>,
    pub bce_v: Vec<f64>,
    pub line_h: Vec<f64>,
    pub line_v: Vec<f64>,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, lr: f64, r: &LossReport<f32>) -> Self {
        StepRecord {
            step,
            epoch,
            lr,
            total: r.total_value(),
            rec: r.rec,
            line: r.line,
            bce_h: r.bce_h.clone(),
            bce_v: r.bce_v.clone(),
            line_h: r.line_h.clone(),
            line_v: r.line_v.clone(),
        }
    }

    /// One log line of `key=value` fields.
    pub fn to_line(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        write!(
            s,
            "step={} epoch={} lr={:.6e} total={:.6e} rec={:.6e} line={:.6e}",
            self.step, self.epoch, self.lr, self.total, self.rec, self.line
        )
        .unwrap();
        write!(s, " bce_h={} bce_v={} line_h={} line_v={}", list(&self.bce_h), list(&self.bce_v), list(&self.line_h), list(&self.line_v)).unwrap();
        s
    }
}

pub struct TrainSummary {
    pub model: Model<f32>,
    /// Steps run by this call (excludes those before a resume point).
    pub records: Vec<StepRecord>,
    pub skipped: Vec<String>,
    pub total_steps: usize,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }
}

enum Source {
    Memory(Vec<WarpedSample>),
    Disk(Vec<PathBuf>),
}

impl Source {
    fn len(&self) -> usize {
        match self {
            Source::Memory(v) => v.len(),
            Source::Disk(v) => v.len(),
        }
    }

    fn get(&self, k: usize) -> Result<std::borrow::Cow<'_, WarpedSample>> {
        match self {
            Source::Memory(v) => Ok(std::borrow::Cow::Borrowed(&v[k])),
            Source::Disk(v) => Ok(std::borrow::Cow::Owned(read_bundle(&v[k])?)),
        }
    }
}

/// Reads every bundle once, dropping unreadable ones with a warning.
fn open_dataset(dataset: &Path) -> Result<(Source, Vec<String>)> {
    let names = read_manifest(dataset)?;
    if names.is_empty() {
        return Err(Error::invalid(format!("{} lists no samples", dataset.display())));
    }
    let loaded: Vec<Result<WarpedSample>> = names.par_iter().map(|n| read_bundle(&dataset.join(n))).collect();
    let mut good = Vec::new();
    let mut skipped = Vec::new();
    for (name, r) in names.iter().zip(loaded) {
        match r {
            Ok(s) => good.push((name, s)),
            Err(e) => {
                log::warn!("skipping bundle '{name}': {e}");
                skipped.push(name.clone());
            }
        }
    }
    if skipped.len() as f64 > MAX_CORRUPT * names.len() as f64 {
        return Err(Error::format(
            dataset,
            format!("{} of {} bundles are unreadable (limit {:.0}%)", skipped.len(), names.len(), MAX_CORRUPT * 100.0),
        ));
    }
    let floats: usize = good.iter().map(|(_, s)| s.image.numel() * 7 / 3).sum();
    let source = if floats <= CACHE_FLOATS {
        Source::Memory(good.into_iter().map(|(_, s)| s).collect())
    } else {
        Source::Disk(good.into_iter().map(|(n, _)| dataset.join(n)).collect())
    };
    Ok((source, skipped))
}

/// One forward/backward/update. Returns the loss report of the batch.
pub fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut AdamW<f32>,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport<f32>> {
    let tape = Tape::new();
    let x = tape.constant(batch.image.clone());
    let (fwd, bound) = model.forward(&x, Mode::Train)?;
    let report = compute_losses(
        &fwd.output,
        &tape.constant(batch.h_mask.clone()),
        &tape.constant(batch.v_mask.clone()),
        &tape.constant(batch.field.clone()),
        &cfg.loss,
    )?;
    if !report.total_value().is_finite() {
        return Err(Error::NonFinite(format!("training loss (rec {}, line {})", report.rec, report.line)));
    }
    report.total.backward()?;
    let grads = bound.gradients();
    optimizer.update(model.params_mut().tensors_mut(), &grads, lr)?;
    model.apply_stats(fwd.stats);
    Ok(report)
}

/// Trains on the bundles of `dataset`, writing a per-step log, a checkpoint
/// after every epoch and the final model under `out`.
///
/// Data order and crops depend only on the seed, the epoch and the position
/// in the epoch, so a resumed run retraces the uninterrupted one.
pub fn train(dataset: &Path, cfg: &TrainConfig, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let (source, skipped) = open_dataset(dataset)?;
    let n = source.len();
    let batch = cfg.optim.batch;
    let per_epoch = n.div_ceil(batch);
    let total_steps = per_epoch * cfg.optim.epochs;
    cfg.optim.validate(total_steps)?;
    let schedule = cfg.optim.schedule(total_steps);

    let (mut model, mut optimizer, start) = match &opts.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.config != *cfg {
                return Err(Error::invalid(format!("checkpoint {} was trained with another config", dir.display())));
            }
            let opt = ck.optimizer.ok_or_else(|| Error::format(dir, "checkpoint has no optimizer state"))?;
            (ck.model, opt, ck.progress)
        }
        None => (Model::new(cfg.model.clone(), cfg.seed)?, AdamW::new(&cfg.optim), Progress::default()),
    };

    io::create_dir(out)?;
    let log_path = out.join(LOG_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(opts.resume.is_some())
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    log::info!(
        "training {} parameters on {n} samples: {} epochs x {per_epoch} steps, warmup {}",
        model.param_count(),
        cfg.optim.epochs,
        schedule.warmup
    );
    let mut records = Vec::new();
    let mut step = start.step;
    for epoch in start.epoch..cfg.optim.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        for (b, chunk) in order.chunks(batch).enumerate() {
            let examples = chunk
                .iter()
                .enumerate()
                .map(|(k, &idx)| {
                    let position = (epoch * n + b * batch + k) as u64;
                    let mut r = rng::derived(cfg.seed, 8, position);
                    prepare(&*source.get(idx)?, cfg.model.input_size, cfg.crop_min_area, &mut r)
                })
                .collect::<Result<Vec<Example>>>()?;
            let lr = schedule.lr_at(step + 1);
            let report = train_step(&mut model, &mut optimizer, &collate(&examples)?, cfg, lr)?;
            step += 1;
            let rec = StepRecord::new(step, epoch, lr, &report);
            writeln!(log_file, "{}", rec.to_line()).map_err(|e| Error::io(&log_path, e))?;
            log::debug!("{}", rec.to_line());
            records.push(rec);
        }
        log_file.flush().map_err(|e| Error::io(&log_path, e))?;
        let progress = Progress { epoch: epoch + 1, step };
        save_checkpoint(&epoch_dir(out, epoch + 1), cfg, &model, Some(&optimizer), progress)?;
        if let Some(r) = records.last() {
            log::info!("epoch {}/{}: step {step}, loss {:.4e}", epoch + 1, cfg.optim.epochs, r.total);
        }
    }
    save_checkpoint(&out.join(FINAL_MODEL), cfg, &model, None, Progress { epoch: cfg.optim.epochs, step })?;
    Ok(TrainSummary { model, records, skipped, total_steps })
}
