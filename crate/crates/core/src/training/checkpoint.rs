//! Checkpoint directories: the config echo, one DTEN per tensor and an index.
//!
//! ```text
//! config.txt          training config (key=value)
//! index.txt           format, epoch, step, then one line per tensor
//! params/<name>.dten  learnable tensors
//! stats/<name>.dten   batch-norm running statistics, 2 x C (mean, var)
//! adam/<name>.m.dten  optimizer moments (absent in inference-only exports)
//! adam/<name>.v.dten
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Where training stopped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub progress: Progress,
}

/// Writes a checkpoint to `dir`, replacing any previous one. The files are
/// assembled in a sibling directory and renamed into place.
pub fn save_checkpoint(
    dir: &Path,
    config: &TrainConfig,
    model: &Model<f32>,
    optimizer: Option<&AdamW<f32>>,
    progress: Progress,
) -> Result<()> {
    let name = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", dir.display())))?;
    let tmp = dir.with_file_name(format!("{name}.partial"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    io::create_dir(&tmp.join("params"))?;
    io::create_dir(&tmp.join("stats"))?;
    io::write_atomic(&tmp.join("config.txt"), config.to_text().as_bytes())?;
    let mut index = String::new();
    writeln!(index, "format={CHECKPOINT_FORMAT}").unwrap();
    writeln!(index, "epoch={}", progress.epoch).unwrap();
    writeln!(index, "step={}", progress.step).unwrap();
    for (name, t) in model.params().tensors() {
        io::save_dten(&tmp.join("params").join(format!("{name}.dten")), t)?;
        writeln!(index, "param={name}").unwrap();
    }
    for (name, s) in model.params().stats() {
        let mut data = s.mean.clone();
        data.extend_from_slice(&s.var);
        io::save_dten(&tmp.join("stats").join(format!("{name}.dten")), &Tensor::from_parts(vec![2, s.mean.len()], data))?;
        writeln!(index, "stats={name} {}", s.batches).unwrap();
    }
    if let Some(opt) = optimizer {
        io::create_dir(&tmp.join("adam"))?;
        writeln!(index, "adam_step={}", opt.step).unwrap();
        for (name, m) in &opt.m {
            io::save_dten(&tmp.join("adam").join(format!("{name}.m.dten")), m)?;
            io::save_dten(&tmp.join("adam").join(format!("{name}.v.dten")), &opt.v[name])?;
            writeln!(index, "adam={name}").unwrap();
        }
    }
    io::write_atomic(&tmp.join("index.txt"), index.as_bytes())?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path, msg)
}

/// Loads a checkpoint, refusing tensors whose shapes its config does not imply.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config = TrainConfig::load(&dir.join("config.txt"))?;
    let index_path = dir.join("index.txt");
    let entries = io::parse_key_values(&io::read_text(&index_path)?)?;
    let mut progress = Progress::default();
    let mut tensors = BTreeMap::new();
    let mut stats = BTreeMap::new();
    let mut adam_step = None;
    let mut adam_names = Vec::new();
    let num = |v: &str, line: usize| -> Result<u64> {
        v.parse().map_err(|_| bad(&index_path, format!("line {line}: bad number '{v}'")))
    };
    for (line, key, value) in entries {
        match key.as_str() {
            "format" if num(&value, line)? == CHECKPOINT_FORMAT as u64 => {}
            "format" => return Err(bad(&index_path, format!("unsupported format {value}"))),
            "epoch" => progress.epoch = num(&value, line)? as usize,
            "step" => progress.step = num(&value, line)? as usize,
            "param" => {
                let t: Tensor<f32> = io::load_dten(&dir.join("params").join(format!("{value}.dten")))?;
                tensors.insert(value, t);
            }
            "stats" => {
                let (name, batches) = value.rsplit_once(' ').ok_or_else(|| bad(&index_path, format!("line {line}: expected 'name batches'")))?;
                let path = dir.join("stats").join(format!("{name}.dten"));
                let t: Tensor<f32> = io::load_dten(&path)?;
                let [2, c] = t.shape()[..] else {
                    return Err(bad(&path, format!("statistics must be 2 x C, got {:?}", t.shape())));
                };
                let d = t.data();
                stats.insert(
                    name.to_string(),
                    RunningStats { mean: d[..c].to_vec(), var: d[c..].to_vec(), batches: num(batches, line)? },
                );
            }
            "adam_step" => adam_step = Some(num(&value, line)?),
            "adam" => adam_names.push(value),
            _ => return Err(bad(&index_path, format!("line {line}: unknown entry '{key}'"))),
        }
    }
    let model = Model::from_params(config.model.clone(), ModelParams::from_parts(tensors, stats))
        .map_err(|e| bad(dir, format!("checkpoint does not match its config: {e}")))?;
    let optimizer = match adam_step {
        None => None,
        Some(step) => {
            let mut opt = AdamW::new(&config.optim);
            opt.step = step;
            for name in adam_names {
                let shape = model
                    .params()
                    .get(&name)
                    .ok_or_else(|| bad(dir, format!("optimizer state for unknown parameter '{name}'")))?
                    .shape()
                    .to_vec();
                for (suffix, slot) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                    let path = dir.join("adam").join(format!("{name}.{suffix}.dten"));
                    let t: Tensor<f32> = io::load_dten(&path)?;
                    if t.shape() != shape.as_slice() {
                        return Err(bad(&path, format!("moment is {:?}, parameter {shape:?}", t.shape())));
                    }
                    slot.insert(name.clone(), t);
                }
            }
            Some(opt)
        }
    };
    Ok(Checkpoint { config, model, optimizer, progress })
}

pub fn epoch_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}
