//! Losses, optimizer, schedule, data preparation and the training loop.

mod checkpoint;
mod config;
mod data;
mod heldout;
mod losses;
mod optim;
mod trainer;

pub use checkpoint::{epoch_dir, load_checkpoint, save_checkpoint, Checkpoint, Progress, CHECKPOINT_FORMAT};
pub use config::{TrainConfig, CROP_MIN_AREA};
pub use data::{collate, epoch_order, prepare, prepare_full, Batch, Example};
pub use heldout::{ablation_tsv, evaluate_heldout, run_ablation, AblationRow, HeldOut, ABLATION_TSV};
pub use losses::{
    bce_loss, compute_losses, layer_weight, line_total_loss, line_weights, random_mask, rec_loss,
    total_loss, weighted_line_loss, LineTotal, LossConfig, LossReport, ALPHA, PROB_CLAMP,
};
pub use optim::{AdamW, OptimConfig, Schedule, WARMUP_STEPS};
pub use trainer::{train, train_step, StepRecord, TrainOptions, TrainSummary, FINAL_MODEL, LOG_FILE, MAX_CORRUPT};
