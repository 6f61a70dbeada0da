//! Rectification quality: MS-SSIM, an LD-like block-matching distortion,
//! and edit distance / CER on caller-supplied text.

mod gray;
mod ld;
mod report;
mod ssim;
mod text;

pub use gray::{Gray, LUMA};
pub use ld::{local_distortion, LocalDistortion, BLOCK, MAX_LOW_CONFIDENCE, MIN_NCC, PYRAMID_LEVELS, SEARCH};
pub use report::{evaluate, image_metrics, parse_metrics, Metric, MetricReport, Row};
pub use ssim::{gaussian_window, level_weights, ms_ssim, ssim, ssim_components, usable_levels, LEVELS, MS_WEIGHTS, SIGMA, WINDOW};
pub use text::{cer, edit_distance, edit_ops, EditOps};
