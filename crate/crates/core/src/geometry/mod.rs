//! Synthetic pages, the warp model, backward maps and resampling.

mod doc;
mod field;
mod sample;
mod warp;

pub use doc::{make_flat_doc, stroke_thickness, Background, Element, FlatDoc, FlatDocSpec, Rect};
pub use field::{resample, resize_bilinear, threshold, DeformationField};
pub use sample::{
    bundle_name, flat_page, flat_page_from_meta, generate_dataset, generate_sample, read_bundle, read_manifest, sample_seed,
    synthesize_sample, write_bundle, WarpedSample, DEFAULT_SIZE, GENERATOR_VERSION, MANIFEST,
};
pub use warp::{
    forward_map, invert_forward_map, ForwardMap, Homography, WarpParams, INVERT_DAMPING, INVERT_MAX_ITER, INVERT_TOL,
    MAX_AMPLITUDE, MAX_CORNER_JITTER, MAX_UNCONVERGED, PROBE_GRID,
};
