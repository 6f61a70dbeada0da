//! Warped training samples, their on-disk bundles and whole datasets.

use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;

use super::doc::{make_flat_doc, Background, FlatDocSpec};
use super::field::{sample_bilinear, threshold, DeformationField};
use super::warp::{invert_forward_map, ForwardMap, WarpParams, INVERT_MAX_ITER, INVERT_TOL};
use crate::error::{Error, Result};
use crate::io;
use crate::rng;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
/// Default side of generated samples.
pub const DEFAULT_SIZE: usize = 512;
pub const MANIFEST: &str = "manifest.txt";

/// One training record. Image, masks and field share their spatial extent.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedSample {
    /// `3 x H x W` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Backward map rectifying `image`.
    pub field: DeformationField,
    /// `1 x H x W`, values in `{0, 1}`.
    pub h_mask: Tensor<f32>,
    pub v_mask: Tensor<f32>,
    /// `key=value` lines describing how the sample was made.
    pub meta: String,
}

/// Warps the page described by `spec` with `params` over `background`
/// (`3 x H x W`, same size as the page).
///
/// Each distorted pixel `q` shows the page at `f(q)` when that lies on the page
/// and the background otherwise. Masks are warped bilinearly and thresholded at
/// 0.5. The ground-truth field is the numerical inverse of `f`.
pub fn synthesize_sample(spec: &FlatDocSpec, params: &WarpParams, background: &Tensor<f32>) -> Result<WarpedSample> {
    params.validate()?;
    let (h, w) = (spec.height, spec.width);
    if background.shape() != [3, h, w] {
        return Err(Error::shape(format!("background {:?} vs page {h}x{w}", background.shape())));
    }
    let doc = make_flat_doc(spec)?;
    let map = ForwardMap::new(params)?;
    let hw = h * w;
    let mut image = background.clone();
    let mut hm = vec![0.0f32; hw];
    let mut vm = vec![0.0f32; hw];
    let mut px = [0.0f32; 3];
    let mut m = [0.0f32; 1];
    for i in 0..h {
        for j in 0..w {
            let (fx, fy) = map.apply((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            if !((0.0..=1.0).contains(&fx) && (0.0..=1.0).contains(&fy)) {
                continue;
            }
            let (sx, sy) = (fx * w as f64 - 0.5, fy * h as f64 - 0.5);
            sample_bilinear(&doc.image, sx, sy, &mut px);
            for (ch, v) in px.iter().enumerate() {
                image.data_mut()[ch * hw + i * w + j] = *v;
            }
            sample_bilinear(&doc.h_mask, sx, sy, &mut m);
            hm[i * w + j] = m[0];
            sample_bilinear(&doc.v_mask, sx, sy, &mut m);
            vm[i * w + j] = m[0];
        }
    }
    let field = invert_forward_map(params, h, w, INVERT_TOL, INVERT_MAX_ITER)?;
    let meta = format!(
        "generator_version={GENERATOR_VERSION}\nheight={h}\nwidth={w}\nlayout_seed={}\nelements={}\n{}",
        spec.seed,
        spec.elements.len(),
        params.to_meta()
    );
    Ok(WarpedSample {
        image,
        field,
        h_mask: threshold(&Tensor::from_parts(vec![1, h, w], hm)),
        v_mask: threshold(&Tensor::from_parts(vec![1, h, w], vm)),
        meta,
    })
}

/// The flat page a sample was warped from, for round-trip checks.
pub fn flat_page(size: usize, seed: u64) -> Result<Tensor<f32>> {
    Ok(make_flat_doc(&FlatDocSpec::random(size, size, layout_seed(seed)))?.image)
}

/// Re-renders the flat page a bundle was warped from, using its metadata.
pub fn flat_page_from_meta(meta: &str) -> Result<Tensor<f32>> {
    let get = |key: &str| -> Result<u64> {
        meta.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::invalid(format!("sample metadata lacks '{key}'")))
    };
    let (h, w) = (get("height")? as usize, get("width")? as usize);
    Ok(make_flat_doc(&FlatDocSpec::random(h, w, get("layout_seed")?))?.image)
}

fn layout_seed(seed: u64) -> u64 {
    rng::derived(seed, 6, 0).next_u64()
}

/// Layout, warp and background all drawn from `seed`.
pub fn generate_sample(size: usize, seed: u64) -> Result<WarpedSample> {
    let spec = FlatDocSpec::random(size, size, layout_seed(seed));
    let params = WarpParams::sample(seed);
    let background = Background::from_id(params.background).render(size, size, seed);
    synthesize_sample(&spec, &params, &background)
}

/// Seed of sample `index` in a dataset generated with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    rng::derived(seed, 5, index).next_u64()
}

pub fn bundle_name(index: usize) -> String {
    format!("sample_{index:05}")
}

pub fn write_bundle(dir: &Path, sample: &WarpedSample) -> Result<()> {
    io::create_dir(dir)?;
    io::save_dten(&dir.join("img.dten"), &sample.image)?;
    io::save_dten(&dir.join("bm.dten"), &sample.field.to_tensor::<f32>())?;
    io::save_dten(&dir.join("hline.dten"), &sample.h_mask)?;
    io::save_dten(&dir.join("vline.dten"), &sample.v_mask)?;
    io::write_atomic(&dir.join("meta.txt"), sample.meta.as_bytes())
}

pub fn read_bundle(dir: &Path) -> Result<WarpedSample> {
    let image: Tensor<f32> = io::load_dten(&dir.join("img.dten"))?;
    let field = DeformationField::from_tensor(&io::load_dten::<f32>(&dir.join("bm.dten"))?)
        .map_err(|e| Error::format(dir.join("bm.dten"), e.to_string()))?;
    let h_mask: Tensor<f32> = io::load_dten(&dir.join("hline.dten"))?;
    let v_mask: Tensor<f32> = io::load_dten(&dir.join("vline.dten"))?;
    let meta = io::read_text(&dir.join("meta.txt"))?;
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::format(dir.join("img.dten"), "image must be 3 x H x W"));
    };
    if c != 3 || field.height() != h || field.width() != w {
        return Err(Error::format(dir, format!("image {:?} and field {}x{} disagree", image.shape(), field.height(), field.width())));
    }
    for (name, m) in [("hline.dten", &h_mask), ("vline.dten", &v_mask)] {
        if m.shape() != [1, h, w] {
            return Err(Error::format(dir.join(name), format!("mask {:?}, expected [1, {h}, {w}]", m.shape())));
        }
    }
    Ok(WarpedSample { image, field, h_mask, v_mask, meta })
}

pub fn read_manifest(dataset: &Path) -> Result<Vec<String>> {
    Ok(io::read_text(&dataset.join(MANIFEST))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Writes `count` bundles and the manifest under `out`. Samples are generated
/// in parallel; the files depend only on `(count, size, seed)`.
pub fn generate_dataset(out: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    io::create_dir(out)?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let dirs = (0..count)
        .into_par_iter()
        .map(|k| {
            let sample = generate_sample(size, sample_seed(seed, k as u64))?;
            let dir = out.join(bundle_name(k));
            write_bundle(&dir, &sample)?;
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if n.is_multiple_of(50) || n == count {
                log::info!("generated {n}/{count} samples");
            }
            Ok(dir)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest: String = (0..count).map(|k| bundle_name(k) + "\n").collect();
    io::write_atomic(&out.join(MANIFEST), manifest.as_bytes())?;
    Ok(dirs)
}
