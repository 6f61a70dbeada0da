//! Flat page rendering with horizontal and vertical structure-line masks.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Axis-aligned pixel rectangle, half-open: rows `top..bottom`, columns `left..right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Rect { top, left, bottom, right }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Element {
    /// Text block; its lines are evenly spaced across the rectangle.
    Paragraph { rect: Rect, lines: usize },
    Figure { rect: Rect },
    Table { rect: Rect, rows: usize, cols: usize },
}

impl Element {
    pub fn rect(&self) -> Rect {
        match self {
            Element::Paragraph { rect, .. } | Element::Figure { rect } | Element::Table { rect, .. } => *rect,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatDocSpec {
    pub height: usize,
    pub width: usize,
    pub margin: usize,
    /// Mask stroke thickness in pixels.
    pub thickness: usize,
    pub elements: Vec<Element>,
    pub seed: u64,
}

/// Two pixels at 512 rows, scaled with the page and at least one.
pub fn stroke_thickness(height: usize) -> usize {
    ((2.0 * height as f64 / 512.0).round() as usize).max(1)
}

impl FlatDocSpec {
    /// Page without layout elements.
    pub fn empty(height: usize, width: usize, seed: u64) -> Self {
        FlatDocSpec {
            height,
            width,
            margin: (width.min(height) / 16).max(2),
            thickness: stroke_thickness(height),
            elements: Vec::new(),
            seed,
        }
    }

    /// Text line pitch used by [`FlatDocSpec::random`].
    pub fn line_pitch(&self) -> usize {
        (self.height / 24).max(2 * self.thickness + 2)
    }

    /// Single-column layout of paragraphs, figures and tables stacked top to
    /// bottom inside the margins.
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut spec = Self::empty(height, width, seed);
        let mut r = rng::derived(seed, 3, 0);
        let pitch = spec.line_pitch();
        let gap = pitch.max(2 * spec.thickness + 2);
        let (left, right) = (spec.margin, width - spec.margin);
        let bottom_limit = height - spec.margin;
        let mut y = spec.margin;
        loop {
            let roll = rng::uniform(&mut r, 0.0, 1.0);
            let (el, h) = if roll < 0.6 {
                let lines = 2 + (rng::uniform(&mut r, 0.0, 5.0) as usize);
                let h = lines * pitch;
                (Element::Paragraph { rect: Rect::new(y, left, y + h, right), lines }, h)
            } else {
                let h = ((rng::uniform(&mut r, 0.12, 0.25) * height as f64) as usize).max(3 * pitch);
                let frac = rng::uniform(&mut r, 0.5, 1.0);
                let w = ((right - left) as f64 * frac) as usize;
                let x0 = left + ((right - left - w) as f64 * rng::uniform(&mut r, 0.0, 1.0)) as usize;
                let rect = Rect::new(y, x0, y + h, x0 + w);
                if roll < 0.8 {
                    (Element::Figure { rect }, h)
                } else {
                    let rows = 2 + (rng::uniform(&mut r, 0.0, 3.0) as usize);
                    let cols = 2 + (rng::uniform(&mut r, 0.0, 3.0) as usize);
                    (Element::Table { rect, rows, cols }, h)
                }
            };
            if y + h > bottom_limit {
                break;
            }
            spec.elements.push(el);
            y += h + gap;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!("page {}x{} is too small", self.height, self.width)));
        }
        if self.thickness == 0 || 2 * self.margin >= self.height.min(self.width) {
            return Err(Error::invalid("bad margin or thickness"));
        }
        for el in &self.elements {
            let r = el.rect();
            let inside = r.top >= self.margin
                && r.left >= self.margin
                && r.bottom <= self.height - self.margin
                && r.right <= self.width - self.margin
                && r.top < r.bottom
                && r.left < r.right;
            if !inside {
                return Err(Error::invalid(format!("element {r:?} lies outside the page margins")));
            }
            if let Element::Paragraph { lines, .. } = el {
                if *lines == 0 || r.bottom - r.top < lines * (2 * self.thickness + 2) {
                    return Err(Error::invalid(format!("{lines} text lines do not fit in {r:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Rendered page (`3 x H x W`) with its structure-line masks (`1 x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlatDoc {
    pub image: Tensor<f32>,
    pub h_mask: Tensor<f32>,
    pub v_mask: Tensor<f32>,
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f32>,
}

impl Canvas {
    fn fill(&mut self, r: Rect, color: [f32; 3]) {
        let hw = self.h * self.w;
        for y in r.top..r.bottom.min(self.h) {
            for x in r.left..r.right.min(self.w) {
                for (ch, c) in color.iter().enumerate() {
                    self.rgb[ch * hw + y * self.w + x] = *c;
                }
            }
        }
    }
}

fn mark(mask: &mut [f32], w: usize, r: Rect) {
    for y in r.top..r.bottom {
        mask[y * w + r.left..y * w + r.right].fill(1.0);
    }
}

/// `t` rows starting at `y`, spanning `left..right`.
fn h_stroke(mask: &mut [f32], w: usize, y: usize, left: usize, right: usize, t: usize) {
    mark(mask, w, Rect::new(y, left, y + t, right));
}

fn v_stroke(mask: &mut [f32], w: usize, x: usize, top: usize, bottom: usize, t: usize) {
    mark(mask, w, Rect::new(top, x, bottom, x + t));
}

fn ink(r: &mut Rng) -> [f32; 3] {
    let v = rng::uniform(r, 0.05, 0.25) as f32;
    [v, v, v + rng::uniform(r, 0.0, 0.05) as f32]
}

/// Renders the page and its masks. Horizontal strokes: every text line plus the
/// top and bottom edges of the page, paragraphs, figures and tables. Vertical
/// strokes: the left and right edges of the same boxes.
pub fn make_flat_doc(spec: &FlatDocSpec) -> Result<FlatDoc> {
    spec.validate()?;
    let (h, w, t) = (spec.height, spec.width, spec.thickness);
    let mut r = rng::derived(spec.seed, 3, 1);
    let paper = [
        rng::uniform(&mut r, 0.90, 0.98) as f32,
        rng::uniform(&mut r, 0.90, 0.98) as f32,
        rng::uniform(&mut r, 0.86, 0.96) as f32,
    ];
    let mut canvas = Canvas { h, w, rgb: paper.iter().flat_map(|&c| vec![c; h * w]).collect() };
    let mut hm = vec![0.0f32; h * w];
    let mut vm = vec![0.0f32; h * w];

    // page boundary
    h_stroke(&mut hm, w, 0, 0, w, t);
    h_stroke(&mut hm, w, h - t, 0, w, t);
    v_stroke(&mut vm, w, 0, 0, h, t);
    v_stroke(&mut vm, w, w - t, 0, h, t);

    for el in &spec.elements {
        let rect = el.rect();
        let color = ink(&mut r);
        match el {
            Element::Paragraph { lines, .. } => {
                let pitch = (rect.bottom - rect.top) as f64 / *lines as f64;
                let glyph = ((pitch * 0.45).round() as usize).max(1);
                for l in 0..*lines {
                    let centre = rect.top + ((l as f64 + 0.5) * pitch) as usize;
                    let end = if l + 1 == *lines {
                        rect.left + ((rect.right - rect.left) as f64 * rng::uniform(&mut r, 0.4, 0.9)) as usize
                    } else {
                        rect.right
                    };
                    let top = centre.saturating_sub(glyph / 2);
                    let mut x = rect.left;
                    while x < end {
                        let word = (rng::uniform(&mut r, 2.0, 7.0) * glyph as f64) as usize;
                        let stop = (x + word.max(1)).min(end);
                        canvas.fill(Rect::new(top, x, top + glyph, stop), color);
                        x = stop + glyph.max(1);
                    }
                    h_stroke(&mut hm, w, centre - t / 2, rect.left, end, t);
                }
            }
            Element::Figure { .. } => {
                let fill = [
                    rng::uniform(&mut r, 0.3, 0.8) as f32,
                    rng::uniform(&mut r, 0.3, 0.8) as f32,
                    rng::uniform(&mut r, 0.3, 0.8) as f32,
                ];
                canvas.fill(rect, color);
                let inner = Rect::new(rect.top + t, rect.left + t, rect.bottom - t, rect.right - t);
                canvas.fill(inner, fill);
            }
            Element::Table { rows, cols, .. } => {
                let (rh, cw) = (
                    (rect.bottom - rect.top) as f64 / *rows as f64,
                    (rect.right - rect.left) as f64 / *cols as f64,
                );
                for k in 0..=*rows {
                    let y = (rect.top + (k as f64 * rh) as usize).min(rect.bottom - t);
                    canvas.fill(Rect::new(y, rect.left, y + t, rect.right), color);
                }
                for k in 0..=*cols {
                    let x = (rect.left + (k as f64 * cw) as usize).min(rect.right - t);
                    canvas.fill(Rect::new(rect.top, x, rect.bottom, x + t), color);
                }
            }
        }
        h_stroke(&mut hm, w, rect.top, rect.left, rect.right, t);
        h_stroke(&mut hm, w, rect.bottom - t, rect.left, rect.right, t);
        v_stroke(&mut vm, w, rect.left, rect.top, rect.bottom, t);
        v_stroke(&mut vm, w, rect.right - t, rect.top, rect.bottom, t);
    }

    let rgb = soften(&canvas.rgb, 3, h, w);
    Ok(FlatDoc {
        image: Tensor::from_parts(vec![3, h, w], rgb),
        h_mask: Tensor::from_parts(vec![1, h, w], hm),
        v_mask: Tensor::from_parts(vec![1, h, w], vm),
    })
}

/// Separable `[1, 2, 1] / 4` blur with edge replication, standing in for scanner optics.
fn soften(data: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut tmp = vec![0.0f32; data.len()];
    let mut out = vec![0.0f32; data.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let l = data[base + y * w + x.saturating_sub(1)];
                let m = data[base + y * w + x];
                let r = data[base + y * w + (x + 1).min(w - 1)];
                tmp[base + y * w + x] = 0.25 * l + 0.5 * m + 0.25 * r;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let u = tmp[base + y.saturating_sub(1) * w + x];
                let m = tmp[base + y * w + x];
                let d = tmp[base + (y + 1).min(h - 1) * w + x];
                out[base + y * w + x] = 0.25 * u + 0.5 * m + 0.25 * d;
            }
        }
    }
    out
}

/// Procedural backdrop the page is composited over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Solid,
    Gradient,
    Noise,
    Stripes,
}

impl Background {
    pub fn from_id(id: u32) -> Self {
        match id % 4 {
            0 => Background::Solid,
            1 => Background::Gradient,
            2 => Background::Noise,
            _ => Background::Stripes,
        }
    }

    /// `3 x H x W` rendering, darker than paper so the page edge stays visible.
    pub fn render(self, height: usize, width: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::derived(seed, 4, 0);
        let mut color = || -> [f64; 3] { [0, 1, 2].map(|_| rng::uniform(&mut r, 0.05, 0.55)) };
        let (a, b) = (color(), color());
        let angle = rng::uniform(&mut rng::derived(seed, 4, 1), 0.0, std::f64::consts::TAU);
        let period = rng::uniform(&mut rng::derived(seed, 4, 2), 4.0, 16.0);
        let grid = 8;
        let mut nr = rng::derived(seed, 4, 3);
        let noise: Vec<f64> = (0..(grid + 1) * (grid + 1)).map(|_| rng::uniform(&mut nr, 0.0, 1.0)).collect();
        let hw = height * width;
        let mut data = vec![0.0f32; 3 * hw];
        for y in 0..height {
            for x in 0..width {
                let (u, v) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
                let t = match self {
                    Background::Solid => 0.0,
                    Background::Gradient => 0.5 + 0.5 * ((u - 0.5) * angle.cos() + (v - 0.5) * angle.sin()),
                    Background::Noise => {
                        let (gx, gy) = (u * grid as f64, v * grid as f64);
                        let (x0, y0) = ((gx as usize).min(grid - 1), (gy as usize).min(grid - 1));
                        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                        let at = |i: usize, j: usize| noise[i * (grid + 1) + j];
                        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                        top * (1.0 - fy) + bottom * fy
                    }
                    Background::Stripes => {
                        let s = (x as f64 * angle.cos() + y as f64 * angle.sin()) / period;
                        0.5 + 0.5 * (std::f64::consts::TAU * s).sin()
                    }
                };
                for ch in 0..3 {
                    data[ch * hw + y * width + x] = (a[ch] * (1.0 - t) + b[ch] * t) as f32;
                }
            }
        }
        Tensor::from_parts(vec![3, height, width], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Number of separate bands of rows (or columns) containing mask pixels.
    fn bands(mask: &Tensor<f32>, rows: bool) -> usize {
        let (h, w) = (mask.shape()[1], mask.shape()[2]);
        let (outer, inner) = if rows { (h, w) } else { (w, h) };
        let hit = |o: usize| {
            (0..inner).any(|i| {
                let (y, x) = if rows { (o, i) } else { (i, o) };
                mask.data()[y * w + x] > 0.5
            })
        };
        let mut count = 0;
        let mut prev = false;
        for o in 0..outer {
            let now = hit(o);
            count += usize::from(now && !prev);
            prev = now;
        }
        count
    }

    #[test]
    fn paragraph_stroke_counts() {
        let mut spec = FlatDocSpec::empty(128, 128, 1);
        spec.elements.push(Element::Paragraph { rect: Rect::new(30, 20, 80, 100), lines: 5 });
        let doc = make_flat_doc(&spec).unwrap();
        assert_eq!(bands(&doc.h_mask, true), 5 + 2 + 2);
        assert_eq!(bands(&doc.v_mask, false), 2 + 2);
    }

    #[test]
    fn empty_page_has_only_its_boundary() {
        let doc = make_flat_doc(&FlatDocSpec::empty(64, 48, 2)).unwrap();
        assert_eq!(bands(&doc.h_mask, true), 2);
        assert_eq!(bands(&doc.v_mask, false), 2);
        assert_eq!(bands(&doc.h_mask, false), 1);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = FlatDocSpec::random(96, 96, 5);
        assert_eq!(make_flat_doc(&spec).unwrap(), make_flat_doc(&spec).unwrap());
    }

    #[test]
    fn elements_outside_margins_are_rejected() {
        let mut spec = FlatDocSpec::empty(64, 64, 0);
        spec.elements.push(Element::Figure { rect: Rect::new(1, 10, 20, 30) });
        assert!(make_flat_doc(&spec).is_err());
    }

    #[test]
    fn random_layouts_are_valid() {
        for seed in 0..30 {
            for size in [64, 128, 512] {
                let spec = FlatDocSpec::random(size, size, seed);
                spec.validate().unwrap();
                assert!(!spec.elements.is_empty());
            }
        }
    }

    #[test]
    fn masks_are_binary() {
        let doc = make_flat_doc(&FlatDocSpec::random(64, 64, 3)).unwrap();
        for m in [&doc.h_mask, &doc.v_mask] {
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn thickness_scales() {
        assert_eq!(stroke_thickness(512), 2);
        assert_eq!(stroke_thickness(64), 1);
        assert_eq!(stroke_thickness(1024), 4);
    }
}
