use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::gray::Gray;
use super::ld::{local_distortion, BLOCK, SEARCH};
use super::ssim::{ms_ssim, LEVELS};
use super::text::{cer, edit_distance};
use crate::error::{Error, Result};
use crate::geometry::resize_bilinear;
use crate::io;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    MsSsim,
    Ld,
    Ed,
    Cer,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::MsSsim, Metric::Ld, Metric::Ed, Metric::Cer];

    fn on_images(self) -> bool {
        matches!(self, Metric::MsSsim | Metric::Ld)
    }

    /// Column name in reports. LD is labelled as a stand-in, not the benchmark metric.
    pub fn column(self) -> &'static str {
        match self {
            Metric::MsSsim => "ms_ssim",
            Metric::Ld => "ld_like",
            Metric::Ed => "ed",
            Metric::Cer => "cer",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ms_ssim" | "msssim" => Ok(Metric::MsSsim),
            "ld" | "ld_like" => Ok(Metric::Ld),
            "ed" => Ok(Metric::Ed),
            "cer" => Ok(Metric::Cer),
            other => Err(Error::invalid(format!("unknown metric '{other}' (ms_ssim, ld, ed, cer)"))),
        }
    }
}

/// Parses a comma-separated list such as `ms_ssim,ld`.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out: Vec<Metric> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::invalid("no metrics requested"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub name: String,
    pub values: BTreeMap<Metric, f64>,
    /// Fraction of LD blocks excluded for low correlation.
    pub ld_low_confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    /// Sorted by name.
    pub rows: Vec<Row>,
    /// Mean of the finite per-row values of each metric.
    pub aggregate: BTreeMap<Metric, f64>,
    /// Stems that had no partner.
    pub skipped: Vec<String>,
}

impl MetricReport {
    pub fn from_rows(metrics: Vec<Metric>, rows: Vec<Row>, skipped: Vec<String>) -> Self {
        let mut aggregate = BTreeMap::new();
        for m in &metrics {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.values.get(m)).copied().filter(|v| v.is_finite()).collect();
            if !vals.is_empty() {
                aggregate.insert(*m, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        MetricReport { metrics, rows, aggregate, skipped }
    }

    /// Header, one row per pair, then a `mean` row.
    pub fn to_tsv(&self) -> String {
        let ld = self.metrics.contains(&Metric::Ld);
        let mut s = String::from("name");
        for m in &self.metrics {
            write!(s, "\t{m}").unwrap();
        }
        if ld {
            s.push_str("\tld_low_confidence");
        }
        s.push('\n');
        let cell = |v: Option<&f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        for r in &self.rows {
            s.push_str(&r.name);
            for m in &self.metrics {
                write!(s, "\t{}", cell(r.values.get(m))).unwrap();
            }
            if ld {
                write!(s, "\t{}", cell(r.ld_low_confidence.as_ref())).unwrap();
            }
            s.push('\n');
        }
        s.push_str("mean");
        for m in &self.metrics {
            write!(s, "\t{}", cell(self.aggregate.get(m))).unwrap();
        }
        if ld {
            s.push_str("\t-");
        }
        s.push('\n');
        s
    }
}

const IMAGE_EXT: [&str; 4] = ["pgm", "ppm", "pnm", "dten"];

#[derive(Default)]
struct Files {
    image: Option<PathBuf>,
    text: Option<PathBuf>,
}

fn scan(dir: &Path) -> Result<BTreeMap<String, Files>> {
    let mut out: BTreeMap<String, Files> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()).map(String::from),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        if IMAGE_EXT.contains(&ext) {
            out.entry(stem).or_default().image = Some(path);
        } else if ext == "txt" {
            out.entry(stem).or_default().text = Some(path);
        }
    }
    Ok(out)
}

/// Image metrics of one pair, with `pred` brought to the ground truth's size.
pub fn image_metrics(pred: &Tensor<f64>, gt: &Tensor<f64>, metrics: &[Metric]) -> Result<Row> {
    let (h, w) = (gt.shape()[1], gt.shape()[2]);
    let pred = if pred.shape()[1..] != gt.shape()[1..] { resize_bilinear(pred, h, w)? } else { pred.clone() };
    let (a, b) = (Gray::from_tensor(&pred)?, Gray::from_tensor(gt)?);
    let mut row = Row { name: String::new(), values: BTreeMap::new(), ld_low_confidence: None };
    for m in metrics {
        match m {
            Metric::MsSsim => {
                row.values.insert(*m, ms_ssim(&a, &b, LEVELS)?);
            }
            Metric::Ld => {
                let ld = local_distortion(&a, &b, BLOCK, SEARCH)?;
                row.values.insert(*m, ld.ld);
                row.ld_low_confidence = Some(ld.low_confidence);
            }
            _ => {}
        }
    }
    Ok(row)
}

/// Pairs files in `pred_dir` and `gt_dir` by stem and scores every pair.
/// Images feed MS-SSIM and LD, `.txt` files feed ED and CER. Unpaired stems
/// are skipped with a warning.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, metrics: &[Metric]) -> Result<MetricReport> {
    let pred = scan(pred_dir)?;
    let gt = scan(gt_dir)?;
    let want_img = metrics.iter().any(|m| m.on_images());
    let want_txt = metrics.iter().any(|m| !m.on_images());
    let stems: Vec<&String> = pred.keys().chain(gt.keys()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let results: Vec<Result<Option<Row>>> = stems
        .par_iter()
        .map(|stem| {
            let (p, g) = (pred.get(*stem), gt.get(*stem));
            let img = p.and_then(|f| f.image.as_ref()).zip(g.and_then(|f| f.image.as_ref()));
            let txt = p.and_then(|f| f.text.as_ref()).zip(g.and_then(|f| f.text.as_ref()));
            if (want_img && img.is_none()) || (!want_img && want_txt && txt.is_none()) {
                return Ok(None);
            }
            let mut row = match img {
                Some((pi, gi)) if want_img => image_metrics(&io::load_image(pi)?, &io::load_image(gi)?, metrics)?,
                _ => Row { name: String::new(), values: BTreeMap::new(), ld_low_confidence: None },
            };
            if let (Some((pt, gt_path)), true) = (txt, want_txt) {
                let (hyp, reference) = (io::read_text(pt)?, io::read_text(gt_path)?);
                let (hyp, reference) = (hyp.trim_end_matches('\n'), reference.trim_end_matches('\n'));
                if metrics.contains(&Metric::Ed) {
                    row.values.insert(Metric::Ed, edit_distance(reference, hyp) as f64);
                }
                if metrics.contains(&Metric::Cer) {
                    row.values.insert(Metric::Cer, cer(reference, hyp).unwrap_or(f64::NAN));
                }
            }
            row.name = (*stem).clone();
            Ok(Some(row))
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (stem, r) in stems.iter().zip(results) {
        match r? {
            Some(row) => rows.push(row),
            None => {
                log::warn!("'{stem}' has no partner, skipped");
                skipped.push((*stem).clone());
            }
        }
    }
    Ok(MetricReport::from_rows(metrics.to_vec(), rows, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_lists() {
        assert_eq!(parse_metrics("ld, ms_ssim,ld").unwrap(), vec![Metric::MsSsim, Metric::Ld]);
        assert!(parse_metrics("psnr").is_err());
        assert!(parse_metrics("").is_err());
    }

    #[test]
    fn aggregate_is_row_mean() {
        let row = |n: &str, v: f64| Row { name: n.into(), values: [(Metric::Ed, v)].into(), ld_low_confidence: None };
        let r = MetricReport::from_rows(vec![Metric::Ed], vec![row("a", 1.0), row("b", 4.0)], vec![]);
        assert_eq!(r.aggregate[&Metric::Ed], 2.5);
        assert_eq!(r.to_tsv(), "name\ted\na\t1.000000\nb\t4.000000\nmean\t2.500000\n");
    }
}
