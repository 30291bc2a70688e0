//! Segmentation metrics and the pairwise angular-distance histogram.
//!
//! Two angle conventions coexist in this crate. The loss uses the signed
//! angular similarity `θ = π/2 − arccos(s)`; the histogram here uses the
//! plain angular distance `arccos(s) ∈ [0, π]`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryMask;
use crate::numcore::stable_arccos;
use crate::similarity::cosine_sim;

pub const PREC_THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];

fn check_shape(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if !pred.same_shape(gt) || pred.bits.len() != gt.bits.len() {
        return Err(Error::ShapeMismatch {
            context: "mask pair",
            expected: format!("{}x{}", gt.rows, gt.cols),
            got: format!("{}x{}", pred.rows, pred.cols),
        });
    }
    Ok(())
}

/// Intersection and union cell counts.
pub fn intersection_union(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    check_shape(pred, gt)?;
    let (mut i, mut u) = (0, 0);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        i += (p && g) as usize;
        u += (p || g) as usize;
    }
    Ok((i, u))
}

/// `|pred ∩ gt| / |pred ∪ gt|`, and 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

fn ious(pairs: &[(BinaryMask, BinaryMask)]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    pairs.iter().map(|(p, g)| iou(p, g)).collect()
}

pub fn miou(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    let v = ious(pairs)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Total intersection over total union.
pub fn oiou(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut i, mut u) = (0usize, 0usize);
    for (p, g) in pairs {
        let (pi, pu) = intersection_union(p, g)?;
        i += pi;
        u += pu;
    }
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Fraction of samples with IoU strictly above `p`.
pub fn prec_at(pairs: &[(BinaryMask, BinaryMask)], p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::config("p", "precision threshold must lie in (0, 1)"));
    }
    let v = ious(pairs)?;
    Ok(prec_from_ious(&v, p))
}

fn prec_from_ious(v: &[f64], p: f64) -> f64 {
    v.iter().filter(|&&x| x > p).count() as f64 / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub oiou: f64,
    /// Keyed by the threshold's display form (`"0.5"`, ...).
    pub prec: BTreeMap<String, f64>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn compute(pairs: &[(BinaryMask, BinaryMask)]) -> Result<Self> {
        let v = ious(pairs)?;
        let prec = PREC_THRESHOLDS
            .iter()
            .map(|&p| (format!("{p}"), prec_from_ious(&v, p)))
            .collect();
        Ok(MetricsReport {
            miou: v.iter().sum::<f64>() / v.len() as f64,
            oiou: oiou(pairs)?,
            prec,
            n_samples: v.len(),
        })
    }

    pub fn prec_at(&self, p: f64) -> Option<f64> {
        self.prec.get(&format!("{p}")).copied()
    }

    pub const CSV_HEADER: &'static str = "split,mIoU,oIoU,P@0.5,P@0.7,P@0.9,n";

    /// One CSV row with fixed 6-decimal formatting.
    pub fn csv_row(&self, split: &str) -> String {
        let p = |t: f64| self.prec_at(t).unwrap_or(f64::NAN);
        format!(
            "{split},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.miou,
            self.oiou,
            p(0.5),
            p(0.7),
            p(0.9),
            self.n_samples
        )
    }
}

/// CSV table with one row per named report.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>) -> String {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&r.csv_row(name));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl AnisotropyHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{:.6},{:.6},{c}", self.bin_edges[k], self.bin_edges[k + 1]);
        }
        out
    }

    /// Bar chart over `[0, π]` with labeled axes and the data as a `<desc>` table.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, left, bottom, top, right) = (640.0, 400.0, 60.0, 50.0, 40.0, 20.0);
        let plot_w = w - left - right;
        let plot_h = h - top - bottom;
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bar_w = plot_w / self.counts.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, "<title>{}</title>", xml_escape(title));
        let _ = writeln!(s, "<desc>\n{}</desc>", self.to_csv());
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        for (k, &c) in self.counts.iter().enumerate() {
            let bh = plot_h * c as f64 / max;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4472c4"/>"##,
                left + k as f64 * bar_w,
                top + plot_h - bh,
                bar_w.max(0.5),
                bh
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
            y = top + plot_h,
            x2 = left + plot_w
        );
        let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{y}" stroke="black"/>"#, y = top + plot_h);
        for (label, frac) in [("0", 0.0), ("π/2", 0.5), ("π", 1.0)] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{label}</text>"#,
                left + frac * plot_w,
                top + plot_h + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">pairwise angular distance (rad)</text>"#,
            left + plot_w / 2.0,
            h - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">pair count</text>"#,
            top + plot_h / 2.0,
            top + plot_h / 2.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="24" font-size="14" text-anchor="middle">{} (mean {:.4}, std {:.4})</text>"#,
            w / 2.0,
            xml_escape(title),
            self.mean,
            self.std
        );
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Samples up to `n_pairs` distinct unordered pairs and bins their angular
/// distances `arccos(cos)` uniformly over `[0, π]`.
pub fn anisotropy_histogram<V: AsRef<[f64]>, R: Rng + ?Sized>(
    embeddings: &[V],
    n_pairs: usize,
    bins: usize,
    rng: &mut R,
) -> Result<AnisotropyHistogram> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::config("bins", "must be positive"));
    }
    let total = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if n_pairs >= total {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut seen = HashSet::with_capacity(n_pairs);
        let mut out = Vec::with_capacity(n_pairs);
        while out.len() < n_pairs {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                out.push(key);
            }
        }
        out
    };
    let pi = std::f64::consts::PI;
    let width = pi / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut dists = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        let d = stable_arccos(cosine_sim(embeddings[i].as_ref(), embeddings[j].as_ref())?)?;
        counts[((d / width) as usize).min(bins - 1)] += 1;
        dists.push(d);
    }
    let m = dists.iter().sum::<f64>() / dists.len() as f64;
    let var = dists.iter().map(|d| (d - m).powi(2)).sum::<f64>() / dists.len() as f64;
    Ok(AnisotropyHistogram {
        bin_edges: (0..=bins).map(|k| k as f64 * width).collect(),
        counts,
        mean: m,
        std: var.sqrt(),
    })
}
