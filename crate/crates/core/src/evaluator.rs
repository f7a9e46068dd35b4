//! Micro average precision, precision over the top-N list, the hard-negative
//! sweep, and report comparison.
//!
//! All metrics rank predictions globally: descending score, then ascending
//! query id, then ascending reference id.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::{ImageId, Prediction};
use crate::error::{Error, Result};

pub type GroundTruth = BTreeSet<(ImageId, ImageId)>;

/// Predictions in global rank order. Fails on a repeated (query, reference).
pub fn rank(predictions: &[Prediction]) -> Result<Vec<Prediction>> {
    let mut sorted = predictions.to_vec();
    sorted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.query.cmp(&b.query))
            .then(a.reference.cmp(&b.reference))
    });
    let mut seen = BTreeSet::new();
    for p in &sorted {
        if !seen.insert((p.query, p.reference)) {
            return Err(Error::DuplicatePrediction {
                query: p.query,
                reference: p.reference,
            });
        }
    }
    Ok(sorted)
}

pub fn micro_ap(predictions: &[Prediction], gt: &GroundTruth) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let ranked = rank(predictions)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, p) in ranked.iter().enumerate() {
        if gt.contains(&(p.query, p.reference)) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtN {
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    /// Fewer than `n` predictions were available.
    pub short_list: bool,
}

/// `tp / (tp + fp)`, or 0 for an empty list.
pub fn precision_from_counts(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

pub fn precision_at_n(predictions: &[Prediction], gt: &GroundTruth, n: usize) -> Result<PrecisionAtN> {
    if n < 1 {
        return Err(Error::config("n", "must be ≥ 1"));
    }
    let ranked = rank(predictions)?;
    let top = &ranked[..n.min(ranked.len())];
    let tp = top.iter().filter(|p| gt.contains(&(p.query, p.reference))).count();
    let fp = top.len() - tp;
    Ok(PrecisionAtN {
        precision: precision_from_counts(tp, fp),
        tp,
        fp,
        short_list: ranked.len() < n,
    })
}

/// Number of distinct queries with at least one true match.
pub fn positive_query_count(gt: &GroundTruth) -> usize {
    gt.iter().map(|(q, _)| q).collect::<BTreeSet<_>>().len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_ap: f64,
    pub precision_at_n: f64,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub num_gt_pairs: usize,
    pub short_list: bool,
}

/// Full report. `n` defaults to the number of queries with true matches.
pub fn evaluate(predictions: &[Prediction], gt: &GroundTruth, n: Option<usize>) -> Result<EvalReport> {
    let micro_ap = micro_ap(predictions, gt)?;
    let n = n.unwrap_or_else(|| positive_query_count(gt));
    let p = precision_at_n(predictions, gt, n)?;
    Ok(EvalReport {
        micro_ap,
        precision_at_n: p.precision,
        n,
        tp: p.tp,
        fp: p.fp,
        num_gt_pairs: gt.len(),
        short_list: p.short_list,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "micro_ap        {:.6}", self.micro_ap);
        let _ = writeln!(
            s,
            "precision@{:<5} {:.6}{}",
            self.n,
            self.precision_at_n,
            if self.short_list { " (short list)" } else { "" }
        );
        let _ = writeln!(s, "tp              {}", self.tp);
        let _ = writeln!(s, "fp              {}", self.fp);
        let _ = writeln!(s, "gt pairs        {}", self.num_gt_pairs);
        s
    }
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line() as u64, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub micro_ap: f64,
}

/// µAP as hard-negative queries are added to the base query set. For fraction
/// `f` the first `⌈f·pool⌉` entries of `hard_pool` are included.
///
/// Per-query predictions do not depend on which other queries are present, so
/// the curve is computed by restricting one full set of predictions.
pub fn sweep_hard_negatives(
    predictions: &[Prediction],
    gt: &GroundTruth,
    base_queries: &BTreeSet<ImageId>,
    hard_pool: &[ImageId],
    fractions: &[f64],
) -> Result<Vec<SweepPoint>> {
    for (i, &f) in fractions.iter().enumerate() {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config("fractions", format!("{f} is outside [0, 1]")));
        }
        if i > 0 && f < fractions[i - 1] {
            return Err(Error::config("fractions", "must be sorted ascending"));
        }
    }
    fractions
        .iter()
        .map(|&fraction| {
            let take = ((fraction * hard_pool.len() as f64).ceil() as usize).min(hard_pool.len());
            let included: BTreeSet<ImageId> = base_queries
                .iter()
                .copied()
                .chain(hard_pool[..take].iter().copied())
                .collect();
            let subset: Vec<Prediction> = predictions
                .iter()
                .filter(|p| included.contains(&p.query))
                .copied()
                .collect();
            Ok(SweepPoint {
                fraction,
                micro_ap: micro_ap(&subset, gt)?,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("fraction,micro_ap\n");
    for p in points {
        let _ = writeln!(s, "{},{}", p.fraction, p.micro_ap);
    }
    s
}

/// Minimal SVG line plot of a sweep curve.
pub fn sweep_svg(points: &[SweepPoint]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let x = |f: f64| pad + f * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let path: Vec<String> = points
        .iter()
        .map(|p| format!("{:.1},{:.1}", x(p.fraction), y(p.micro_ap)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path.join(" ")
    );
    for p in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"><title>{:.4}</title></circle>"#,
            x(p.fraction),
            y(p.micro_ap),
            p.micro_ap
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">hard-negative fraction</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">micro AP</text>"#,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportDelta {
    pub micro_ap: f64,
    pub precision_at_n: f64,
    pub tp: i64,
    pub fp: i64,
}

/// `b - a` for every metric. Both reports must come from the same ground
/// truth and list length.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportDelta> {
    if a.num_gt_pairs != b.num_gt_pairs || a.n != b.n {
        return Err(Error::GtMismatch(format!(
            "gt pairs {} vs {}, n {} vs {}",
            a.num_gt_pairs, b.num_gt_pairs, a.n, b.n
        )));
    }
    Ok(ReportDelta {
        micro_ap: b.micro_ap - a.micro_ap,
        precision_at_n: b.precision_at_n - a.precision_at_n,
        tp: b.tp as i64 - a.tp as i64,
        fp: b.fp as i64 - a.fp as i64,
    })
}

impl ReportDelta {
    pub fn to_table(&self, a: &EvalReport, b: &EvalReport) -> String {
        let mut s = format!("{:<16}{:>12}{:>12}{:>12}\n", "metric", "a", "b", "delta");
        let _ = writeln!(
            s,
            "{:<16}{:>12.6}{:>12.6}{:>+12.6}",
            "micro_ap", a.micro_ap, b.micro_ap, self.micro_ap
        );
        let _ = writeln!(
            s,
            "{:<16}{:>12.6}{:>12.6}{:>+12.6}",
            "precision_at_n", a.precision_at_n, b.precision_at_n, self.precision_at_n
        );
        let _ = writeln!(s, "{:<16}{:>12}{:>12}{:>+12}", "tp", a.tp, b.tp, self.tp);
        let _ = writeln!(s, "{:<16}{:>12}{:>12}{:>+12}", "fp", a.fp, b.fp, self.fp);
        s
    }

    pub fn to_csv(&self, a: &EvalReport, b: &EvalReport) -> String {
        let mut s = String::from("metric,a,b,delta\n");
        let _ = writeln!(s, "micro_ap,{},{},{}", a.micro_ap, b.micro_ap, self.micro_ap);
        let _ = writeln!(
            s,
            "precision_at_n,{},{},{}",
            a.precision_at_n, b.precision_at_n, self.precision_at_n
        );
        let _ = writeln!(s, "tp,{},{},{}", a.tp, b.tp, self.tp);
        let _ = writeln!(s, "fp,{},{},{}", a.fp, b.fp, self.fp);
        s
    }
}
