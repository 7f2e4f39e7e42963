//! ROC analysis, threshold sweeps, cohort statistics, and report rendering.
//!
//! The decision rule everywhere is: predict positive iff score >= threshold.
//! Trapezoidal AUC over the tie-grouped ROC curve equals the Mann-Whitney
//! concordance estimator; both are exposed and the equality is a tested
//! invariant, not an assumption.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub patient_id: String,
    pub score: f64,
    pub label: u8,
    pub age: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCohort {
    rows: Vec<ScoredRow>,
}

impl ScoredCohort {
    pub fn new(rows: Vec<ScoredRow>) -> Result<Self> {
        for r in &rows {
            if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
                return Err(Error::validation(format!(
                    "score for {:?} must lie in [0, 1], got {}",
                    r.patient_id, r.score
                )));
            }
            if r.label > 1 {
                return Err(Error::validation(format!(
                    "label for {:?} must be 0 or 1, got {}",
                    r.patient_id, r.label
                )));
            }
            if !r.age.is_finite() {
                return Err(Error::validation(format!("age for {:?} must be finite", r.patient_id)));
            }
        }
        Ok(ScoredCohort { rows })
    }

    pub fn rows(&self) -> &[ScoredRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn class_counts(&self) -> (usize, usize) {
        let n_pos = self.rows.iter().filter(|r| r.label == 1).count();
        (n_pos, self.rows.len() - n_pos)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (n_pos, n_neg) = self.class_counts();
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::validation(format!(
                "need both classes, got {n_pos} positive and {n_neg} negative"
            )));
        }
        Ok((n_pos, n_neg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (fpr, tpr) points from (0, 0) to (1, 1), tied scores grouped.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold sweep over the distinct scores in descending order.
pub fn roc(cohort: &ScoredCohort) -> Result<RocCurve> {
    let (n_pos, n_neg) = cohort.require_both_classes()?;
    let mut order: Vec<usize> = (0..cohort.rows.len()).collect();
    order.sort_by(|&a, &b| {
        cohort.rows[b].score.partial_cmp(&cohort.rows[a].score).expect("scores are finite")
    });
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = cohort.rows[order[i]].score;
        while i < order.len() && cohort.rows[order[i]].score == s {
            if cohort.rows[order[i]].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// Mann-Whitney estimator: (#concordant + 0.5 #tied) / (n_pos * n_neg).
pub fn auc_concordance(cohort: &ScoredCohort) -> Result<f64> {
    let (n_pos, n_neg) = cohort.require_both_classes()?;
    let mut num = 0.0;
    for p in cohort.rows.iter().filter(|r| r.label == 1) {
        for n in cohort.rows.iter().filter(|r| r.label == 0) {
            if p.score > n.score {
                num += 1.0;
            } else if p.score == n.score {
                num += 0.5;
            }
        }
    }
    Ok(num / (n_pos as f64 * n_neg as f64))
}

/// Per-threshold (sensitivity, specificity) over an ascending grid.
pub fn sens_spec_sweep(cohort: &ScoredCohort, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = cohort.require_both_classes()?;
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) || thresholds.iter().any(|t| !t.is_finite()) {
        return Err(Error::validation("thresholds must be finite and ascending"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let tp = cohort.rows.iter().filter(|r| r.label == 1 && r.score >= t).count();
            let tn = cohort.rows.iter().filter(|r| r.label == 0 && r.score < t).count();
            (tp as f64 / n_pos as f64, tn as f64 / n_neg as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
    pub accuracy: f64,
    /// 0 when the cohort has no positives; likewise specificity without negatives.
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn confusion(cohort: &ScoredCohort, threshold: f64) -> Result<Confusion> {
    if cohort.is_empty() {
        return Err(Error::validation("confusion needs a nonempty cohort"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for r in &cohort.rows {
        match (r.label == 1, r.score >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(Confusion {
        true_pos: tp,
        false_pos: fp,
        true_neg: tn,
        false_neg: fn_,
        accuracy: (tp + tn) as f64 / cohort.rows.len() as f64,
        sensitivity: rate(tp, tp + fn_),
        specificity: rate(tn, tn + fp),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CohortSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Quantile by linear interpolation of order statistics: h = (n - 1) p.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Descriptive statistics; sd uses the n - 1 denominator (0 for n = 1).
pub fn summarize_cohort(values: &[f64]) -> Result<CohortSummary> {
    if values.is_empty() {
        return Err(Error::validation("cannot summarize an empty cohort"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("cohort values must be finite"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(CohortSummary {
        n,
        mean,
        sd,
        min: sorted[0],
        max: sorted[n - 1],
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub roc: RocCurve,
    pub points: Vec<ThresholdPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub thresholds: Vec<f64>,
    pub folds: Vec<FoldMetrics>,
    pub mean_auc: f64,
    /// Sample sd over folds; 0 with a single fold.
    pub sd_auc: f64,
    pub mean: Vec<ThresholdPoint>,
    pub sd: Vec<ThresholdPoint>,
}

fn fold_metrics(fold: usize, cohort: &ScoredCohort, thresholds: &[f64]) -> Result<FoldMetrics> {
    let curve = roc(cohort)?;
    let sweep = sens_spec_sweep(cohort, thresholds)?;
    let points = thresholds
        .iter()
        .zip(&sweep)
        .map(|(&t, &(sens, spec))| {
            let c = confusion(cohort, t)?;
            debug_assert_eq!((sens, spec), (c.sensitivity, c.specificity));
            Ok(ThresholdPoint { threshold: t, sensitivity: sens, specificity: spec, accuracy: c.accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldMetrics { fold, auc: curve.auc, roc: curve, points })
}

fn mean_sd(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(thresholds: &[f64], folds: Vec<FoldMetrics>) -> CvReport {
    let aucs: Vec<f64> = folds.iter().map(|f| f.auc).collect();
    let (mean_auc, sd_auc) = mean_sd(&aucs);
    let mut mean = Vec::with_capacity(thresholds.len());
    let mut sd = Vec::with_capacity(thresholds.len());
    for (j, &t) in thresholds.iter().enumerate() {
        let col = |get: fn(&ThresholdPoint) -> f64| -> (f64, f64) {
            let vals: Vec<f64> = folds.iter().map(|f| get(&f.points[j])).collect();
            mean_sd(&vals)
        };
        let (m_sens, s_sens) = col(|p| p.sensitivity);
        let (m_spec, s_spec) = col(|p| p.specificity);
        let (m_acc, s_acc) = col(|p| p.accuracy);
        mean.push(ThresholdPoint { threshold: t, sensitivity: m_sens, specificity: m_spec, accuracy: m_acc });
        sd.push(ThresholdPoint { threshold: t, sensitivity: s_sens, specificity: s_spec, accuracy: s_acc });
    }
    CvReport { thresholds: thresholds.to_vec(), folds, mean_auc, sd_auc, mean, sd }
}

/// Cross-validation aggregate over at least two folds; folds are evaluated
/// in parallel and merged by index.
pub fn cv_report(folds: &[ScoredCohort], thresholds: &[f64]) -> Result<CvReport> {
    if folds.len() < 2 {
        return Err(Error::validation(format!(
            "cross-validation report needs at least 2 folds, got {}",
            folds.len()
        )));
    }
    let metrics: Vec<FoldMetrics> = folds
        .par_iter()
        .enumerate()
        .map(|(i, c)| fold_metrics(i, c, thresholds))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(thresholds, metrics))
}

/// Degenerate single-cohort report (e.g. a held-out test set): one fold,
/// zero-width sd bands.
pub fn single_report(cohort: &ScoredCohort, thresholds: &[f64]) -> Result<CvReport> {
    let metrics = fold_metrics(0, cohort, thresholds)?;
    Ok(aggregate(thresholds, vec![metrics]))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROC_SVG: &str = "roc.svg";
pub const SENS_SPEC_SVG: &str = "sens_spec.svg";
pub const SCATTER_SVG: &str = "scatter.svg";

/// TPR of a ROC curve at a given FPR by vertical interpolation. Vertical
/// jumps (repeated fpr) resolve to the highest tpr at that fpr.
fn tpr_at(curve: &RocCurve, fpr: f64) -> f64 {
    let pts = &curve.points;
    let mut lo = 0;
    for (i, p) in pts.iter().enumerate() {
        if p.0 <= fpr {
            lo = i;
        } else {
            break;
        }
    }
    let (x0, y0) = pts[lo];
    if lo + 1 == pts.len() || fpr <= x0 {
        return y0;
    }
    let (x1, y1) = pts[lo + 1];
    y0 + (fpr - x0) / (x1 - x0) * (y1 - y0)
}

const PLOT: f64 = 400.0;
const MARGIN: f64 = 55.0;

struct Frame {
    x_min: f64,
    x_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * PLOT
    }

    fn py(&self, y: f64) -> f64 {
        MARGIN + (1.0 - y.clamp(0.0, 1.0)) * PLOT
    }

    fn polyline(&self, xs: &[f64], ys: &[f64], color: &str, out: &mut String) {
        let pts: Vec<String> =
            xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        let _ = writeln!(
            out,
            r##"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"##,
            pts.join(" ")
        );
    }

    /// Shaded band between lower and upper curves sharing an x grid.
    fn band(&self, xs: &[f64], lo: &[f64], hi: &[f64], color: &str, out: &mut String) {
        let mut pts = Vec::with_capacity(2 * xs.len());
        for (&x, &y) in xs.iter().zip(hi) {
            pts.push(format!("{:.2},{:.2}", self.px(x), self.py(y)));
        }
        for (&x, &y) in xs.iter().zip(lo).rev() {
            pts.push(format!("{:.2},{:.2}", self.px(x), self.py(y)));
        }
        let _ = writeln!(
            out,
            r##"<polygon fill="{color}" fill-opacity="0.25" stroke="none" points="{}"/>"##,
            pts.join(" ")
        );
    }

    fn axes(&self, x_label: &str, y_label: &str, x_ticks: &[f64], out: &mut String) {
        let x0 = MARGIN;
        let y0 = MARGIN + PLOT;
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{MARGIN:.2}" width="{PLOT:.2}" height="{PLOT:.2}" fill="none" stroke="#333" stroke-width="1"/>"##
        );
        for &t in x_ticks {
            let px = self.px(t);
            let _ = writeln!(
                out,
                r##"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="#333"/><text x="{px:.2}" y="{:.2}" font-size="12" text-anchor="middle">{t}</text>"##,
                y0 + 5.0,
                y0 + 20.0
            );
        }
        for i in 0..=5 {
            let v = i as f64 / 5.0;
            let py = self.py(v);
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{v:.1}</text>"##,
                x0 - 5.0,
                x0 - 8.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">{x_label}</text>"##,
            MARGIN + PLOT / 2.0,
            MARGIN + PLOT + 40.0
        );
        let _ = writeln!(
            out,
            r##"<text x="18" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 18 {:.2})">{y_label}</text>"##,
            MARGIN + PLOT / 2.0,
            MARGIN + PLOT / 2.0
        );
    }
}

fn svg_open(title: &str) -> String {
    let side = 2.0 * MARGIN + PLOT;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" viewBox=\"0 0 {side} {side}\">\n<title>{title}</title>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn render_roc_svg(report: &CvReport) -> String {
    let frame = Frame { x_min: 0.0, x_max: 1.0 };
    let grid: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let mut mean = Vec::with_capacity(grid.len());
    let mut lo = Vec::with_capacity(grid.len());
    let mut hi = Vec::with_capacity(grid.len());
    for &g in &grid {
        let tprs: Vec<f64> = report.folds.iter().map(|f| tpr_at(&f.roc, g)).collect();
        let (m, s) = mean_sd(&tprs);
        mean.push(m);
        lo.push((m - s).max(0.0));
        hi.push((m + s).min(1.0));
    }
    let mut out = svg_open("Mean ROC curve across folds");
    frame.band(&grid, &lo, &hi, "#1f77b4", &mut out);
    frame.polyline(&grid, &mean, "#1f77b4", &mut out);
    frame.polyline(&[0.0, 1.0], &[0.0, 1.0], "#999999", &mut out);
    frame.axes(
        "False positive rate",
        "True positive rate",
        &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        &mut out,
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="14">AUC = {:.3} &#177; {:.3}</text>"##,
        MARGIN + 0.55 * PLOT,
        MARGIN + 0.85 * PLOT,
        report.mean_auc,
        report.sd_auc
    );
    out.push_str("</svg>\n");
    out
}

fn render_sens_spec_svg(report: &CvReport, threshold: f64) -> String {
    let t0 = *report.thresholds.first().expect("nonempty grid");
    let t1 = *report.thresholds.last().expect("nonempty grid");
    let frame = Frame { x_min: t0, x_max: if t1 > t0 { t1 } else { t0 + 1.0 } };
    let xs = &report.thresholds;
    let sens: Vec<f64> = report.mean.iter().map(|p| p.sensitivity).collect();
    let spec: Vec<f64> = report.mean.iter().map(|p| p.specificity).collect();
    let band_of = |get: fn(&ThresholdPoint) -> f64| -> (Vec<f64>, Vec<f64>) {
        report
            .mean
            .iter()
            .zip(&report.sd)
            .map(|(m, s)| ((get(m) - get(s)).max(0.0), (get(m) + get(s)).min(1.0)))
            .unzip()
    };
    let (sens_lo, sens_hi) = band_of(|p| p.sensitivity);
    let (spec_lo, spec_hi) = band_of(|p| p.specificity);
    let mut out = svg_open("Sensitivity and specificity vs threshold");
    frame.band(xs, &sens_lo, &sens_hi, "#d62728", &mut out);
    frame.band(xs, &spec_lo, &spec_hi, "#1f77b4", &mut out);
    frame.polyline(xs, &sens, "#d62728", &mut out);
    frame.polyline(xs, &spec, "#1f77b4", &mut out);
    // configured operating threshold
    let px = frame.px(threshold.clamp(frame.x_min, frame.x_max));
    let _ = writeln!(
        out,
        r##"<line x1="{px:.2}" y1="{MARGIN:.2}" x2="{px:.2}" y2="{:.2}" stroke="#555" stroke-dasharray="4 3"/>"##,
        MARGIN + PLOT
    );
    if let Some((tc, yc)) = crossing_point(xs, &sens, &spec) {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="none" stroke="#333" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="12">crossing {tc:.3}</text>"##,
            frame.px(tc),
            frame.py(yc),
            frame.px(tc) + 8.0,
            frame.py(yc) - 8.0
        );
    }
    let ticks: Vec<f64> = (0..=5).map(|i| t0 + (frame.x_max - t0) * i as f64 / 5.0).collect();
    frame.axes("Threshold", "Rate", &ticks, &mut out);
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="13" fill="#d62728">sensitivity</text><text x="{:.2}" y="{:.2}" font-size="13" fill="#1f77b4">specificity</text>"##,
        MARGIN + 10.0,
        MARGIN + 20.0,
        MARGIN + 10.0,
        MARGIN + 38.0
    );
    out.push_str("</svg>\n");
    out
}

/// First sign change of sens - spec along the grid, linearly interpolated.
/// The threshold where the two curves meet is a natural operating point.
pub fn crossing_point(xs: &[f64], sens: &[f64], spec: &[f64]) -> Option<(f64, f64)> {
    for j in 0..xs.len().saturating_sub(1) {
        let d0 = sens[j] - spec[j];
        let d1 = sens[j + 1] - spec[j + 1];
        if d0 == 0.0 {
            return Some((xs[j], sens[j]));
        }
        if d0 * d1 < 0.0 {
            let f = d0 / (d0 - d1);
            let t = xs[j] + f * (xs[j + 1] - xs[j]);
            let y = sens[j] + f * (sens[j + 1] - sens[j]);
            return Some((t, y));
        }
    }
    xs.last().and_then(|&x| {
        let j = xs.len() - 1;
        (sens[j] == spec[j]).then_some((x, sens[j]))
    })
}

fn render_scatter_svg(cohort: &ScoredCohort, threshold: f64) -> String {
    let n = cohort.len().max(1);
    let frame = Frame { x_min: 0.0, x_max: (n.max(2) - 1) as f64 };
    let (age_min, age_max) = cohort
        .rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.age), hi.max(r.age)));
    let radius = |age: f64| {
        if age_max > age_min {
            2.0 + 4.0 * (age - age_min) / (age_max - age_min)
        } else {
            4.0
        }
    };
    let mut out = svg_open("Per-patient scores; circle size reflects patient age");
    let py = frame.py(threshold);
    let _ = writeln!(
        out,
        r##"<line x1="{MARGIN:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#555" stroke-dasharray="4 3"/>"##,
        MARGIN + PLOT
    );
    for (i, r) in cohort.rows.iter().enumerate() {
        let color = if r.label == 1 { "#d62728" } else { "#1f77b4" };
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="{color}" fill-opacity="0.65"/>"##,
            frame.px(i as f64),
            frame.py(r.score),
            radius(r.age)
        );
    }
    let quarter = ((n.max(4) - 1) / 4).max(1);
    let ticks: Vec<f64> = (0..n).step_by(quarter).map(|i| i as f64).collect();
    frame.axes("Patient index", "Score", &ticks, &mut out);
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="13" fill="#d62728">positive</text><text x="{:.2}" y="{:.2}" font-size="13" fill="#1f77b4">negative</text>"##,
        MARGIN + 10.0,
        MARGIN + 20.0,
        MARGIN + 10.0,
        MARGIN + 38.0
    );
    out.push_str("</svg>\n");
    out
}

/// Writes metrics.csv, roc.svg, sens_spec.svg, and scatter.svg into `out_dir`.
/// Aggregate CSV rows carry "mean" and "sd" in the fold column. All outputs
/// are byte-deterministic for fixed inputs.
pub fn render_report(
    report: &CvReport,
    scatter: &ScoredCohort,
    threshold: f64,
    out_dir: &Path,
) -> Result<()> {
    if report.thresholds.is_empty() {
        return Err(Error::validation("report needs a nonempty threshold grid"));
    }
    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("section,fold,auc,threshold,sensitivity,specificity,accuracy\n");
    for f in &report.folds {
        for p in &f.points {
            let _ = writeln!(
                csv,
                "fold,{},{},{},{},{},{}",
                f.fold, f.auc, p.threshold, p.sensitivity, p.specificity, p.accuracy
            );
        }
    }
    for (tag, auc, points) in
        [("mean", report.mean_auc, &report.mean), ("sd", report.sd_auc, &report.sd)]
    {
        for p in points.iter() {
            let _ = writeln!(
                csv,
                "aggregate,{tag},{auc},{},{},{},{}",
                p.threshold, p.sensitivity, p.specificity, p.accuracy
            );
        }
    }
    fs::write(out_dir.join(METRICS_FILE), csv)?;
    fs::write(out_dir.join(ROC_SVG), render_roc_svg(report))?;
    fs::write(out_dir.join(SENS_SPEC_SVG), render_sens_spec_svg(report, threshold))?;
    fs::write(out_dir.join(SCATTER_SVG), render_scatter_svg(scatter, threshold))?;
    Ok(())
}
