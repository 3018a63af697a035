//! Evaluation: IOU collection against ground truth, the histogram/PDF/CDF
//! accuracy-vs-threshold curve, precision and recall, center-distance box
//! correspondence, and the x-projection filter for stacked four-slap
//! detections.
//!
//! The accuracy curve is built from a histogram over IOU values at a bin
//! step of 1e-5, normalized to a PDF, accumulated into a CDF, and read out
//! as `accuracy = 1 - cdf + pdf` per bin. That formulation equals the
//! direct definition — the fraction of samples with IOU at or above the
//! bin's threshold — exactly, at every bin boundary. Accuracy at threshold
//! zero is always 1.

use crate::boxes::{iou, BBox, Detection, TraitClass};
use crate::synthdata::Record;
use std::collections::BTreeMap;
use std::fmt;

/// Histogram bin step for the accuracy curve.
pub const CURVE_STEP: f64 = 1e-5;
/// Bin count: thresholds 0, 1e-5, ..., 1.0 inclusive.
pub const CURVE_BINS: usize = 100_001;

/// Default IOU thresholds of the summary report.
pub const REPORT_THRESHOLDS: [f64; 3] = [0.35, 0.5, 0.65];

/// Default x-overlap ratio above which a stacked slap box is dropped.
pub const SLAP_X_OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyInput(&'static str),
    IouOutOfRange(f64),
    BadThreshold(f64),
    IdMismatch(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyInput(what) => write!(f, "{what} must be non-empty"),
            EvalError::IouOutOfRange(v) => write!(f, "IOU {v} outside [0, 1]"),
            EvalError::BadThreshold(v) => write!(f, "threshold {v} outside (0, 1]"),
            EvalError::IdMismatch(msg) => write!(f, "id mismatch: {msg}"),
        }
    }
}

impl std::error::Error for EvalError {}

/// Predictions and ground truths for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub image_id: String,
    pub predictions: Vec<Detection>,
    pub ground_truths: Vec<(BBox, TraitClass)>,
}

// ── correspondence ───────────────────────────────────────────────────

/// Match each ground truth to at most one prediction of the same class by
/// minimum center-to-center distance. Greedy over gts ordered by their best
/// candidate distance; each prediction is used at most once. Returns, per
/// gt, the matched prediction index and its IOU (unmatched gts report 0).
pub fn match_boxes(preds: &[Detection], gts: &[(BBox, TraitClass)]) -> Vec<Option<(usize, f64)>> {
    let mut result: Vec<Option<(usize, f64)>> = vec![None; gts.len()];

    let best_distance = |gi: usize| -> f64 {
        let (gt_box, gt_class) = &gts[gi];
        preds
            .iter()
            .filter(|p| p.label == Some(*gt_class))
            .map(|p| p.bbox.center_distance(gt_box))
            .fold(f64::INFINITY, f64::min)
    };
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| best_distance(a).partial_cmp(&best_distance(b)).unwrap());

    let mut used = vec![false; preds.len()];
    for gi in order {
        let (gt_box, gt_class) = &gts[gi];
        let mut best: Option<(usize, f64)> = None;
        for (pi, p) in preds.iter().enumerate() {
            if used[pi] || p.label != Some(*gt_class) {
                continue;
            }
            let d = p.bbox.center_distance(gt_box);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((pi, d));
            }
        }
        if let Some((pi, _)) = best {
            used[pi] = true;
            result[gi] = Some((pi, iou(&preds[pi].bbox, gt_box)));
        }
    }
    result
}

// ── slap stacking filter ─────────────────────────────────────────────

/// Overlap of the two boxes' x-axis projections, as a fraction of the
/// narrower box's width.
pub fn x_overlap_ratio(a: &BBox, b: &BBox) -> f64 {
    let overlap = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    overlap / a.width().min(b.width())
}

/// Drop stacked boxes: whenever two predictions' x-projections overlap by
/// more than `threshold`, the box whose center sits lower is removed.
/// Boxes are processed in descending score order and the rule is iterated
/// to a fixed point, so the output is deterministic and contains no
/// violating pair.
pub fn slap_filter(preds: &[Detection], x_overlap_threshold: f64) -> Vec<Detection> {
    assert!(
        x_overlap_threshold > 0.0 && x_overlap_threshold <= 1.0,
        "x overlap threshold must be in (0, 1]"
    );
    let mut kept: Vec<Detection> = preds.to_vec();
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    loop {
        let mut drop: Option<usize> = None;
        'scan: for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if x_overlap_ratio(&kept[i].bbox, &kept[j].bbox) > x_overlap_threshold {
                    let yi = kept[i].bbox.center().1;
                    let yj = kept[j].bbox.center().1;
                    if yi > yj {
                        drop = Some(i);
                    } else if yj > yi {
                        drop = Some(j);
                    } else {
                        continue; // same height: neither is "below"
                    }
                    break 'scan;
                }
            }
        }
        match drop {
            Some(i) => {
                kept.remove(i);
            }
            None => return kept,
        }
    }
}

// ── IOU collection ───────────────────────────────────────────────────

/// How each trait's predictions are reduced to per-gt IOU samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    /// Traits with multiple boxes per image, evaluated through the slap
    /// filter and distance correspondence.
    pub slap_traits: Vec<TraitClass>,
    pub x_overlap_threshold: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            slap_traits: vec![TraitClass::Finger],
            x_overlap_threshold: SLAP_X_OVERLAP_THRESHOLD,
        }
    }
}

/// One IOU sample per ground-truth box across all pairs. Single-box traits
/// score the max-probability prediction of the gt's class; slap traits are
/// filtered for stacking and matched by center distance. Missing
/// predictions contribute IOU 0.
pub fn collect_ious(pairs: &[EvalPair], cfg: &CollectConfig) -> Vec<(TraitClass, f64)> {
    let mut out = Vec::new();
    let mut sorted: Vec<&EvalPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    for pair in sorted {
        for class in TraitClass::ALL {
            let gts: Vec<(BBox, TraitClass)> = pair
                .ground_truths
                .iter()
                .filter(|(_, c)| *c == class)
                .cloned()
                .collect();
            if gts.is_empty() {
                continue;
            }
            let preds: Vec<Detection> = pair
                .predictions
                .iter()
                .filter(|p| p.label == Some(class))
                .cloned()
                .collect();

            if cfg.slap_traits.contains(&class) {
                let filtered = slap_filter(&preds, cfg.x_overlap_threshold);
                let matches = match_boxes(&filtered, &gts);
                for m in matches {
                    out.push((class, m.map_or(0.0, |(_, v)| v)));
                }
            } else {
                // Max-probability prediction of this class, one IOU per gt.
                let best = preds
                    .iter()
                    .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap());
                for (gt_box, _) in &gts {
                    out.push((class, best.map_or(0.0, |p| iou(&p.bbox, gt_box))));
                }
            }
        }
    }
    out
}

// ── accuracy curve ───────────────────────────────────────────────────

/// Accuracy as a function of IOU threshold, derived from a fine histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub counts: Vec<u64>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Threshold of bin `i`.
pub fn curve_threshold(i: usize) -> f64 {
    i as f64 * CURVE_STEP
}

/// Bin whose half-open interval `[t_i, t_{i+1})` contains `x`; adjusted so
/// the result is exact with respect to the `curve_threshold` grid.
fn curve_bin(x: f64) -> usize {
    let mut i = ((x / CURVE_STEP) as usize).min(CURVE_BINS - 1);
    while curve_threshold(i) > x {
        i -= 1;
    }
    while i + 1 < CURVE_BINS && curve_threshold(i + 1) <= x {
        i += 1;
    }
    i
}

/// Build the curve from raw IOU samples.
pub fn accuracy_curve(ious: &[f64]) -> Result<AccuracyCurve, EvalError> {
    if ious.is_empty() {
        return Err(EvalError::EmptyInput("iou samples"));
    }
    let mut counts = vec![0u64; CURVE_BINS];
    for &v in ious {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::IouOutOfRange(v));
        }
        counts[curve_bin(v)] += 1;
    }
    // Integer cumulative counts keep `1 - cdf + pdf` exact: the result is
    // (n - cum_i + count_i) / n with no accumulation drift.
    let n = ious.len() as u64;
    let mut cum = 0u64;
    let mut pdf = vec![0.0; CURVE_BINS];
    let mut cdf = vec![0.0; CURVE_BINS];
    let mut accuracy = vec![0.0; CURVE_BINS];
    for i in 0..CURVE_BINS {
        cum += counts[i];
        pdf[i] = counts[i] as f64 / n as f64;
        cdf[i] = cum as f64 / n as f64;
        accuracy[i] = (n - cum + counts[i]) as f64 / n as f64;
    }
    Ok(AccuracyCurve {
        counts,
        pdf,
        cdf,
        accuracy,
    })
}

/// Fraction of samples with IOU >= t; the direct counting definition used
/// for the summary report cells.
pub fn fraction_at_least(ious: &[f64], t: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64
}

// ── precision / recall ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gt: usize,
}

impl PrCounts {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            return if self.gt == 0 { 1.0 } else { 0.0 };
        }
        self.correct as f64 / self.predicted as f64
    }

    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            return 1.0;
        }
        self.correct as f64 / self.gt as f64
    }
}

/// Count correct/predicted/gt boxes per trait at one IOU threshold. A
/// prediction is correct iff the distance correspondence matched it to a
/// same-class gt with IOU >= threshold. Slap-trait predictions are counted
/// after stacking filtration.
pub fn precision_recall(
    pairs: &[EvalPair],
    iou_threshold: f64,
    cfg: &CollectConfig,
) -> Result<BTreeMap<TraitClass, PrCounts>, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(EvalError::BadThreshold(iou_threshold));
    }
    let mut per_trait: BTreeMap<TraitClass, PrCounts> = BTreeMap::new();
    for class in TraitClass::ALL {
        per_trait.insert(class, PrCounts::default());
    }

    for pair in pairs {
        // Apply the slap filter to slap-trait predictions, keep the rest.
        let mut preds: Vec<Detection> = Vec::new();
        for class in TraitClass::ALL {
            let of_class: Vec<Detection> = pair
                .predictions
                .iter()
                .filter(|p| p.label == Some(class))
                .cloned()
                .collect();
            if cfg.slap_traits.contains(&class) {
                preds.extend(slap_filter(&of_class, cfg.x_overlap_threshold));
            } else {
                preds.extend(of_class);
            }
        }

        let matches = match_boxes(&preds, &pair.ground_truths);
        for (gi, m) in matches.iter().enumerate() {
            let class = pair.ground_truths[gi].1;
            let counts = per_trait.get_mut(&class).unwrap();
            counts.gt += 1;
            if let Some((_, v)) = m {
                if *v >= iou_threshold {
                    counts.correct += 1;
                }
            }
        }
        for p in &preds {
            per_trait.get_mut(&p.label.unwrap()).unwrap().predicted += 1;
        }
    }
    Ok(per_trait)
}

// ── full report ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Trait name, or "all" for the pooled row.
    pub label: String,
    /// Ground-truth box count behind the row; zero-sample traits are
    /// flagged rather than omitted.
    pub samples: usize,
    pub accuracy: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub rows: Vec<ReportRow>,
    /// Full accuracy-vs-threshold curves: one per trait plus "all".
    pub curves: Vec<(String, AccuracyCurve)>,
}

/// Produce the summary table (per trait and pooled) at the given IOU
/// thresholds plus the full curves.
pub fn evaluate(pairs: &[EvalPair], thresholds: &[f64]) -> Result<EvalReport, EvalError> {
    evaluate_with(pairs, thresholds, &CollectConfig::default())
}

pub fn evaluate_with(
    pairs: &[EvalPair],
    thresholds: &[f64],
    cfg: &CollectConfig,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput("eval pairs"));
    }
    for &t in thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(EvalError::BadThreshold(t));
        }
    }

    let samples = collect_ious(pairs, cfg);
    let pr: Vec<BTreeMap<TraitClass, PrCounts>> = thresholds
        .iter()
        .map(|&t| precision_recall(pairs, t, cfg))
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();

    let mut pooled: Vec<f64> = Vec::new();
    for class in TraitClass::ALL {
        let ious: Vec<f64> = samples
            .iter()
            .filter(|(c, _)| *c == class)
            .map(|(_, v)| *v)
            .collect();
        pooled.extend(&ious);
        let mut accuracy = Vec::new();
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        for (ti, &t) in thresholds.iter().enumerate() {
            accuracy.push(fraction_at_least(&ious, t));
            let counts = pr[ti][&class];
            precision.push(counts.precision());
            recall.push(counts.recall());
        }
        rows.push(ReportRow {
            label: class.name().to_string(),
            samples: ious.len(),
            accuracy,
            precision,
            recall,
        });
        if !ious.is_empty() {
            curves.push((class.name().to_string(), accuracy_curve(&ious)?));
        }
    }

    // Pooled row over every trait.
    let mut accuracy = Vec::new();
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for (ti, &t) in thresholds.iter().enumerate() {
        accuracy.push(fraction_at_least(&pooled, t));
        let total = pr[ti]
            .values()
            .fold(PrCounts::default(), |acc, c| PrCounts {
                correct: acc.correct + c.correct,
                predicted: acc.predicted + c.predicted,
                gt: acc.gt + c.gt,
            });
        precision.push(total.precision());
        recall.push(total.recall());
    }
    rows.push(ReportRow {
        label: "all".to_string(),
        samples: pooled.len(),
        accuracy,
        precision,
        recall,
    });
    curves.push(("all".to_string(), accuracy_curve(&pooled)?));

    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        rows,
        curves,
    })
}

impl EvalReport {
    /// Summary cell lookup; `label` is a trait name or "all".
    pub fn cell(&self, label: &str, threshold: f64, metric: &str) -> Option<f64> {
        let ti = self.thresholds.iter().position(|&t| t == threshold)?;
        let row = self.rows.iter().find(|r| r.label == label)?;
        match metric {
            "accuracy" => row.accuracy.get(ti).copied(),
            "precision" => row.precision.get(ti).copied(),
            "recall" => row.recall.get(ti).copied(),
            _ => None,
        }
    }

    /// Summary table as CSV, one row per trait plus the pooled row, with
    /// accuracy/precision/recall columns per threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trait,gt_boxes");
        for metric in ["accuracy", "precision", "recall"] {
            for t in &self.thresholds {
                out.push_str(&format!(",{metric}_{t}"));
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.label, row.samples));
            for values in [&row.accuracy, &row.precision, &row.recall] {
                for v in values {
                    if row.samples == 0 {
                        out.push_str(",na");
                    } else {
                        out.push_str(&format!(",{v}"));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

impl AccuracyCurve {
    /// Two-column CSV: threshold, accuracy. First row is threshold 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,accuracy\n");
        for i in 0..CURVE_BINS {
            out.push_str(&format!("{},{}\n", curve_threshold(i), self.accuracy[i]));
        }
        out
    }
}

/// Self-contained SVG line plot of one or more accuracy curves.
pub fn curves_svg(curves: &[(String, &AccuracyCurve)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#000000",
    ];
    let px = |t: f64| M + t * (W - 2.0 * M);
    let py = |a: f64| H - M - a * (H - 2.0 * M);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M,
        H - M
    ));
    for k in 0..=5 {
        let t = k as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{t:.1}</text>\n",
            px(t),
            H - M + 16.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{t:.1}</text>\n",
            M - 6.0,
            py(t) + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">IOU threshold</text>\n\
         <text x=\"14\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">accuracy</text>\n",
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0
    ));

    for (ci, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        let mut points = String::new();
        let stride = 200;
        let mut i = 0;
        while i < CURVE_BINS {
            points.push_str(&format!(
                "{:.2},{:.2} ",
                px(curve_threshold(i)),
                py(curve.accuracy[i])
            ));
            i += stride;
        }
        points.push_str(&format!(
            "{:.2},{:.2}",
            px(1.0),
            py(curve.accuracy[CURVE_BINS - 1])
        ));
        svg.push_str(&format!(
            "<polyline points=\"{points}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - M - 90.0,
            M + 16.0 * ci as f64 + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Join ground-truth and prediction record files into eval pairs. Every id
/// must appear in both files exactly once.
pub fn pairs_from_records(gt: &[Record], preds: &[Record]) -> Result<Vec<EvalPair>, EvalError> {
    let mut pred_by_id: BTreeMap<&str, &Record> = BTreeMap::new();
    for p in preds {
        if pred_by_id.insert(&p.id, p).is_some() {
            return Err(EvalError::IdMismatch(format!(
                "duplicate prediction record for {:?}",
                p.id
            )));
        }
    }
    let mut pairs = Vec::with_capacity(gt.len());
    for g in gt {
        let p = pred_by_id
            .remove(g.id.as_str())
            .ok_or_else(|| EvalError::IdMismatch(format!("no prediction record for {:?}", g.id)))?;
        pairs.push(EvalPair {
            image_id: g.id.clone(),
            predictions: p
                .boxes
                .iter()
                .map(|b| Detection::new(b.bbox, Some(b.label), b.score.unwrap_or(1.0)))
                .collect(),
            ground_truths: g.boxes.iter().map(|b| (b.bbox, b.label)).collect(),
        });
    }
    if let Some((id, _)) = pred_by_id.into_iter().next() {
        return Err(EvalError::IdMismatch(format!(
            "prediction record {id:?} has no ground truth"
        )));
    }
    Ok(pairs)
}
