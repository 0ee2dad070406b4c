//! Detection-quality metrics: axis-aligned 3D IoU, average precision with
//! all-point PR interpolation, and comparison reports over sensor /
//! integration configurations plus the timing table.

use serde::{Deserialize, Serialize};

use crate::model::Detection;
use crate::runtime::TimingReport;
use crate::scene::TruthBox;

/// Axis-aligned box for metric computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl From<&Detection> for Box3 {
    fn from(d: &Detection) -> Self {
        Box3 {
            center: d.center,
            size: d.size,
        }
    }
}

impl From<&TruthBox> for Box3 {
    fn from(b: &TruthBox) -> Self {
        Box3 {
            center: b.center,
            size: b.size,
        }
    }
}

/// Intersection volume over union volume of two axis-aligned boxes.
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let mut inter = 1.0;
    let mut va = 1.0;
    let mut vb = 1.0;
    for k in 0..3 {
        let (a0, a1) = (a.center[k] - a.size[k] / 2.0, a.center[k] + a.size[k] / 2.0);
        let (b0, b1) = (b.center[k] - b.size[k] / 2.0, b.center[k] + b.size[k] / 2.0);
        inter *= (a1.min(b1) - a0.max(b0)).max(0.0);
        va *= a1 - a0;
        vb *= b1 - b0;
    }
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (va + vb - inter)
}

/// One precision/recall point after scoring a detection prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Outcome of one AP evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub pr: Vec<PrPoint>,
    pub matched: usize,
    pub false_positives: usize,
    pub missed: usize,
    /// Set when truth was empty but detections were present (AP forced to 0).
    pub empty_truth_warning: bool,
}

/// Average precision at one IoU threshold.
///
/// Detections are ranked by descending score; each one greedily matches the
/// highest-IoU still-unmatched truth box at IoU >= threshold. AP is the area
/// under the all-point interpolated PR curve (the precision envelope is made
/// non-increasing before integration).
pub fn average_precision(dets: &[Detection], truth: &[TruthBox], iou_threshold: f64) -> ApResult {
    average_precision_pooled(&[(dets.to_vec(), truth.to_vec())], iou_threshold)
}

/// AP pooled over frames: detections rank globally, matching stays within
/// each detection's own frame.
pub fn average_precision_pooled(
    frames: &[(Vec<Detection>, Vec<TruthBox>)],
    iou_threshold: f64,
) -> ApResult {
    let total_truth: usize = frames.iter().map(|(_, t)| t.len()).sum();
    let total_dets: usize = frames.iter().map(|(d, _)| d.len()).sum();
    if total_truth == 0 {
        return ApResult {
            ap: 0.0,
            pr: Vec::new(),
            matched: 0,
            false_positives: total_dets,
            missed: 0,
            empty_truth_warning: total_dets > 0,
        };
    }

    // Global rank order: score descending, stable within ties.
    let mut ranked: Vec<(usize, usize)> = Vec::with_capacity(total_dets);
    for (fi, (dets, _)) in frames.iter().enumerate() {
        for di in 0..dets.len() {
            ranked.push((fi, di));
        }
    }
    ranked.sort_by(|a, b| {
        let sa = frames[a.0].0[a.1].score;
        let sb = frames[b.0].0[b.1].score;
        sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut truth_used: Vec<Vec<bool>> = frames.iter().map(|(_, t)| vec![false; t.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr = Vec::with_capacity(ranked.len());
    for (fi, di) in ranked {
        let det = &frames[fi].0[di];
        let det_box = Box3::from(det);
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in frames[fi].1.iter().enumerate() {
            if truth_used[fi][ti] {
                continue;
            }
            let iou = iou3d(&det_box, &Box3::from(t));
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((ti, iou));
            }
        }
        match best {
            Some((ti, _)) => {
                truth_used[fi][ti] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        pr.push(PrPoint {
            recall: tp as f64 / total_truth as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }

    // All-point interpolation: walk the curve from the back carrying the
    // precision envelope; each recall decrement contributes the envelope
    // value valid over that segment.
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut next_recall = 0.0;
    for p in pr.iter().rev() {
        envelope = envelope.max(p.precision);
        if next_recall > 0.0 {
            ap += (next_recall - p.recall) * envelope;
        }
        next_recall = p.recall;
    }
    ap += next_recall * envelope;

    ApResult {
        ap,
        pr,
        matched: tp,
        false_positives: fp,
        missed: total_truth - tp,
        empty_truth_warning: false,
    }
}

/// One row of the comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub label: String,
    /// `(iou_threshold, result)` pairs, typically 0.3 and 0.5.
    pub per_threshold: Vec<(f64, ApResult)>,
}

impl EvalResult {
    pub fn ap_at(&self, thr: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| (*t - thr).abs() < 1e-9)
            .map(|(_, r)| r.ap)
    }
}

/// The full report document: accuracy rows plus the timing table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<EvalResult>,
    pub timing: Option<TimingReport>,
}

impl Report {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    /// Fixed-width accuracy table followed by the timing table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>8} {:>8}  {:>7} {:>7} {:>7}\n",
            "configuration", "AP@0.3", "AP@0.5", "match", "fp", "miss"
        ));
        for row in &self.rows {
            let ap3 = row.ap_at(0.3).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let ap5 = row.ap_at(0.5).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let first = row.per_threshold.first().map(|(_, r)| r);
            let (m, f, s) = first
                .map(|r| (r.matched, r.false_positives, r.missed))
                .unwrap_or((0, 0, 0));
            out.push_str(&format!(
                "{:<28} {:>8} {:>8}  {:>7} {:>7} {:>7}\n",
                row.label, ap3, ap5, m, f, s
            ));
        }
        if let Some(t) = &self.timing {
            out.push('\n');
            out.push_str(&t.to_text());
        }
        out
    }
}

/// Builds the comparison document from per-configuration results.
pub fn eval_report(results: Vec<EvalResult>, timing: Option<TimingReport>) -> Report {
    Report {
        rows: results,
        timing,
    }
}
