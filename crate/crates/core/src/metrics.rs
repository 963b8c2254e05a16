//! Detection scores (precision, recall, F1, AP) and pose errors (IoU-2D,
//! VSS, ADD).

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, CameraIntrinsics, Pose, TriMesh};
use crate::raster::{mask_box, render};

/// Default IoU a detection needs with a ground-truth box to count as correct.
pub const DETECTION_IOU: f64 = 0.5;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub class: usize,
    pub pose: Pose,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    pub class: usize,
    pub pose: Pose,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub ground_truth: Vec<GtInstance>,
    pub predictions: Vec<PredInstance>,
}

/// Greedy matching in descending score order (stable): each prediction takes
/// the unmatched same-class ground truth of highest IoU above `iou_thresh`.
/// Returns, per prediction, the matched ground-truth index.
pub fn match_detections(frame: &FrameRecord, iou_thresh: f64) -> Vec<Option<usize>> {
    let p = &frame.predictions;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].score.total_cmp(&p[a].score));
    let mut taken = vec![false; frame.ground_truth.len()];
    let mut out = vec![None; p.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in frame.ground_truth.iter().enumerate() {
            if taken[g] || gt.class != p[i].class {
                continue;
            }
            let iou = box_iou(&p[i].bbox, &gt.bbox);
            if iou > iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// 1 when nothing is predicted.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Best precision at this or any higher recall.
    pub interpolated_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub iou_threshold: f64,
    pub rows: Vec<ThresholdRow>,
    /// Area under the all-point interpolated precision/recall curve.
    pub average_precision: f64,
}

fn prf(tp: usize, fp: usize, n_gt: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 };
    let f = if p + r == 0.0 || tp == 0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Precision, recall and F1 at each score threshold, plus AP.
///
/// Predictions with `score >= threshold` take part. Greedy matching follows
/// score order, so the matches at any threshold are a prefix of the matches
/// over all predictions.
pub fn detection_scores(records: &[FrameRecord], iou_thresh: f64, thresholds: &[f64]) -> DetectionReport {
    let n_gt: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    // (score, is_tp) over all predictions, ranked by score, stable in frame order
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for r in records {
        let m = match_detections(r, iou_thresh);
        ranked.extend(r.predictions.iter().zip(&m).map(|(p, m)| (p.score, m.is_some())));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    // precision/recall after each rank
    let mut curve = Vec::with_capacity(ranked.len());
    let mut tp = 0;
    for (k, &(_, hit)) in ranked.iter().enumerate() {
        tp += hit as usize;
        let (p, r, _) = prf(tp, k + 1 - tp, n_gt);
        curve.push((r, p));
    }
    let mut envelope = curve.iter().map(|c| c.1).collect::<Vec<_>>();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev_r) * envelope[k];
        prev_r = r;
    }
    if n_gt == 0 {
        ap = if ranked.is_empty() { 1.0 } else { 0.0 };
    }

    let rows = thresholds
        .iter()
        .map(|&t| {
            let kept = ranked.iter().filter(|(s, _)| *s >= t).count();
            let tp = ranked[..kept].iter().filter(|x| x.1).count();
            let fp = kept - tp;
            let (precision, recall, f1) = prf(tp, fp, n_gt);
            let interpolated_precision = if kept == 0 {
                1.0
            } else {
                envelope[kept - 1]
            };
            ThresholdRow {
                threshold: t,
                true_positives: tp,
                false_positives: fp,
                false_negatives: n_gt - tp,
                precision,
                recall,
                f1,
                interpolated_precision,
            }
        })
        .collect();
    DetectionReport {
        iou_threshold: iou_thresh,
        rows,
        average_precision: ap,
    }
}

/// IoU of the tight mask boxes of both poses; correct when above 0.5.
pub fn pose_iou2d(gt: &Pose, est: &Pose, mesh: &TriMesh, cam: &CameraIntrinsics) -> (f64, bool) {
    let v = match (mask_box(mesh, gt, cam), mask_box(mesh, est, cam)) {
        (Some(a), Some(b)) => box_iou(&a, &b),
        _ => 0.0,
    };
    (v, v > 0.5)
}

/// Visual surface similarity: IoU of the rendered masks (0 when both are empty).
pub fn vss(gt: &Pose, est: &Pose, mesh: &TriMesh, cam: &CameraIntrinsics) -> f64 {
    let a = render(mesh, gt, cam);
    let b = render(mesh, est, cam);
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.mask.iter().zip(&b.mask) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean vertex distance between the two poses; correct below a tenth of the
/// diameter.
pub fn add(gt: &Pose, est: &Pose, mesh: &TriMesh) -> (f64, bool) {
    let v = mesh.vertices();
    let d = v
        .iter()
        .map(|x| (gt.transform(x) - est.transform(x)).norm())
        .sum::<f64>()
        / v.len() as f64;
    (d, d < mesh.diameter() / 10.0)
}

/// Mean image distance (pixels) between the projections of all vertices.
pub fn mean_reprojection_error(gt: &Pose, est: &Pose, mesh: &TriMesh, cam: &CameraIntrinsics) -> f64 {
    let v = mesh.vertices();
    v.iter()
        .map(|x| (cam.project_unchecked(&gt.transform(x)) - cam.project_unchecked(&est.transform(x))).norm())
        .sum::<f64>()
        / v.len() as f64
}

/// `n` evenly spaced score thresholds from 1 down to 0 inclusive.
pub fn threshold_sweep(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0];
    }
    (0..n).map(|k| 1.0 - k as f64 / (n - 1) as f64).collect()
}
