use serde::{Deserialize, Serialize};

use super::loss::softmax;
use crate::geometry::BBox;
use crate::{Error, Result};

/// A prior is positive when its IoU with a ground-truth box exceeds this.
pub const POSITIVE_IOU: f64 = 0.5;

/// Corner deltas normalized by the prior's width (x) and height (y).
pub fn encode_box(prior: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (w, h) = (prior.width(), prior.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Domain(format!("prior {prior:?} has no extent")));
    }
    Ok([
        (gt.x0 - prior.x0) / w,
        (gt.y0 - prior.y0) / h,
        (gt.x1 - prior.x1) / w,
        (gt.y1 - prior.y1) / h,
    ])
}

pub fn decode_box(prior: &BBox, offsets: &[f64; 4]) -> BBox {
    let (w, h) = (prior.width(), prior.height());
    BBox::new(
        prior.x0 + offsets[0] * w,
        prior.y0 + offsets[1] * h,
        prior.x1 + offsets[2] * w,
        prior.y1 + offsets[3] * h,
    )
}

/// Annotated instance used for target assignment. `class_index` indexes the
/// class vector (0 = background), `view_id` the detector's view outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_index: usize,
    pub view_id: usize,
    pub inplane_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveTarget {
    pub gt_index: usize,
    pub iou: f64,
    pub class_index: usize,
    pub view_id: usize,
    pub inplane_id: usize,
    pub offsets: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTargets {
    /// One label per prior; `None` = unassigned.
    pub labels: Vec<Option<PositiveTarget>>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TrainingTargets {
    pub fn num_priors(&self) -> usize {
        self.labels.len()
    }
}

/// Every prior with IoU above [`POSITIVE_IOU`] against some ground truth
/// becomes positive for its best-IoU ground truth (lowest index on ties).
pub fn match_priors(priors: &[BBox], gts: &[GroundTruthBox]) -> Result<TrainingTargets> {
    if let Some(g) = gts.iter().find(|g| !(g.bbox.width() > 0.0 && g.bbox.height() > 0.0)) {
        return Err(Error::Domain(format!("ground-truth box {:?} is empty", g.bbox)));
    }
    let mut labels = Vec::with_capacity(priors.len());
    let mut positives = Vec::new();
    for (pid, prior) in priors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            let iou = prior.iou(&g.bbox);
            if iou > POSITIVE_IOU && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        let label = match best {
            Some((gi, iou)) => {
                let g = &gts[gi];
                positives.push(pid);
                Some(PositiveTarget {
                    gt_index: gi,
                    iou,
                    class_index: g.class_index,
                    view_id: g.view_id,
                    inplane_id: g.inplane_id,
                    offsets: encode_box(prior, &g.bbox)?,
                })
            }
            None => None,
        };
        labels.push(label);
    }
    Ok(TrainingTargets {
        labels,
        positives,
        negatives: Vec::new(),
    })
}

/// Picks `ratio · |positives|` unassigned priors with the highest
/// non-background probability, best first; ties go to the lower prior id.
///
/// `class_logits` is row-major `num_priors × num_classes` (background first).
pub fn select_hard_negatives(
    class_logits: &[f64],
    num_classes: usize,
    targets: &TrainingTargets,
    ratio: f64,
) -> Result<Vec<usize>> {
    let n = targets.num_priors();
    if num_classes < 2 || class_logits.len() != n * num_classes {
        return Err(Error::Contract(format!(
            "expected {n}×{num_classes} class scores, got {}",
            class_logits.len()
        )));
    }
    if class_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite class score".into()));
    }
    let quota = (ratio * targets.positives.len() as f64).round() as usize;
    let mut cand: Vec<(usize, f64)> = (0..n)
        .filter(|&p| targets.labels[p].is_none())
        .map(|p| {
            let probs = softmax(&class_logits[p * num_classes..(p + 1) * num_classes]);
            (p, probs[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(quota);
    Ok(cand.into_iter().map(|(p, _)| p).collect())
}
