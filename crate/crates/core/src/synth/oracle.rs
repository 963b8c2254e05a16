use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Annotation, SceneModel};
use crate::anchors::Detection;
use crate::geometry::{BBox, CameraIntrinsics};

/// Neighboring views that absorb confusion mass.
const CONFUSION_NEIGHBORS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoise {
    /// Standard deviation of every box corner, pixels.
    pub box_jitter_px: f64,
    /// Probability that the top view is a neighbor of the true view.
    pub view_confusion: f64,
    /// Probability that the top in-plane bin is a neighbor of the true bin.
    pub inplane_confusion: f64,
    /// Standard deviation of the class score drop below 0.95.
    pub score_noise: f64,
    /// Expected false positives per frame.
    pub false_positive_rate: f64,
    /// Instances hidden beyond this fraction are not detected.
    pub max_occlusion: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            box_jitter_px: 0.0,
            view_confusion: 0.0,
            inplane_confusion: 0.0,
            score_noise: 0.0,
            false_positive_rate: 0.0,
            max_occlusion: 0.9,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Score vector peaked at `truth`. When confused, a random entry of
/// `neighbors` takes the peak and the truth comes second; the other
/// neighbors get small random mass.
fn peaked_scores(n: usize, truth: usize, neighbors: &[usize], confusion: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut s = vec![1e-4; n];
    for &k in neighbors {
        s[k] = rng.random_range(0.0..0.05);
    }
    if !neighbors.is_empty() && rng.random_bool(confusion.clamp(0.0, 1.0)) {
        let wrong = neighbors[rng.random_range(0..neighbors.len())];
        s[wrong] = 0.5;
        s[truth] = 0.25;
    } else {
        s[truth] = 0.8;
    }
    normalize(&mut s);
    s
}

/// Base view ids of the kept views nearest to kept view `view_id`.
fn view_neighbors(model: &SceneModel, view_id: usize) -> Vec<usize> {
    let views = model.viewspace.views();
    let v = views[view_id];
    let mut order: Vec<usize> = (0..views.len()).filter(|&k| k != view_id).collect();
    order.sort_by(|&a, &b| views[b].dot(&v).total_cmp(&views[a].dot(&v)));
    order.truncate(CONFUSION_NEIGHBORS);
    order.into_iter().map(|k| model.viewspace.base_index()[k]).collect()
}

fn class_scores(num_models: usize, class: usize, noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let drop = if noise > 0.0 {
        Normal::new(0.0, noise).expect("positive sigma").sample(rng).abs()
    } else {
        0.0
    };
    let p = (0.95 - drop).clamp(0.3, 0.95);
    let rest = (1.0 - p) / num_models as f64;
    let mut s = vec![rest; num_models + 1];
    s[class + 1] = p;
    s
}

/// One detection per sufficiently visible instance, with jittered corners
/// and score vectors over the base views, plus random false positives.
pub fn oracle_detector(
    annotations: &[Annotation],
    models: &[SceneModel],
    cam: &CameraIntrinsics,
    noise: &OracleNoise,
    rng: &mut impl Rng,
) -> Vec<Detection> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let jitter = Normal::new(0.0, noise.box_jitter_px.max(0.0)).expect("finite sigma");
    let mut out = Vec::new();
    for a in annotations {
        if a.visible_pixels == 0 || a.occlusion > noise.max_occlusion {
            continue;
        }
        let model = &models[a.class];
        let vs = &model.viewspace;
        let mut j = || if noise.box_jitter_px > 0.0 { jitter.sample(rng) } else { 0.0 };
        let bbox = BBox::new(a.bbox.x0 + j(), a.bbox.y0 + j(), a.bbox.x1 + j(), a.bbox.y1 + j()).clamp(w, h);
        let view_scores = peaked_scores(vs.base_len(), a.base_view_id, &view_neighbors(model, a.view_id), noise.view_confusion, rng);
        let r = vs.num_inplane();
        let inplane_nb: Vec<usize> = [a.inplane_id.wrapping_sub(1), a.inplane_id + 1]
            .into_iter()
            .filter(|&k| k < r)
            .collect();
        let inplane_scores = peaked_scores(r, a.inplane_id, &inplane_nb, noise.inplane_confusion, rng);
        out.push(Detection {
            prior_id: None,
            class_scores: class_scores(models.len(), a.class, noise.score_noise, rng),
            view_scores,
            inplane_scores,
            offsets: [0.0; 4],
            bbox,
        });
    }
    let mut budget = noise.false_positive_rate.max(0.0);
    while budget > 0.0 {
        let p = budget.min(1.0);
        budget -= 1.0;
        if !rng.random_bool(p) {
            continue;
        }
        let class = rng.random_range(0..models.len());
        let vs = &models[class].viewspace;
        let bw = rng.random_range(20.0..w / 3.0);
        let bh = rng.random_range(20.0..h / 3.0);
        let x0 = rng.random_range(0.0..w - bw);
        let y0 = rng.random_range(0.0..h - bh);
        let view = vs.base_index()[rng.random_range(0..vs.num_views())];
        let inplane = rng.random_range(0..vs.num_inplane());
        let mut cs = class_scores(models.len(), class, 0.0, rng);
        let p = rng.random_range(0.3..0.7);
        cs.iter_mut().for_each(|x| *x = (1.0 - p) / models.len() as f64);
        cs[class + 1] = p;
        out.push(Detection {
            prior_id: None,
            class_scores: cs,
            view_scores: peaked_scores(vs.base_len(), view, &[], 0.0, rng),
            inplane_scores: peaked_scores(vs.num_inplane(), inplane, &[], 0.0, rng),
            offsets: [0.0; 4],
            bbox: BBox::new(x0, y0, x0 + bw, y0 + bh),
        });
    }
    out
}
