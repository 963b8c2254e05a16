//! Prior-box lattice, target assignment, hard negatives and the multibox loss.
//!
//! Boxes are corner boxes in image pixels. Class vectors carry the
//! background class at index 0, so object class `c` (0-based model index)
//! lives at index `c + 1`.

mod loss;
mod matching;
mod tensor;

pub use loss::{multibox_loss, softmax, LossOutput, LossWeights, Predictions};
pub use matching::{
    decode_box, encode_box, match_priors, select_hard_negatives, GroundTruthBox, PositiveTarget,
    TrainingTargets, POSITIVE_IOU,
};
pub use tensor::{decode_detections, Tensor, TensorDtype};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result};

/// One box shape: size relative to the image and aspect ratio (w / h).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxShape {
    pub size: f64,
    pub aspect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub map_w: usize,
    pub map_h: usize,
    pub shapes: Vec<BoxShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub scales: Vec<ScaleConfig>,
}

/// Feature-map sizes of the six prediction scales.
pub const DEFAULT_MAPS: [usize; 6] = [71, 35, 17, 9, 5, 3];
/// Boxes per location for each scale; the lattice totals 21222 priors.
pub const DEFAULT_BOXES_PER_LOCATION: [usize; 6] = [3, 3, 6, 6, 6, 6];

impl PriorConfig {
    /// Six-scale layout with sizes spread linearly from 0.1 to 0.9 of the image.
    pub fn default_for(image_width: f64, image_height: f64) -> Self {
        let n = DEFAULT_MAPS.len();
        let size = |k: usize| 0.1 + 0.8 * k as f64 / (n - 1) as f64;
        let scales = DEFAULT_MAPS
            .iter()
            .zip(DEFAULT_BOXES_PER_LOCATION)
            .enumerate()
            .map(|(k, (&m, b))| {
                let s = size(k);
                let s_next = if k + 1 < n { size(k + 1) } else { 1.0 };
                let mut shapes = vec![
                    BoxShape { size: s, aspect: 1.0 },
                    BoxShape { size: s, aspect: 2.0 },
                    BoxShape { size: s, aspect: 0.5 },
                ];
                if b == 6 {
                    shapes.push(BoxShape { size: s, aspect: 3.0 });
                    shapes.push(BoxShape { size: s, aspect: 1.0 / 3.0 });
                    shapes.push(BoxShape {
                        size: (s * s_next).sqrt(),
                        aspect: 1.0,
                    });
                }
                ScaleConfig {
                    map_w: m,
                    map_h: m,
                    shapes,
                }
            })
            .collect();
        Self {
            image_width,
            image_height,
            scales,
        }
    }

    pub fn num_priors(&self) -> usize {
        self.scales.iter().map(|s| s.map_w * s.map_h * s.shapes.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.image_width > 0.0
            && self.image_height > 0.0
            && !self.scales.is_empty()
            && self.scales.iter().all(|s| {
                s.map_w > 0
                    && s.map_h > 0
                    && !s.shapes.is_empty()
                    && s.shapes.iter().all(|b| b.size > 0.0 && b.aspect > 0.0)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid prior configuration".into()))
        }
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::default_for(299.0, 299.0)
    }
}

/// Prior boxes in scale-major, row-major, shape-minor order, clamped to the image.
pub fn generate_priors(cfg: &PriorConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut out = Vec::with_capacity(cfg.num_priors());
    for s in &cfg.scales {
        for j in 0..s.map_h {
            for i in 0..s.map_w {
                let cx = (i as f64 + 0.5) / s.map_w as f64 * w;
                let cy = (j as f64 + 0.5) / s.map_h as f64 * h;
                for b in &s.shapes {
                    let r = b.aspect.sqrt();
                    out.push(BBox::from_center(cx, cy, b.size * w * r, b.size * h / r).clamp(w, h));
                }
            }
        }
    }
    Ok(out)
}

/// One decoded detector output: the `(4 + C + V + R)` record of a prior,
/// with scores as probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub prior_id: Option<usize>,
    pub class_scores: Vec<f64>,
    pub view_scores: Vec<f64>,
    pub inplane_scores: Vec<f64>,
    pub offsets: [f64; 4],
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl Detection {
    /// Index into `class_scores` of the best non-background class.
    pub fn class_index(&self) -> usize {
        let mut best = 1;
        for k in 2..self.class_scores.len() {
            if self.class_scores[k] > self.class_scores[best] {
                best = k;
            }
        }
        best
    }

    /// 0-based object class (model index).
    pub fn object_class(&self) -> usize {
        self.class_index() - 1
    }

    pub fn score(&self) -> f64 {
        self.class_scores.get(self.class_index()).copied().unwrap_or(0.0)
    }
}
