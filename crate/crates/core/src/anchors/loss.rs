use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matching::TrainingTargets;
use crate::{Error, Result};

/// Raw network outputs for every prior, each block row-major by prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub num_priors: usize,
    /// Class count including background.
    pub num_classes: usize,
    pub num_views: usize,
    pub num_inplane: usize,
    pub class_logits: Vec<f64>,
    pub view_logits: Vec<f64>,
    pub inplane_logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl Predictions {
    pub fn zeros(num_priors: usize, num_classes: usize, num_views: usize, num_inplane: usize) -> Self {
        Self {
            num_priors,
            num_classes,
            num_views,
            num_inplane,
            class_logits: vec![0.0; num_priors * num_classes],
            view_logits: vec![0.0; num_priors * num_views],
            inplane_logits: vec![0.0; num_priors * num_inplane],
            offsets: vec![0.0; num_priors * 4],
        }
    }

    pub fn check_shape(&self) -> Result<()> {
        let n = self.num_priors;
        if self.class_logits.len() != n * self.num_classes
            || self.view_logits.len() != n * self.num_views
            || self.inplane_logits.len() != n * self.num_inplane
            || self.offsets.len() != n * 4
            || self.num_classes < 2
        {
            return Err(Error::Contract("prediction blocks do not match declared shape".into()));
        }
        Ok(())
    }

    pub fn class_row(&self, p: usize) -> &[f64] {
        &self.class_logits[p * self.num_classes..(p + 1) * self.num_classes]
    }

    pub fn view_row(&self, p: usize) -> &[f64] {
        &self.view_logits[p * self.num_views..(p + 1) * self.num_views]
    }

    pub fn inplane_row(&self, p: usize) -> &[f64] {
        &self.inplane_logits[p * self.num_inplane..(p + 1) * self.num_inplane]
    }

    pub fn offset_row(&self, p: usize) -> [f64; 4] {
        let o = &self.offsets[p * 4..p * 4 + 4];
        [o[0], o[1], o[2], o[3]]
    }
}

/// Term weights: `α` for corner fit, `β` for viewpoint, `γ` for in-plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Scale of the class term (1 in the standard loss; 0 isolates the other terms).
    #[serde(default = "one")]
    pub class: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 2.5,
            gamma: 1.5,
            class: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    /// Unweighted sums of each term.
    pub class: f64,
    pub fit: f64,
    pub view: f64,
    pub inplane: f64,
    pub gradient: Predictions,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of `softmax(z)` against `label`, and its gradient w.r.t. `z`.
fn cross_entropy(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut g = softmax(z);
    g[label] -= 1.0;
    (lse - z[label], g)
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

struct PriorTerms {
    prior: usize,
    class: f64,
    fit: f64,
    view: f64,
    inplane: f64,
    g_class: Vec<f64>,
    g_view: Option<Vec<f64>>,
    g_inplane: Option<Vec<f64>>,
    g_fit: Option<[f64; 4]>,
}

/// `Σ_neg L_class + Σ_pos (L_class + α L_fit + β L_view + γ L_inplane)`,
/// summed over the image, with softmax cross-entropy classification terms
/// and smooth-L1 corner regression.
pub fn multibox_loss(
    pred: &Predictions,
    targets: &TrainingTargets,
    w: &LossWeights,
) -> Result<LossOutput> {
    pred.check_shape()?;
    if targets.num_priors() != pred.num_priors {
        return Err(Error::Contract(format!(
            "{} targets for {} priors",
            targets.num_priors(),
            pred.num_priors
        )));
    }
    for &p in &targets.positives {
        let l = targets
            .labels
            .get(p)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("positive prior {p} has no label")))?;
        if l.class_index == 0
            || l.class_index >= pred.num_classes
            || l.view_id >= pred.num_views
            || l.inplane_id >= pred.num_inplane
        {
            return Err(Error::Contract(format!("target of prior {p} is out of range")));
        }
    }
    if let Some(&p) = targets.negatives.iter().find(|&&p| p >= pred.num_priors) {
        return Err(Error::Contract(format!("negative prior {p} out of range")));
    }

    let negs = targets.negatives.par_iter().map(|&p| {
        let (l, g) = cross_entropy(pred.class_row(p), 0);
        PriorTerms {
            prior: p,
            class: l,
            fit: 0.0,
            view: 0.0,
            inplane: 0.0,
            g_class: g,
            g_view: None,
            g_inplane: None,
            g_fit: None,
        }
    });
    let pos = targets.positives.par_iter().map(|&p| {
        let t = targets.labels[p].expect("validated");
        let (lc, gc) = cross_entropy(pred.class_row(p), t.class_index);
        let (lv, gv) = cross_entropy(pred.view_row(p), t.view_id);
        let (li, gi) = cross_entropy(pred.inplane_row(p), t.inplane_id);
        let o = pred.offset_row(p);
        let mut lf = 0.0;
        let mut gf = [0.0; 4];
        for k in 0..4 {
            let (v, d) = smooth_l1(o[k] - t.offsets[k]);
            lf += v;
            gf[k] = d;
        }
        PriorTerms {
            prior: p,
            class: lc,
            fit: lf,
            view: lv,
            inplane: li,
            g_class: gc,
            g_view: Some(gv),
            g_inplane: Some(gi),
            g_fit: Some(gf),
        }
    });
    // collect in list order so the reduction below is fixed-order
    let terms: Vec<PriorTerms> = negs.chain(pos).collect();

    let mut grad = Predictions::zeros(pred.num_priors, pred.num_classes, pred.num_views, pred.num_inplane);
    let (mut class, mut fit, mut view, mut inplane) = (0.0, 0.0, 0.0, 0.0);
    for t in &terms {
        class += t.class;
        fit += t.fit;
        view += t.view;
        inplane += t.inplane;
        let p = t.prior;
        let c = pred.num_classes;
        for (dst, g) in grad.class_logits[p * c..(p + 1) * c].iter_mut().zip(&t.g_class) {
            *dst += w.class * g;
        }
        if let Some(gv) = &t.g_view {
            let v = pred.num_views;
            for (dst, g) in grad.view_logits[p * v..(p + 1) * v].iter_mut().zip(gv) {
                *dst += w.beta * g;
            }
        }
        if let Some(gi) = &t.g_inplane {
            let r = pred.num_inplane;
            for (dst, g) in grad.inplane_logits[p * r..(p + 1) * r].iter_mut().zip(gi) {
                *dst += w.gamma * g;
            }
        }
        if let Some(gf) = &t.g_fit {
            for k in 0..4 {
                grad.offsets[p * 4 + k] += w.alpha * gf[k];
            }
        }
    }
    Ok(LossOutput {
        total: w.class * class + w.alpha * fit + w.beta * view + w.gamma * inplane,
        class,
        fit,
        view,
        inplane,
        gradient: grad,
    })
}
