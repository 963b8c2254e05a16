use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::{softmax, Predictions};
use super::matching::{decode_box, PositiveTarget, TrainingTargets};
use super::Detection;
use crate::geometry::BBox;
use crate::{Error, Result};

const FORMAT: &str = "viewpose-tensor-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDtype {
    F32,
    F64,
}

impl TensorDtype {
    fn size(self) -> usize {
        match self {
            TensorDtype::F32 => 4,
            TensorDtype::F64 => 8,
        }
    }
}

/// Column widths of one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub offsets: usize,
    pub classes: usize,
    pub views: usize,
    pub inplane: usize,
}

impl TensorLayout {
    pub fn width(&self) -> usize {
        self.offsets + self.classes + self.views + self.inplane
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: TensorDtype,
    shape: [usize; 2],
    ordering: String,
    layout: TensorLayout,
}

/// A 2-D row-major array with a JSON header line followed by raw
/// little-endian values.
///
/// Prediction tensors hold one `(4 + C + V + R)` row per prior: corner
/// offsets, then class, view and in-plane logits. Target tensors use the
/// layout `offsets = 4, classes = 4` where the class columns are
/// `(role, class, view, inplane)` with role 0 unassigned, 1 positive,
/// 2 negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: TensorDtype,
    pub rows: usize,
    pub layout: TensorLayout,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: TensorDtype, rows: usize, layout: TensorLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * layout.width() {
            return Err(Error::Contract(format!(
                "{} values for a {}x{} tensor",
                data.len(),
                rows,
                layout.width()
            )));
        }
        Ok(Self {
            dtype,
            rows,
            layout,
            data,
        })
    }

    pub fn cols(&self) -> usize {
        self.layout.width()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols()..(r + 1) * self.cols()]
    }

    pub fn to_writer(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = Header {
            format: FORMAT.into(),
            dtype: self.dtype,
            shape: [self.rows, self.cols()],
            ordering: "row-major".into(),
            layout: self.layout,
        };
        let line = serde_json::to_string(&header).map_err(std::io::Error::other)?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.data.len() * self.dtype.size());
        for &v in &self.data {
            match self.dtype {
                TensorDtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                TensorDtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
        w.flush()
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)
            .map_err(|e| Error::Data(format!("tensor header: {e}")))?;
        let h: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Data(format!("tensor header: {e}")))?;
        if h.format != FORMAT || h.ordering != "row-major" {
            return Err(Error::Data(format!("unsupported tensor format {:?}/{:?}", h.format, h.ordering)));
        }
        if h.shape[1] != h.layout.width() {
            return Err(Error::Data("tensor shape disagrees with its layout".into()));
        }
        let count = h.shape[0] * h.shape[1];
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Data(format!("tensor body: {e}")))?;
        if bytes.len() != count * h.dtype.size() {
            return Err(Error::Data(format!(
                "tensor body has {} bytes, expected {}",
                bytes.len(),
                count * h.dtype.size()
            )));
        }
        let data = match h.dtype {
            TensorDtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            TensorDtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Self::new(h.dtype, h.shape[0], h.layout, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }

    pub fn from_predictions(p: &Predictions, dtype: TensorDtype) -> Result<Self> {
        p.check_shape()?;
        let layout = TensorLayout {
            offsets: 4,
            classes: p.num_classes,
            views: p.num_views,
            inplane: p.num_inplane,
        };
        let mut data = Vec::with_capacity(p.num_priors * layout.width());
        for i in 0..p.num_priors {
            data.extend_from_slice(&p.offset_row(i));
            data.extend_from_slice(p.class_row(i));
            data.extend_from_slice(p.view_row(i));
            data.extend_from_slice(p.inplane_row(i));
        }
        Self::new(dtype, p.num_priors, layout, data)
    }

    pub fn to_predictions(&self) -> Result<Predictions> {
        let l = self.layout;
        if l.offsets != 4 || l.classes < 2 {
            return Err(Error::Data("tensor is not a prediction tensor".into()));
        }
        let mut p = Predictions::zeros(self.rows, l.classes, l.views, l.inplane);
        for i in 0..self.rows {
            let row = self.row(i);
            let (o, rest) = row.split_at(4);
            let (c, rest) = rest.split_at(l.classes);
            let (v, r) = rest.split_at(l.views);
            p.offsets[i * 4..i * 4 + 4].copy_from_slice(o);
            p.class_logits[i * l.classes..(i + 1) * l.classes].copy_from_slice(c);
            p.view_logits[i * l.views..(i + 1) * l.views].copy_from_slice(v);
            p.inplane_logits[i * l.inplane..(i + 1) * l.inplane].copy_from_slice(r);
        }
        Ok(p)
    }

    pub fn from_targets(t: &TrainingTargets) -> Result<Self> {
        let layout = TensorLayout {
            offsets: 4,
            classes: 4,
            views: 0,
            inplane: 0,
        };
        let mut role = vec![0.0; t.num_priors()];
        for &n in &t.negatives {
            *role
                .get_mut(n)
                .ok_or_else(|| Error::Contract(format!("negative {n} out of range")))? = 2.0;
        }
        let mut data = Vec::with_capacity(t.num_priors() * 8);
        for (i, l) in t.labels.iter().enumerate() {
            match l {
                Some(p) => {
                    data.extend_from_slice(&p.offsets);
                    data.extend_from_slice(&[1.0, p.class_index as f64, p.view_id as f64, p.inplane_id as f64]);
                }
                None => {
                    data.extend_from_slice(&[0.0; 4]);
                    data.extend_from_slice(&[role[i], 0.0, 0.0, 0.0]);
                }
            }
        }
        Self::new(TensorDtype::F64, t.num_priors(), layout, data)
    }

    /// Inverse of [`Tensor::from_targets`]; per-target IoU and gt index are not stored.
    pub fn to_targets(&self) -> Result<TrainingTargets> {
        if self.layout.offsets != 4 || self.layout.classes != 4 || self.cols() != 8 {
            return Err(Error::Data("tensor is not a target tensor".into()));
        }
        let mut t = TrainingTargets::default();
        for i in 0..self.rows {
            let row = self.row(i);
            match row[4] as u8 {
                1 => {
                    t.positives.push(i);
                    t.labels.push(Some(PositiveTarget {
                        gt_index: 0,
                        iou: f64::NAN,
                        class_index: row[5] as usize,
                        view_id: row[6] as usize,
                        inplane_id: row[7] as usize,
                        offsets: [row[0], row[1], row[2], row[3]],
                    }));
                }
                2 => {
                    t.negatives.push(i);
                    t.labels.push(None);
                }
                _ => t.labels.push(None),
            }
        }
        Ok(t)
    }
}

/// Softmax-normalizes every prior and keeps those whose best non-background
/// probability reaches `threshold`, with boxes decoded and clamped to the image.
pub fn decode_detections(
    pred: &Predictions,
    priors: &[BBox],
    threshold: f64,
    image_width: f64,
    image_height: f64,
) -> Result<Vec<Detection>> {
    pred.check_shape()?;
    if priors.len() != pred.num_priors {
        return Err(Error::Contract(format!(
            "{} priors for {} prediction rows",
            priors.len(),
            pred.num_priors
        )));
    }
    let mut out = Vec::new();
    for (i, prior) in priors.iter().enumerate() {
        let class_scores = softmax(pred.class_row(i));
        let best = class_scores[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best < threshold {
            continue;
        }
        let offsets = pred.offset_row(i);
        out.push(Detection {
            prior_id: Some(i),
            class_scores,
            view_scores: softmax(pred.view_row(i)),
            inplane_scores: softmax(pred.inplane_row(i)),
            offsets,
            bbox: decode_box(prior, &offsets).clamp(image_width, image_height),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Predictions {
        let mut p = Predictions::zeros(3, 3, 2, 4);
        for (k, x) in p.class_logits.iter_mut().enumerate() {
            *x = k as f64 * 0.25 - 1.0;
        }
        for (k, x) in p.view_logits.iter_mut().enumerate() {
            *x = -(k as f64);
        }
        for (k, x) in p.inplane_logits.iter_mut().enumerate() {
            *x = (k % 3) as f64;
        }
        p.offsets = (0..12).map(|k| k as f64 * 0.01).collect();
        p
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let p = sample();
        let t = Tensor::from_predictions(&p, TensorDtype::F64).unwrap();
        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        let back = Tensor::from_reader(&buf[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_predictions().unwrap(), p);
    }

    #[test]
    fn f32_file_roundtrip() {
        let p = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.bin");
        Tensor::from_predictions(&p, TensorDtype::F32).unwrap().write(&path).unwrap();
        let q = Tensor::read(&path).unwrap().to_predictions().unwrap();
        for (a, b) in p.class_logits.iter().zip(&q.class_logits) {
            assert!((a - b).abs() < 1e-6);
        }
        let header = std::fs::read(&path).unwrap();
        let nl = header.iter().position(|&b| b == b'\n').unwrap();
        let h: serde_json::Value = serde_json::from_slice(&header[..nl]).unwrap();
        assert_eq!(h["shape"], serde_json::json!([3, 4 + 3 + 2 + 4]));
        assert_eq!(h["dtype"], "f32");
        assert_eq!(header.len() - nl - 1, 3 * 13 * 4);
    }

    #[test]
    fn truncated_body_rejected() {
        let t = Tensor::from_predictions(&sample(), TensorDtype::F64).unwrap();
        let mut buf = Vec::new();
        t.to_writer(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Tensor::from_reader(&buf[..]), Err(Error::Data(_))));
        assert!(Tensor::from_reader(&b"not json\n"[..]).is_err());
    }

    #[test]
    fn targets_roundtrip() {
        let t = TrainingTargets {
            labels: vec![
                None,
                Some(PositiveTarget {
                    gt_index: 0,
                    iou: 0.8,
                    class_index: 2,
                    view_id: 5,
                    inplane_id: 7,
                    offsets: [0.1, 0.2, -0.1, 0.0],
                }),
                None,
            ],
            positives: vec![1],
            negatives: vec![2],
        };
        let back = Tensor::from_targets(&t).unwrap().to_targets().unwrap();
        assert_eq!(back.positives, t.positives);
        assert_eq!(back.negatives, t.negatives);
        let (a, b) = (back.labels[1].unwrap(), t.labels[1].unwrap());
        assert_eq!((a.class_index, a.view_id, a.inplane_id, a.offsets), (b.class_index, b.view_id, b.inplane_id, b.offsets));
    }

    #[test]
    fn decode_threshold_and_clamp() {
        let mut p = Predictions::zeros(2, 2, 1, 1);
        p.class_logits = vec![0.0, 3.0, 3.0, 0.0];
        p.offsets = vec![-1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        let priors = vec![BBox::new(10.0, 10.0, 60.0, 60.0), BBox::new(0.0, 0.0, 5.0, 5.0)];
        let d = decode_detections(&p, &priors, 0.5, 70.0, 70.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].prior_id, Some(0));
        assert_eq!(d[0].bbox, BBox::new(0.0, 10.0, 70.0, 60.0));
        assert!((d[0].class_scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
