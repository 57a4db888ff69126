//! Segmentation metrics and weakly-supervised localization scoring.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hideseek::resize_bilinear;
use crate::synthdata::GtBox;
use crate::tensor::Tensor;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} ground-truth pixels vs {} predictions", gt.len(), pred.len()),
            ));
        }
        if let Some(&bad) = gt.iter().chain(pred).find(|&&v| v as usize >= self.classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {} classes", self.classes)));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion_matrix", "merging matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// `IoU_c`, or `None` when the class is absent from both ground truth and prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        let tp = self.get(c, c);
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

pub fn pixel_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("pixel accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("mean IoU of an empty confusion matrix".into()));
    }
    let ious: Vec<f64> = (0..cm.classes).filter_map(|c| cm.iou(c)).collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub pca: f64,
    pub miou: f64,
}

impl SegReport {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            per_class_iou: (0..cm.classes).map(|c| cm.iou(c)).collect(),
            pca: pixel_accuracy(cm)?,
            miou: mean_iou(cm)?,
        })
    }

    /// `metric,value` rows: one `iou_<class>` per class, then `pca` and `miou`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "iou_{c},{v:.17}"),
                None => writeln!(out, "iou_{c},"),
            }
            .unwrap();
        }
        writeln!(out, "pca,{:.17}", self.pca).unwrap();
        writeln!(out, "miou,{:.17}", self.miou).unwrap();
        out
    }
}

/// Axis-aligned box with exclusive `x1`/`y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl From<&GtBox> for BBox {
    fn from(b: &GtBox) -> Self {
        Self {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// 1-based class id.
    pub class: usize,
}

/// Boxes from one class map `[h,w]` in `[0,1]`: bilinear upsampling to
/// `(width, height)`, binarization at `threshold`, 8-connected components.
/// Sorted by descending score (the map mass inside the component).
pub fn extract_boxes(cam: &Tensor, class: usize, image_size: (usize, usize), threshold: f64) -> Result<Vec<Detection>> {
    let [h, w] = *cam.shape() else {
        return Err(Error::shape("extract_boxes", format!("expected [h,w], got {:?}", cam.shape())));
    };
    let (iw, ih) = image_size;
    let up = resize_bilinear(&cam.detached().reshape(&[1, h, w])?, ih, iw)?;
    let v = up.data();
    let mut comp = vec![usize::MAX; iw * ih];
    let mut dets = Vec::new();
    let mut stack = Vec::new();
    for start in 0..iw * ih {
        if v[start] < threshold || comp[start] != usize::MAX {
            continue;
        }
        let id = dets.len();
        comp[start] = id;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (iw, ih, 0, 0);
        let mut mass = 0.0;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % iw, p / iw);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            mass += v[p];
            for ny in y.saturating_sub(1)..=(y + 1).min(ih - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(iw - 1) {
                    let q = ny * iw + nx;
                    if v[q] >= threshold && comp[q] == usize::MAX {
                        comp[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        dets.push(Detection {
            bbox: BBox { x0, y0, x1, y1 },
            score: mass,
            class,
        });
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(dets)
}

/// Greedy score-descending suppression within each class.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// All-points interpolated AP for one class; `None` when the class has no ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class: usize, tiou: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().flatten().filter(|g| g.class as usize == class).count();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (k, (img, d)) in ranked.iter().enumerate() {
        let empty = Vec::new();
        let img_gts = gts.get(*img).unwrap_or(&empty);
        let best = img_gts
            .iter()
            .enumerate()
            .filter(|(j, g)| g.class as usize == class && !matched[*img][*j])
            .map(|(j, g)| (j, d.bbox.iou(&BBox::from(g))))
            .filter(|&(_, iou)| iou >= tiou)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            matched[*img][j] = true;
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope, then area under the step curve.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let p_max = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[i].0 - prev_recall) * p_max;
        prev_recall = points[i].0;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsolReport {
    pub tious: Vec<f64>,
    /// `per_class[c][t]`: AP of class `c + 1` at `tious[t]`.
    pub per_class: Vec<Vec<Option<f64>>>,
}

impl WsolReport {
    pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize, tious: &[f64]) -> Self {
        let per_class = (1..=num_classes)
            .map(|c| tious.iter().map(|&t| average_precision(dets, gts, c, t)).collect())
            .collect();
        Self {
            tious: tious.to_vec(),
            per_class,
        }
    }

    /// Mean AP over classes with ground truth, per threshold.
    pub fn mean_ap(&self) -> Vec<f64> {
        (0..self.tious.len())
            .map(|t| {
                let v: Vec<f64> = self.per_class.iter().filter_map(|c| c[t]).collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for t in &self.tious {
            write!(out, ",ap@{t}").unwrap();
        }
        out.push('\n');
        for (c, row) in self.per_class.iter().enumerate() {
            write!(out, "{}", c + 1).unwrap();
            for v in row {
                match v {
                    Some(v) => write!(out, ",{v:.17}"),
                    None => write!(out, ","),
                }
                .unwrap();
            }
            out.push('\n');
        }
        out.push_str("mean");
        for v in self.mean_ap() {
            write!(out, ",{v:.17}").unwrap();
        }
        out.push('\n');
        out
    }
}
