use crate::backbone::{class_activation_maps, class_scores_value};
use crate::densecrf::{mean_field, CrfModel};
use crate::error::{Error, Result};
use crate::evalkit::{extract_boxes, nms, ConfusionMatrix, Detection, SegReport, WsolReport};
use crate::hideseek::{map_set_to_probabilities, minmax_normalize, resize_bilinear};
use crate::losses::softmax_scores;
use crate::synthdata::Sample;
use crate::tensor::{sigmoid, Graph, Tensor};

use super::{network_input, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    pub filter: bool,
    pub crf: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { filter: true, crf: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    /// Per-pixel class ids at image resolution, 0 = background.
    pub labels: Vec<u8>,
    /// `sigmoid` of the CAM head applied to the segmenter features, one per class.
    pub class_scores: Vec<f64>,
    /// Per-class flags: `false` where the filter removed the class.
    pub kept: Vec<bool>,
}

struct Forward {
    probs: Tensor,
    features: Tensor,
}

fn forward(model: &Model, image: &Tensor) -> Result<Forward> {
    let size = model.config.backbone.input_size;
    if image.shape() != [1, 3, size, size] {
        return Err(Error::Data(format!(
            "image is {:?}, the model expects [1, 3, {size}, {size}]",
            image.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(network_input(image, model.config.hide.mean_pixel));
    let taps = model.backbone.forward_features(&mut g, &model.store, x)?;
    let logits = model.backbone.seg_logits(&mut g, &model.store, taps.last)?;
    let l = g.value(logits);
    let probs = softmax_scores(l)?.reshape(&l.shape()[1..])?;
    Ok(Forward {
        probs,
        features: g.value(taps.select(model.config.backbone.gap_tap)).detached(),
    })
}

/// Segmentation of one `[1,3,H,W]` image. The filter zeroes class channels
/// whose score is below the threshold and weights the others by their score;
/// background is never touched.
pub fn infer(model: &Model, image: &Tensor, opts: InferOptions) -> Result<Prediction> {
    let f = forward(model, image)?;
    let head = model.backbone.class_head(&model.store);
    let class_scores: Vec<f64> = class_scores_value(&f.features, &head)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let mut probs = f.probs;
    let mut kept = vec![true; class_scores.len()];
    if opts.filter {
        for (c, &gc) in class_scores.iter().enumerate() {
            let slab = probs.slab_mut(c + 1);
            if gc < model.config.filter_threshold {
                kept[c] = false;
                slab.fill(0.0);
            } else {
                slab.iter_mut().for_each(|v| *v *= gc);
            }
        }
    }
    let size = model.config.backbone.input_size;
    let mut up = resize_bilinear(&probs, size, size)?;
    if opts.crf {
        let dist = map_set_to_probabilities(&up);
        let crf = CrfModel::from_probabilities(&dist, image)?;
        up = mean_field(&crf, &model.config.crf)?;
    }
    let plane = size * size;
    let d = up.data();
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..=kept.len() {
                if kept[c - 1] && d[c * plane + i] > d[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(Prediction {
        width: size,
        height: size,
        labels,
        class_scores,
        kept,
    })
}

/// Pooled confusion matrix over `samples`, reported as per-class IoU, PCA and mIoU.
pub fn evaluate(model: &Model, samples: &[Sample], opts: InferOptions) -> Result<SegReport> {
    let mut cm = ConfusionMatrix::new(model.config.backbone.num_classes + 1);
    for s in samples {
        let pred = infer(model, &s.image.to_tensor(), opts)?;
        cm.accumulate(s.mask.data(), &pred.labels)?;
    }
    SegReport::from_matrix(&cm)
}

/// Report of a predictor that labels every pixel background.
pub fn background_baseline(samples: &[Sample], num_classes: usize) -> Result<SegReport> {
    let mut cm = ConfusionMatrix::new(num_classes + 1);
    for s in samples {
        cm.accumulate(s.mask.data(), &vec![0; s.mask.data().len()])?;
    }
    SegReport::from_matrix(&cm)
}

/// Localization: boxes from the clean-branch CAM of every class the
/// classifier predicts present, min-max normalized and thresholded.
pub fn wsol(model: &Model, samples: &[Sample], threshold: f64, tious: &[f64]) -> Result<WsolReport> {
    let head = model.backbone.class_head(&model.store);
    let num_classes = model.config.backbone.num_classes;
    let mut all = Vec::with_capacity(samples.len());
    for s in samples {
        let image = s.image.to_tensor();
        let f = forward(model, &image)?;
        let scores = class_scores_value(&f.features, &head)?;
        let mut cams = class_activation_maps(&f.features, &head)?;
        let [_, h, w] = *cams.shape() else { unreachable!() };
        let mut dets: Vec<Detection> = Vec::new();
        for c in 0..num_classes {
            if sigmoid(scores[c]) < model.config.filter_threshold {
                continue;
            }
            let slab = cams.slab_mut(c);
            minmax_normalize(slab);
            let cam = Tensor::new(&[h, w], slab.to_vec())?;
            dets.extend(extract_boxes(&cam, c + 1, (s.image.width(), s.image.height()), threshold)?);
        }
        all.push(nms(&dets, model.config.nms_iou));
    }
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    Ok(WsolReport::evaluate(&all, &gts, num_classes, tious))
}
