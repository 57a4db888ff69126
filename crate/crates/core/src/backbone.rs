//! Small VGG-style trunk shared by the segmenter and every CAM branch.
//!
//! Five 3x3 conv+ReLU blocks, 2x2 max pooling after blocks 1-3 and a dilated
//! fifth block. Block 4 is the "mid" tap and block 5 the "last" tap. On top
//! sit a bias-free GAP classifier (the CAM head) and a 1x1 segmentation head
//! producing `C+1` logits per location.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gaussian, kaiming_uniform, Conv2dGeometry, CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

pub const NUM_BLOCKS: usize = 5;
const POOLED_BLOCKS: usize = 3;

/// Which feature map feeds global average pooling and the CAMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapTap {
    Mid,
    #[default]
    Last,
}

impl GapTap {
    pub fn as_str(self) -> &'static str {
        match self {
            GapTap::Mid => "mid",
            GapTap::Last => "last",
        }
    }
}

impl std::str::FromStr for GapTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid" | "mid_conv" => Ok(GapTap::Mid),
            "last" | "last_conv" => Ok(GapTap::Last),
            other => Err(Error::InvalidArgument(format!("unknown gap tap `{other}` (expected mid or last)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub widths: [usize; NUM_BLOCKS],
    pub gap_tap: GapTap,
    pub final_dilation: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: [8, 16, 32, 32, 32],
            gap_tap: GapTap::Last,
            final_dilation: 2,
            num_classes: 5,
        }
    }
}

impl BackboneConfig {
    /// Side length of both feature taps.
    pub fn feature_size(&self) -> usize {
        self.input_size >> POOLED_BLOCKS
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if self.widths.contains(&0) || self.final_dilation == 0 {
            return Err(Error::InvalidArgument("widths and dilation must be positive".into()));
        }
        if !self.input_size.is_multiple_of(1 << POOLED_BLOCKS) || self.feature_size() < 4 {
            return Err(Error::InvalidArgument(format!(
                "input size {} must be a multiple of 8 giving a feature map of at least 4x4",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn tap_width(&self, tap: GapTap) -> usize {
        match tap {
            GapTap::Mid => self.widths[3],
            GapTap::Last => self.widths[4],
        }
    }
}

/// Both feature taps of one trunk pass.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub mid: Var,
    pub last: Var,
}

impl Taps {
    pub fn select(&self, tap: GapTap) -> Var {
        match tap {
            GapTap::Mid => self.mid,
            GapTap::Last => self.last,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter handles for the shared network. Cloning a `Backbone` does not
/// copy weights; every instance reads the same [`ParamStore`] slots.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<ConvParams>,
    cam_head: ParamId,
    seg_head: ConvParams,
}

impl Backbone {
    /// Registers freshly initialized parameters: Kaiming-uniform conv and FC
    /// weights with zero biases, and a N(0, 0.1) segmentation head.
    pub fn init(config: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut in_ch = 3;
        for (b, &out_ch) in config.widths.iter().enumerate() {
            let weight = store.register(
                format!("block{}.weight", b + 1),
                kaiming_uniform(&[out_ch, in_ch, 3, 3], in_ch * 9, rng),
            )?;
            let bias = store.register(format!("block{}.bias", b + 1), Tensor::zeros(&[out_ch]))?;
            blocks.push(ConvParams { weight, bias });
            in_ch = out_ch;
        }
        let k = config.tap_width(config.gap_tap);
        let cam_head = store.register("cam_head.weight", kaiming_uniform(&[config.num_classes, k], k, rng))?;
        let last = config.widths[4];
        let seg_head = ConvParams {
            weight: store.register(
                "seg_head.weight",
                gaussian(&[config.num_classes + 1, last, 1, 1], 0.1, rng),
            )?,
            bias: store.register("seg_head.bias", Tensor::zeros(&[config.num_classes + 1]))?,
        };
        Ok(Self {
            config,
            blocks,
            cam_head,
            seg_head,
        })
    }

    /// Looks up the parameters of an existing store (e.g. a loaded checkpoint).
    pub fn bind(config: BackboneConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let get = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name:?}")))
        };
        let blocks = (1..=NUM_BLOCKS)
            .map(|b| {
                Ok(ConvParams {
                    weight: get(format!("block{b}.weight"))?,
                    bias: get(format!("block{b}.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let this = Self {
            blocks,
            cam_head: get("cam_head.weight".into())?,
            seg_head: ConvParams {
                weight: get("seg_head.weight".into())?,
                bias: get("seg_head.bias".into())?,
            },
            config,
        };
        let expect = [this.config.num_classes, this.config.tap_width(this.config.gap_tap)];
        if store.value(this.cam_head).shape() != expect {
            return Err(Error::shape(
                "backbone",
                format!(
                    "cam head is {:?}, config expects {expect:?}",
                    store.value(this.cam_head).shape()
                ),
            ));
        }
        Ok(this)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Trunk and CAM head: everything the classification branches train.
    pub fn cam_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| [b.weight, b.bias]).collect();
        ids.push(self.cam_head);
        ids
    }

    pub fn seg_head_params(&self) -> Vec<ParamId> {
        vec![self.seg_head.weight, self.seg_head.bias]
    }

    pub fn cam_head_id(&self) -> ParamId {
        self.cam_head
    }

    /// Trunk pass on a `[1,3,H,W]` image with values in `[0,1]`.
    pub fn forward_features(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Taps> {
        let shape = g.value(image).shape().to_vec();
        let s = self.config.input_size;
        if shape != [1, 3, s, s] {
            return Err(Error::shape("forward_features", format!("expected [1, 3, {s}, {s}], got {shape:?}")));
        }
        let mut x = image;
        let mut mid = None;
        for (b, p) in self.blocks.iter().enumerate() {
            let dilation = if b == NUM_BLOCKS - 1 { self.config.final_dilation } else { 1 };
            let w = g.param(store, p.weight);
            let bias = g.param(store, p.bias);
            x = g.conv2d(x, w, Some(bias), Conv2dGeometry::same3(dilation))?;
            x = g.relu(x);
            if b < POOLED_BLOCKS {
                x = g.max_pool2d(x, 2)?;
            }
            if b == 3 {
                mid = Some(x);
            }
        }
        Ok(Taps {
            mid: mid.expect("five blocks"),
            last: x,
        })
    }

    /// GAP followed by the bias-free class head: scores `[1, C]`.
    pub fn class_scores(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(features)?;
        let head = g.param(store, self.cam_head);
        g.fully_connected(pooled, head, None)
    }

    /// Segmentation logits `[1, C+1, h, w]` from the last tap.
    pub fn seg_logits(&self, g: &mut Graph, store: &ParamStore, last: Var) -> Result<Var> {
        let w = g.param(store, self.seg_head.weight);
        let b = g.param(store, self.seg_head.bias);
        g.conv2d(last, w, Some(b), Conv2dGeometry::default())
    }

    pub fn class_head<'a>(&self, store: &'a ParamStore) -> ClassHead<'a> {
        ClassHead {
            weights: store.value(self.cam_head),
        }
    }
}

/// Read-only view of the class weights `ω[c][k]`; there is no bias.
#[derive(Debug, Clone, Copy)]
pub struct ClassHead<'a> {
    weights: &'a Tensor,
}

impl<'a> ClassHead<'a> {
    pub fn new(weights: &'a Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape("class_head", format!("expected [C, K], got {:?}", weights.shape())));
        }
        Ok(Self { weights })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.weights.shape()[1]
    }

    fn row(&self, c: usize) -> &[f64] {
        self.weights.slab(c)
    }
}

fn feature_dims(features: &Tensor, head: &ClassHead) -> Result<(usize, usize)> {
    let s = features.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != head.width() {
        return Err(Error::shape(
            "class_activation_map",
            format!("features {s:?} do not match a head of width {}", head.width()),
        ));
    }
    Ok((s[2], s[3]))
}

/// `M_c(x,y) = Σ_k ω[c][k] f_k(x,y)` as an `[h, w]` tensor.
pub fn class_activation_map(features: &Tensor, head: &ClassHead, class: usize) -> Result<Tensor> {
    let (h, w) = feature_dims(features, head)?;
    if class >= head.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} classes",
            head.num_classes()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (k, &wk) in head.row(class).iter().enumerate() {
        let fk = &features.data()[k * plane..(k + 1) * plane];
        for (o, &f) in out.iter_mut().zip(fk) {
            *o += wk * f;
        }
    }
    Tensor::new(&[h, w], out)
}

/// All class maps stacked as `[C, h, w]`.
pub fn class_activation_maps(features: &Tensor, head: &ClassHead) -> Result<Tensor> {
    let (h, w) = feature_dims(features, head)?;
    let mut data = Vec::with_capacity(head.num_classes() * h * w);
    for c in 0..head.num_classes() {
        data.extend(class_activation_map(features, head, c)?.into_data());
    }
    Tensor::new(&[head.num_classes(), h, w], data)
}

/// Class scores without a graph: `s_c = Σ_k ω[c][k] · mean_xy f_k`.
pub fn class_scores_value(features: &Tensor, head: &ClassHead) -> Result<Vec<f64>> {
    let (h, w) = feature_dims(features, head)?;
    let plane = h * w;
    let pooled: Vec<f64> = features
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok((0..head.num_classes())
        .map(|c| head.row(c).iter().zip(&pooled).map(|(a, b)| a * b).sum())
        .collect())
}

#[derive(Debug)]
struct SquaredLabelLoss {
    targets: Vec<f64>,
}

impl CustomOp for SquaredLabelLoss {
    fn name(&self) -> &'static str {
        "squared_label_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let g = grad_output[0];
        let grad = inputs[0]
            .data()
            .iter()
            .zip(&self.targets)
            .map(|(&s, &y)| {
                let p = crate::tensor::sigmoid(s);
                g * 2.0 * (p - y) * p * (1.0 - p)
            })
            .collect();
        vec![grad]
    }
}

/// `Σ_c (sigmoid(s_c) - y_c)²` for a multi-hot target.
pub fn classification_loss_value(scores: &[f64], labels: &[bool]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let d = crate::tensor::sigmoid(s) - if y { 1.0 } else { 0.0 };
            d * d
        })
        .sum()
}

/// Graph version of [`classification_loss_value`]; `scores` is `[1, C]` or `[C]`.
pub fn classification_loss(g: &mut Graph, scores: Var, labels: &[bool]) -> Result<Var> {
    let s = g.value(scores);
    if s.numel() != labels.len() {
        return Err(Error::shape(
            "classification_loss",
            format!("{} scores for {} labels", s.numel(), labels.len()),
        ));
    }
    let value = classification_loss_value(s.data(), labels);
    let targets = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    Ok(g.custom(&[scores], Tensor::scalar(value), Box::new(SquaredLabelLoss { targets })))
}
