//! Segmentation losses and the weak/pseudo-mask switching rule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hideseek::PseudoMask;
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Lower clamp inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Present classes (always containing background 0) and absent classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSets {
    present: Vec<usize>,
    absent: Vec<usize>,
}

impl LabelSets {
    /// From per-class image labels (index 0 is class 1); background is added.
    pub fn from_image_labels(labels: &[bool]) -> Self {
        let mut present = vec![0];
        let mut absent = Vec::new();
        for (c, &y) in labels.iter().enumerate() {
            if y {
                present.push(c + 1);
            } else {
                absent.push(c + 1);
            }
        }
        Self { present, absent }
    }

    pub fn present(&self) -> &[usize] {
        &self.present
    }

    pub fn absent(&self) -> &[usize] {
        &self.absent
    }

    pub fn num_channels(&self) -> usize {
        self.present.len() + self.absent.len()
    }
}

/// `(channels, pixels)` of a score tensor `[C+1,h,w]` or `[1,C+1,h,w]`.
fn score_dims(s: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *s.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h * w)),
        ref other => Err(Error::shape(op, format!("expected [C+1,h,w] scores, got {other:?}"))),
    }
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub fn softmax_scores(logits: &Tensor) -> Result<Tensor> {
    let (c, n) = score_dims(logits, "softmax_scores")?;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        let max = (0..c).map(|k| x[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (x[k * n + i] - max).exp();
            out[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * n + i] /= sum;
        }
    }
    Tensor::new(logits.shape(), out)
}

fn clamped_ln(v: f64) -> f64 {
    v.max(LOG_CLAMP).ln()
}

/// Derivative of `ln(max(v, clamp))`.
fn clamped_ln_grad(v: f64) -> f64 {
    if v > LOG_CLAMP {
        1.0 / v
    } else {
        0.0
    }
}

/// Spatial max of one channel and the first pixel attaining it.
fn channel_max(s: &[f64], c: usize, n: usize) -> (f64, usize) {
    let ch = &s[c * n..(c + 1) * n];
    let mut best = 0;
    for (i, &v) in ch.iter().enumerate() {
        if v > ch[best] {
            best = i;
        }
    }
    (ch[best], best)
}

fn check_sets(sets: &LabelSets, channels: usize) -> Result<()> {
    if sets.num_channels() != channels || sets.present.iter().chain(&sets.absent).any(|&c| c >= channels) {
        return Err(Error::shape(
            "weak_loss",
            format!("label sets cover {} classes, scores have {channels}", sets.num_channels()),
        ));
    }
    Ok(())
}

/// Image-tag loss on the per-class spatial maxima of `S`.
pub fn weak_loss_value(s: &Tensor, sets: &LabelSets) -> Result<f64> {
    let (c, n) = score_dims(s, "weak_loss")?;
    check_sets(sets, c)?;
    let d = s.data();
    let mut loss = 0.0;
    if !sets.present.is_empty() {
        let t: f64 = sets.present.iter().map(|&k| clamped_ln(channel_max(d, k, n).0)).sum();
        loss -= t / sets.present.len() as f64;
    }
    if !sets.absent.is_empty() {
        let t: f64 = sets
            .absent
            .iter()
            .map(|&k| clamped_ln(1.0 - channel_max(d, k, n).0))
            .sum();
        loss -= t / sets.absent.len() as f64;
    }
    Ok(loss)
}

#[derive(Debug)]
struct WeakLoss {
    sets: LabelSets,
    channels: usize,
    pixels: usize,
}

impl CustomOp for WeakLoss {
    fn name(&self) -> &'static str {
        "weak_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let g = grad_output[0];
        let d = inputs[0].data();
        let n = self.pixels;
        let mut grad = vec![0.0; self.channels * n];
        let np = self.sets.present.len() as f64;
        for &k in &self.sets.present {
            let (v, at) = channel_max(d, k, n);
            grad[k * n + at] -= g * clamped_ln_grad(v) / np;
        }
        let na = self.sets.absent.len() as f64;
        for &k in &self.sets.absent {
            let (v, at) = channel_max(d, k, n);
            grad[k * n + at] += g * clamped_ln_grad(1.0 - v) / na;
        }
        vec![grad]
    }
}

/// Graph version of [`weak_loss_value`]; gradient flows to `scores` (the softmax output).
pub fn weak_loss(g: &mut Graph, scores: Var, sets: &LabelSets) -> Result<Var> {
    let s = g.value(scores);
    let (channels, pixels) = score_dims(s, "weak_loss")?;
    let value = weak_loss_value(s, sets)?;
    Ok(g.custom(
        &[scores],
        Tensor::scalar(value),
        Box::new(WeakLoss {
            sets: sets.clone(),
            channels,
            pixels,
        }),
    ))
}

fn check_mask(s: &Tensor, mask: &PseudoMask) -> Result<(usize, usize)> {
    let (c, n) = score_dims(s, "smx_loss")?;
    let hw = &s.shape()[s.rank() - 2..];
    if hw != [mask.height(), mask.width()] {
        return Err(Error::shape(
            "smx_loss",
            format!("scores are {hw:?} but the pseudo-mask is {}x{}", mask.height(), mask.width()),
        ));
    }
    if mask.labels().iter().any(|&l| l as usize >= c) {
        return Err(Error::shape("smx_loss", format!("pseudo-mask label exceeds {c} channels")));
    }
    Ok((c, n))
}

/// `-(1/N) Σ_i log S_{i, l_i}`.
pub fn smx_loss_value(s: &Tensor, mask: &PseudoMask) -> Result<f64> {
    let (_, n) = check_mask(s, mask)?;
    let d = s.data();
    let sum: f64 = mask
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| clamped_ln(d[l as usize * n + i]))
        .sum();
    Ok(-sum / n as f64)
}

#[derive(Debug)]
struct SmxLoss {
    labels: Vec<u8>,
    channels: usize,
}

impl CustomOp for SmxLoss {
    fn name(&self) -> &'static str {
        "smx_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let d = inputs[0].data();
        let n = self.labels.len();
        let scale = grad_output[0] / n as f64;
        let mut grad = vec![0.0; self.channels * n];
        for (i, &l) in self.labels.iter().enumerate() {
            let at = l as usize * n + i;
            grad[at] = -scale * clamped_ln_grad(d[at]);
        }
        vec![grad]
    }
}

pub fn smx_loss(g: &mut Graph, scores: Var, mask: &PseudoMask) -> Result<Var> {
    let s = g.value(scores);
    let (channels, _) = check_mask(s, mask)?;
    let value = smx_loss_value(s, mask)?;
    Ok(g.custom(
        &[scores],
        Tensor::scalar(value),
        Box::new(SmxLoss {
            labels: mask.labels().to_vec(),
            channels,
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Weak,
    Smx,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Weak => "weak",
            Self::Smx => "smx",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(Self::Weak),
            "smx" => Ok(Self::Smx),
            other => Err(Error::InvalidArgument(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SwitchMode {
    None,
    Fixed,
    #[default]
    Adaptive,
}

impl SwitchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Fixed => "fixed",
            Self::Adaptive => "adaptive",
        }
    }
}

impl FromStr for SwitchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "fixed" => Ok(Self::Fixed),
            "adaptive" => Ok(Self::Adaptive),
            other => Err(Error::InvalidArgument(format!(
                "unknown switching mode `{other}` (none, fixed or adaptive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchPolicy {
    pub mode: SwitchMode,
    /// Warm-up iterations `n_i` that always use the weak loss.
    pub warmup: usize,
    /// Masks with at most `tau` foreground pixels count as noisy.
    pub tau: usize,
}

impl Default for SwitchPolicy {
    fn default() -> Self {
        Self {
            mode: SwitchMode::Adaptive,
            warmup: 500,
            tau: 0,
        }
    }
}

impl SwitchPolicy {
    pub fn choose(&self, iteration: usize, foreground_count: usize) -> LossKind {
        let weak = match self.mode {
            SwitchMode::None => false,
            SwitchMode::Fixed => iteration < self.warmup,
            SwitchMode::Adaptive => iteration < self.warmup || foreground_count <= self.tau,
        };
        if weak {
            LossKind::Weak
        } else {
            LossKind::Smx
        }
    }
}

pub fn select_loss(policy: &SwitchPolicy, iteration: usize, mask: &PseudoMask) -> LossKind {
    policy.choose(iteration, mask.foreground_count())
}

/// Weights of the segmentation loss and the two classification losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub cls1: f64,
    pub cls2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            cls1: 1.0,
            cls2: 1.0,
        }
    }
}

pub fn total_loss_value(seg: f64, cls1: f64, cls2: f64, w: LossWeights) -> f64 {
    w.seg * seg + w.cls1 * cls1 + w.cls2 * cls2
}

/// Weighted sum of the available terms; absent classification terms are skipped.
pub fn total_loss(g: &mut Graph, seg: Option<Var>, cls1: Option<Var>, cls2: Option<Var>, w: LossWeights) -> Result<Var> {
    let terms: Vec<(Var, f64)> = [(seg, w.seg), (cls1, w.cls1), (cls2, w.cls2)]
        .into_iter()
        .filter_map(|(v, k)| v.map(|v| (v, k)))
        .collect();
    g.weighted_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(c: usize, vals: Vec<f64>) -> Tensor {
        let n = vals.len() / c;
        Tensor::new(&[c, 1, n], vals).unwrap()
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax_scores(&scores(3, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.0])).unwrap();
        let b = softmax_scores(&scores(3, vec![5.0, 1.0, 7.0, -1.0, 5.5, 0.0])).unwrap();
        let z = softmax_scores(&Tensor::zeros(&[3, 2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let sum: f64 = (0..3).map(|k| a.data()[k * 2]).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn weak_loss_hand_values() {
        let sets = LabelSets {
            present: vec![0],
            absent: vec![],
        };
        let s = scores(1, vec![0.5, 0.25]);
        assert!((weak_loss_value(&s, &sets).unwrap() - 2f64.ln()).abs() < 1e-15);

        let sets = LabelSets::from_image_labels(&[true, false]);
        let perfect = scores(3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(weak_loss_value(&perfect, &sets).unwrap() <= 1e-11);
    }

    #[test]
    fn smx_uniform_is_log3() {
        let s = Tensor::full(&[3, 2, 2], 1.0 / 3.0);
        let mask = PseudoMask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        assert!((smx_loss_value(&s, &mask).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn switching_boundaries() {
        let fixed = SwitchPolicy {
            mode: SwitchMode::Fixed,
            warmup: 5000,
            tau: 0,
        };
        assert_eq!(fixed.choose(4999, 10), LossKind::Weak);
        assert_eq!(fixed.choose(5000, 0), LossKind::Smx);
        let adaptive = SwitchPolicy::default();
        assert_eq!(adaptive.choose(10_000, 0), LossKind::Weak);
        assert_eq!(adaptive.choose(10_000, 1), LossKind::Smx);
        let none = SwitchPolicy {
            mode: SwitchMode::None,
            ..Default::default()
        };
        assert_eq!(none.choose(0, 0), LossKind::Smx);
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights {
            seg: 1.0,
            cls1: 0.0,
            cls2: 0.0,
        };
        assert_eq!(total_loss_value(0.7, 3.0, 4.0, w), 0.7);
        assert_eq!(total_loss_value(0.0, 0.0, 0.0, LossWeights::default()), 0.0);
    }
}
