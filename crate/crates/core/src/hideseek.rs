//! Patch hiding, CAM fusion and pseudo-mask construction.

use std::path::Path;

use rand::Rng;

use crate::densecrf::{mean_field, CrfModel, CrfParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to map values before they are read as a distribution.
pub const UNARY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchCount {
    /// Every patch is hidden independently with probability `hide_prob`.
    #[default]
    Random,
    /// Exactly `n` distinct patches, chosen uniformly.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HidePolicy {
    pub grid: usize,
    pub hide_prob: f64,
    pub patch_count: PatchCount,
    /// RGB in the same scale as the images (`[0, 1]`).
    pub mean_pixel: [f64; 3],
}

impl Default for HidePolicy {
    fn default() -> Self {
        Self {
            grid: 4,
            hide_prob: 0.5,
            patch_count: PatchCount::Random,
            mean_pixel: [0.5; 3],
        }
    }
}

impl HidePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::InvalidArgument("hide grid must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hide_prob) {
            return Err(Error::InvalidArgument(format!(
                "hide probability {} outside [0, 1]",
                self.hide_prob
            )));
        }
        if let PatchCount::Fixed(n) = self.patch_count {
            if n > self.grid * self.grid {
                return Err(Error::InvalidArgument(format!(
                    "cannot hide {n} of {} patches",
                    self.grid * self.grid
                )));
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Draws which grid cells to hide, in row-major cell order.
    pub fn select_patches(&self, rng: &mut impl Rng) -> Vec<bool> {
        let n = self.num_patches();
        match self.patch_count {
            PatchCount::Random => (0..n).map(|_| rng.random::<f64>() < self.hide_prob).collect(),
            PatchCount::Fixed(k) => {
                let picked = rand::seq::index::sample(rng, n, k);
                let mut sel = vec![false; n];
                for i in picked.iter() {
                    sel[i] = true;
                }
                sel
            }
        }
    }
}

/// `(channels, height, width)` of a `[3,H,W]` or `[1,3,H,W]` image.
fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape("image", format!("expected [3,H,W] or [1,3,H,W], got {s:?}"))),
    }
}

/// Replaces the pixels of every selected cell with the mean pixel.
pub fn apply_hiding(image: &Tensor, policy: &HidePolicy, selected: &[bool]) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    let g = policy.grid;
    if c != 3 || h % g != 0 || w % g != 0 {
        return Err(Error::shape(
            "hide_patches",
            format!("image {c}x{h}x{w} is not RGB with sides divisible by grid {g}"),
        ));
    }
    if selected.len() != g * g {
        return Err(Error::shape(
            "hide_patches",
            format!("{} selection flags for a {g}x{g} grid", selected.len()),
        ));
    }
    let (ph, pw) = (h / g, w / g);
    let mut out = image.detached();
    let data = out.data_mut();
    for (cell, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
        let (gy, gx) = (cell / g, cell % g);
        for ch in 0..3 {
            for y in gy * ph..(gy + 1) * ph {
                let row = (ch * h + y) * w;
                data[row + gx * pw..row + (gx + 1) * pw].fill(policy.mean_pixel[ch]);
            }
        }
    }
    Ok(out)
}

pub fn hide_patches(image: &Tensor, policy: &HidePolicy, rng: &mut impl Rng) -> Result<Tensor> {
    policy.validate()?;
    let selected = policy.select_patches(rng);
    apply_hiding(image, policy, &selected)
}

/// Min-max normalizes in place; a constant slice becomes all zeros.
pub fn minmax_normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        values.fill(0.0);
        return;
    }
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = (*v - lo) / range;
    }
}

/// Sums class maps `[C,h,w]` from any number of branches and normalizes each class.
pub fn merge_cam_list(maps: &[&Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge_cams needs at least one map".into()))?;
    if first.rank() != 3 {
        return Err(Error::shape("merge_cams", format!("expected [C,h,w], got {:?}", first.shape())));
    }
    let mut sum = first.detached();
    for m in &maps[1..] {
        if m.shape() != first.shape() {
            return Err(Error::shape(
                "merge_cams",
                format!("shapes {:?} and {:?} differ", first.shape(), m.shape()),
            ));
        }
        for (s, &v) in sum.data_mut().iter_mut().zip(m.data()) {
            *s += v;
        }
    }
    for c in 0..first.shape()[0] {
        minmax_normalize(sum.slab_mut(c));
    }
    Ok(sum)
}

pub fn merge_cams(m1: &Tensor, m2: &Tensor) -> Result<Tensor> {
    merge_cam_list(&[m1, m2])
}

fn feature_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [k, h, w] | [1, k, h, w] => Ok((k, h, w)),
        ref s => Err(Error::shape("foreground_map", format!("expected [K,h,w], got {s:?}"))),
    }
}

fn channel_mean(t: &Tensor, k: usize, plane: usize) -> Vec<f64> {
    let mut acc = vec![0.0; plane];
    for ch in t.data().chunks_exact(plane) {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= k as f64;
    }
    acc
}

/// `P_f = minmax(mean_k(segmenter_mid) + mean_k(cam2_mid))`; with one branch
/// only the segmenter tap contributes.
pub fn foreground_map(segmenter_mid: &Tensor, cam2_mid: Option<&Tensor>) -> Result<Tensor> {
    let (k, h, w) = feature_dims(segmenter_mid)?;
    let mut pf = channel_mean(segmenter_mid, k, h * w);
    if let Some(other) = cam2_mid {
        let (k2, h2, w2) = feature_dims(other)?;
        if (h2, w2) != (h, w) {
            return Err(Error::shape(
                "foreground_map",
                format!("taps are {h}x{w} and {h2}x{w2}"),
            ));
        }
        for (p, v) in pf.iter_mut().zip(channel_mean(other, k2, h * w)) {
            *p += v;
        }
    }
    minmax_normalize(&mut pf);
    Tensor::new(&[h, w], pf)
}

/// Background channel followed by the class maps, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMapSet {
    maps: Tensor,
}

impl ActivationMapSet {
    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn background(&self) -> &[f64] {
        self.maps.slab(0)
    }

    /// Zeroes the class channels whose flag is false (flags are per class, without background).
    pub fn retain_classes(&mut self, present: &[bool]) {
        for (c, &keep) in present.iter().enumerate() {
            if !keep && c + 1 < self.channels() {
                self.maps.slab_mut(c + 1).fill(0.0);
            }
        }
    }

    /// Writes one 8-bit PGM per channel as `{prefix}_{k}.pgm`.
    pub fn dump_pgm(&self, dir: &Path, prefix: &str) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for k in 0..self.channels() {
            let pixels = self
                .maps
                .slab(k)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let gray = crate::synthdata::GrayImage::new(w, h, pixels)?;
            crate::synthdata::write_pgm(&dir.join(format!("{prefix}_{k}.pgm")), &gray)?;
        }
        Ok(())
    }
}

pub fn assemble_map_set(class_maps: &Tensor, pf: &Tensor) -> Result<ActivationMapSet> {
    let [c, h, w] = *class_maps.shape() else {
        return Err(Error::shape("assemble_map_set", format!("class maps {:?}", class_maps.shape())));
    };
    if pf.shape() != [h, w] {
        return Err(Error::shape(
            "assemble_map_set",
            format!("foreground map {:?} does not match {h}x{w}", pf.shape()),
        ));
    }
    let mut data = Vec::with_capacity((c + 1) * h * w);
    data.extend(pf.data().iter().map(|&p| 1.0 - p));
    data.extend_from_slice(class_maps.data());
    Ok(ActivationMapSet {
        maps: Tensor::new(&[c + 1, h, w], data)?,
    })
}

/// Bilinear resampling of `[C,h,w]` with pixel-center alignment and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else {
        return Err(Error::shape("resize_bilinear", format!("expected [C,h,w], got {:?}", t.shape())));
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("resize_bilinear", "empty extent".to_string()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(t.detached());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = t.slab(ch);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Per-pixel argmax over the leading axis of `[L,h,w]`; ties go to the lowest index.
pub fn argmax_channels(t: &Tensor) -> Vec<u8> {
    let labels = t.shape()[0];
    let plane = t.numel() / labels.max(1);
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for l in 1..labels {
                if t.data()[l * plane + i] > t.data()[best * plane + i] {
                    best = l;
                }
            }
            best as u8
        })
        .collect()
}

/// Per-pixel class labels at the segmenter score-map resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    foreground_count: usize,
}

impl PseudoMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(
                "pseudo_mask",
                format!("{} labels for {width}x{height}", labels.len()),
            ));
        }
        let foreground_count = labels.iter().filter(|&&l| l != 0).count();
        Ok(Self {
            width,
            height,
            labels,
            foreground_count,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground_count
    }
}

/// Per-pixel distribution over channels: values floored at [`UNARY_FLOOR`], then renormalized.
pub fn map_set_to_probabilities(maps: &Tensor) -> Tensor {
    let labels = maps.shape()[0];
    let plane = maps.numel() / labels;
    let mut p: Vec<f64> = maps.data().iter().map(|&v| v.max(UNARY_FLOOR)).collect();
    for i in 0..plane {
        let s: f64 = (0..labels).map(|l| p[l * plane + i]).sum();
        for l in 0..labels {
            p[l * plane + i] /= s;
        }
    }
    Tensor::new(maps.shape(), p).expect("same shape")
}

/// Eq. 5 pseudo-labels. With a CRF the maps are smoothed at image resolution
/// (`image` is `[3,H,W]` or `[1,3,H,W]` in `[0,1]`) and resized back.
pub fn build_pseudo_mask(
    set: &ActivationMapSet,
    image: &Tensor,
    crf: Option<&CrfParams>,
    target: (usize, usize),
) -> Result<PseudoMask> {
    let (tw, th) = target;
    let scores = match crf {
        None => resize_bilinear(set.maps(), th, tw)?,
        Some(params) => {
            let (_, h, w) = image_dims(image)?;
            let full = resize_bilinear(set.maps(), h, w)?;
            let probs = map_set_to_probabilities(&full);
            let model = CrfModel::from_probabilities(&probs, image)?;
            let q = mean_field(&model, params)?;
            resize_bilinear(&q, th, tw)?
        }
    };
    PseudoMask::new(tw, th, argmax_channels(&scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(size: usize) -> Tensor {
        let data = (0..3 * size * size).map(|i| (i % 17) as f64 / 17.0).collect();
        Tensor::new(&[1, 3, size, size], data).unwrap()
    }

    #[test]
    fn hide_extremes() {
        let img = ramp_image(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut policy = HidePolicy {
            hide_prob: 0.0,
            mean_pixel: [0.1, 0.2, 0.3],
            ..Default::default()
        };
        assert_eq!(hide_patches(&img, &policy, &mut rng).unwrap(), img);
        policy.hide_prob = 1.0;
        let all = hide_patches(&img, &policy, &mut rng).unwrap();
        for ch in 0..3 {
            assert!(all.data()[ch * 64..(ch + 1) * 64].iter().all(|&v| v == policy.mean_pixel[ch]));
        }
    }

    #[test]
    fn fixed_count_hides_exactly_n() {
        let policy = HidePolicy {
            patch_count: PatchCount::Fixed(5),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(policy.select_patches(&mut rng).iter().filter(|&&s| s).count(), 5);
        }
    }

    #[test]
    fn unselected_cells_untouched() {
        let img = ramp_image(8);
        let policy = HidePolicy {
            grid: 2,
            mean_pixel: [9.0; 3],
            ..Default::default()
        };
        let out = apply_hiding(&img, &policy, &[true, false, false, false]).unwrap();
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = (ch * 8 + y) * 8 + x;
                    if y < 4 && x < 4 {
                        assert_eq!(out.data()[i], 9.0);
                    } else {
                        assert_eq!(out.data()[i], img.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn merge_of_identical_maps_is_normalized_map() {
        let m = Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let merged = merge_cams(&m, &m).unwrap();
        assert_eq!(merged.data(), &[0.0, 0.5, 0.25, 1.0]);
        let flat = Tensor::full(&[1, 2, 2], 4.0);
        assert_eq!(merge_cams(&flat, &flat).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn background_complements_foreground() {
        let pf = Tensor::new(&[1, 3], vec![0.0, 0.3, 1.0]).unwrap();
        let maps = Tensor::zeros(&[2, 1, 3]);
        let set = assemble_map_set(&maps, &pf).unwrap();
        assert_eq!(set.background(), &[1.0, 0.7, 0.0]);
        for (b, p) in set.background().iter().zip(pf.data()) {
            assert_eq!(b + p, 1.0);
        }
    }

    #[test]
    fn foreground_with_zero_tap_uses_other() {
        let a = Tensor::new(&[2, 1, 2], vec![0.0, 2.0, 2.0, 4.0]).unwrap();
        let z = Tensor::zeros(&[2, 1, 2]);
        assert_eq!(foreground_map(&a, Some(&z)).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(foreground_map(&z, Some(&z)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let t = Tensor::full(&[2, 3, 3], 0.25);
        let up = resize_bilinear(&t, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let r = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&r, 2, 2).unwrap(), r);
        let up = resize_bilinear(&r, 4, 4).unwrap();
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[15], 3.0);
        assert_eq!(up.data()[1], 0.25);
    }

    #[test]
    fn pseudo_mask_argmax_and_ties() {
        let mut data = vec![0.2; 4 * 4];
        data[3 * 4..].fill(0.9);
        let set = ActivationMapSet {
            maps: Tensor::new(&[4, 2, 2], data).unwrap(),
        };
        let img = Tensor::zeros(&[3, 2, 2]);
        let mask = build_pseudo_mask(&set, &img, None, (2, 2)).unwrap();
        assert_eq!(mask.labels(), &[3; 4]);
        assert_eq!(mask.foreground_count(), 4);
        let uniform = ActivationMapSet {
            maps: Tensor::full(&[4, 2, 2], 0.5),
        };
        let mask = build_pseudo_mask(&uniform, &img, None, (2, 2)).unwrap();
        assert_eq!(mask.labels(), &[0; 4]);
        assert_eq!(mask.foreground_count(), 0);
    }

    #[test]
    fn probabilities_are_floored_distributions() {
        let maps = Tensor::new(&[2, 1, 2], vec![0.0, 0.5, 0.0, 0.5]).unwrap();
        let p = map_set_to_probabilities(&maps);
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
