use std::fmt::Write as _;

use crate::backbone::{BackboneConfig, GapTap, NUM_BLOCKS};
use crate::config::{ConfigDoc, Entry};
use crate::densecrf::{CrfMethod, CrfParams};
use crate::error::{Error, Result};
use crate::hideseek::{HidePolicy, PatchCount};
use crate::losses::{LossWeights, SwitchMode, SwitchPolicy};

/// Every training hyperparameter. Keys in the config text map 1:1 onto fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Fraction of training after which the learning rate drops.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub crf_in_training: bool,
    pub crf_every_k: usize,
    pub num_cam_branches: usize,
    pub freeze_cams: bool,
    /// With `freeze_cams`, the fraction of iterations spent training the CAM branches alone.
    pub cam_pretrain_fraction: f64,
    pub filter_threshold: f64,
    pub checkpoint_every: usize,
    pub snapshot_every: usize,
    pub backbone: BackboneConfig,
    /// `mean_pixel` is filled from the training split when not given.
    pub hide: HidePolicy,
    pub mean_pixel: Option<[f64; 3]>,
    pub crf: CrfParams,
    pub switch: SwitchPolicy,
    pub loss_weights: LossWeights,
    pub wsol_threshold: f64,
    pub nms_iou: f64,
    pub tious: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 8000,
            lr: 0.01,
            lr_drop_at: 0.5,
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            grad_clip: 1.0,
            seed: 0,
            crf_in_training: true,
            crf_every_k: 1,
            num_cam_branches: 2,
            freeze_cams: false,
            cam_pretrain_fraction: 0.4,
            filter_threshold: 0.5,
            checkpoint_every: 0,
            snapshot_every: 0,
            backbone: BackboneConfig::default(),
            hide: HidePolicy::default(),
            mean_pixel: None,
            crf: CrfParams::default(),
            switch: SwitchPolicy::default(),
            loss_weights: LossWeights::default(),
            wsol_threshold: 0.6,
            nms_iou: 0.3,
            tious: vec![0.5, 0.2],
        }
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.num_cam_branches == 0 {
            return Err(Error::InvalidArgument("at least one CAM branch is required".into()));
        }
        if self.crf_every_k == 0 {
            return Err(Error::InvalidArgument("crf_every_k must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_drop_at", self.lr_drop_at),
            ("cam_pretrain_fraction", self.cam_pretrain_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        self.backbone.validate()?;
        self.hide.validate()?;
        self.crf.validate()
    }

    /// Learning rate used at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        if (iteration as f64) < self.iterations as f64 * self.lr_drop_at {
            self.lr
        } else {
            self.lr * self.lr_drop_factor
        }
    }

    /// First iteration of the frozen-CAM phase, or `None` when training end to end.
    pub fn freeze_at(&self) -> Option<usize> {
        self.freeze_cams
            .then(|| (self.iterations as f64 * self.cam_pretrain_fraction).round() as usize)
    }

    pub fn from_doc(doc: &ConfigDoc) -> Result<Self> {
        let mut cfg = Self::default();
        for e in &doc.entries {
            cfg.apply(e)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_doc(&ConfigDoc::parse(text)?)
    }

    /// Sets one field from a section-qualified entry.
    pub fn apply(&mut self, e: &Entry) -> Result<()> {
        match e.key.as_str() {
            "iterations" => self.iterations = e.parse()?,
            "lr" => self.lr = e.parse()?,
            "lr_drop_at" => self.lr_drop_at = e.parse()?,
            "lr_drop_factor" => self.lr_drop_factor = e.parse()?,
            "momentum" => self.momentum = e.parse()?,
            "weight_decay" => self.weight_decay = e.parse()?,
            "grad_clip" => self.grad_clip = e.parse()?,
            "seed" => self.seed = e.parse()?,
            "crf_in_training" => self.crf_in_training = e.parse_bool()?,
            "crf_every_k" => self.crf_every_k = e.parse()?,
            "num_cam_branches" => self.num_cam_branches = e.parse()?,
            "freeze_cams" => self.freeze_cams = e.parse_bool()?,
            "cam_pretrain_fraction" => self.cam_pretrain_fraction = e.parse()?,
            "filter_threshold" => self.filter_threshold = e.parse()?,
            "checkpoint_every" => self.checkpoint_every = e.parse()?,
            "snapshot_every" => self.snapshot_every = e.parse()?,
            "backbone.input_size" => self.backbone.input_size = e.parse()?,
            "backbone.num_classes" => self.backbone.num_classes = e.parse()?,
            "backbone.gap_tap" => self.backbone.gap_tap = wrap_parse::<GapTap>(e)?,
            "backbone.widths" => {
                let w: Vec<usize> = e.parse_list()?;
                self.backbone.widths = w
                    .try_into()
                    .map_err(|_| e.error(format!("expected {NUM_BLOCKS} widths")))?;
            }
            "backbone.final_dilation" => self.backbone.final_dilation = e.parse()?,
            "hide.grid" => self.hide.grid = e.parse()?,
            "hide.hide_prob" => self.hide.hide_prob = e.parse()?,
            "hide.patch_count" => {
                self.hide.patch_count = if e.value == "random" {
                    PatchCount::Random
                } else {
                    PatchCount::Fixed(e.parse()?)
                }
            }
            "hide.mean_pixel" => {
                let v: Vec<f64> = e.parse_list()?;
                let m: [f64; 3] = v.try_into().map_err(|_| e.error("expected three values"))?;
                self.mean_pixel = Some(m);
                self.hide.mean_pixel = m;
            }
            "crf.w_appearance" => self.crf.w_appearance = e.parse()?,
            "crf.w_smoothness" => self.crf.w_smoothness = e.parse()?,
            "crf.sigma_alpha" => self.crf.sigma_alpha = e.parse()?,
            "crf.sigma_beta" => self.crf.sigma_beta = e.parse()?,
            "crf.sigma_gamma" => self.crf.sigma_gamma = e.parse()?,
            "crf.iterations" => self.crf.iterations = e.parse()?,
            "crf.method" => self.crf.method = wrap_parse::<CrfMethod>(e)?,
            "switch.mode" => self.switch.mode = wrap_parse::<SwitchMode>(e)?,
            "switch.warmup" => self.switch.warmup = e.parse()?,
            "switch.tau" => self.switch.tau = e.parse()?,
            "loss.seg" => self.loss_weights.seg = e.parse()?,
            "loss.cls1" => self.loss_weights.cls1 = e.parse()?,
            "loss.cls2" => self.loss_weights.cls2 = e.parse()?,
            "wsol.threshold" => self.wsol_threshold = e.parse()?,
            "wsol.nms_iou" => self.nms_iou = e.parse()?,
            "wsol.tiou" => self.tious = e.parse_list()?,
            other => return Err(e.error(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = &self.backbone;
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_drop_at = {}", self.lr_drop_at);
        let _ = writeln!(s, "lr_drop_factor = {}", self.lr_drop_factor);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "crf_in_training = {}", self.crf_in_training);
        let _ = writeln!(s, "crf_every_k = {}", self.crf_every_k);
        let _ = writeln!(s, "num_cam_branches = {}", self.num_cam_branches);
        let _ = writeln!(s, "freeze_cams = {}", self.freeze_cams);
        let _ = writeln!(s, "cam_pretrain_fraction = {}", self.cam_pretrain_fraction);
        let _ = writeln!(s, "filter_threshold = {}", self.filter_threshold);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "snapshot_every = {}", self.snapshot_every);
        let _ = writeln!(s, "\n[backbone]");
        let _ = writeln!(s, "input_size = {}", b.input_size);
        let _ = writeln!(s, "num_classes = {}", b.num_classes);
        let _ = writeln!(s, "gap_tap = {}", b.gap_tap.as_str());
        let _ = writeln!(s, "widths = {}", join(&b.widths));
        let _ = writeln!(s, "final_dilation = {}", b.final_dilation);
        let _ = writeln!(s, "\n[hide]");
        let _ = writeln!(s, "grid = {}", self.hide.grid);
        let _ = writeln!(s, "hide_prob = {}", self.hide.hide_prob);
        match self.hide.patch_count {
            PatchCount::Random => writeln!(s, "patch_count = random"),
            PatchCount::Fixed(n) => writeln!(s, "patch_count = {n}"),
        }
        .unwrap();
        if let Some(m) = self.mean_pixel {
            let _ = writeln!(s, "mean_pixel = {}", join(&m));
        }
        let c = &self.crf;
        let _ = writeln!(s, "\n[crf]");
        let _ = writeln!(s, "w_appearance = {}", c.w_appearance);
        let _ = writeln!(s, "w_smoothness = {}", c.w_smoothness);
        let _ = writeln!(s, "sigma_alpha = {}", c.sigma_alpha);
        let _ = writeln!(s, "sigma_beta = {}", c.sigma_beta);
        let _ = writeln!(s, "sigma_gamma = {}", c.sigma_gamma);
        let _ = writeln!(s, "iterations = {}", c.iterations);
        let _ = writeln!(s, "method = {}", c.method.as_str());
        let _ = writeln!(s, "\n[switch]");
        let _ = writeln!(s, "mode = {}", self.switch.mode.as_str());
        let _ = writeln!(s, "warmup = {}", self.switch.warmup);
        let _ = writeln!(s, "tau = {}", self.switch.tau);
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "seg = {}", self.loss_weights.seg);
        let _ = writeln!(s, "cls1 = {}", self.loss_weights.cls1);
        let _ = writeln!(s, "cls2 = {}", self.loss_weights.cls2);
        let _ = writeln!(s, "\n[wsol]");
        let _ = writeln!(s, "threshold = {}", self.wsol_threshold);
        let _ = writeln!(s, "nms_iou = {}", self.nms_iou);
        let _ = writeln!(s, "tiou = {}", join(&self.tious));
        s
    }
}

fn wrap_parse<T: std::str::FromStr<Err = Error>>(e: &Entry) -> Result<T> {
    e.value.parse::<T>().map_err(|err| match err {
        Error::InvalidArgument(msg) => e.error(msg),
        other => other,
    })
}
