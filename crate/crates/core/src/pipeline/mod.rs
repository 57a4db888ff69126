//! Training and inference orchestration.

mod ablate;
mod config;
mod infer;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablate::{parse_suite, run_suite, table_csv, AblationRow, AblationSuite, Variant};
pub use config::TrainConfig;
pub use infer::{background_baseline, evaluate, infer, wsol, InferOptions, Prediction};

use crate::backbone::{class_activation_maps, classification_loss, Backbone};
use crate::error::{Error, Result};
use crate::hideseek::{assemble_map_set, build_pseudo_mask, foreground_map, hide_patches, merge_cam_list, ActivationMapSet, PseudoMask};
use crate::losses::{select_loss, smx_loss, total_loss, weak_loss, LabelSets, LossKind, SwitchPolicy};
use crate::synthdata::{dataset_mean_pixel, Dataset, GrayImage, Sample};
use crate::tensor::{clip_grad_norm, load_checkpoint, save_checkpoint, sgd_step, Checkpoint, Graph, ParamStore, SgdConfig, Tensor};

/// RNG stream ids derived from the run seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_ORDER: u64 = 1;
pub const STREAM_HIDE: u64 = 2;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Network weights together with the configuration that produced them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
}

impl Model {
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_stream(config.seed, STREAM_INIT);
        let backbone = Backbone::init(config.backbone.clone(), &mut store, &mut rng)?;
        Ok(Self { config, store, backbone })
    }

    /// Weights plus the effective config text as metadata.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.config.to_text())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.metadata)?;
        let mut model = Self::init(config)?;
        model
            .store
            .load_values(ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// One training example in network form.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// `[1,3,H,W]` in `[0,1]`.
    pub image: Tensor,
    pub labels: Vec<bool>,
}

impl TrainSample {
    pub fn from_sample(sample: &Sample, num_classes: usize) -> Self {
        Self {
            image: sample.image.to_tensor(),
            labels: sample.labels(num_classes),
        }
    }
}

/// Per-iteration values; one row of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub iteration: usize,
    pub seg_loss: f64,
    pub cls1: f64,
    pub cls2: f64,
    pub chosen: LossKind,
    pub foreground_count: usize,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iteration,seg_loss,cls1,cls2,chosen_loss,foreground_count,lr";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.seg_loss, self.cls1, self.cls2, self.chosen, self.foreground_count, self.lr
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Data(format!("bad loss log row `{line}`: {what}"));
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad("non-numeric field"));
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad("non-integer field"));
        Ok(Self {
            iteration: int(0)?,
            seg_loss: num(1)?,
            cls1: num(2)?,
            cls2: num(3)?,
            chosen: f[4].parse()?,
            foreground_count: int(5)?,
            lr: num(6)?,
        })
    }
}

pub fn parse_loss_log(text: &str) -> Result<Vec<StepLog>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LOG_HEADER => {}
        _ => return Err(Error::Data(format!("loss log must start with `{LOG_HEADER}`"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(StepLog::parse_row).collect()
}

/// Iterations whose logged loss disagrees with the switching rule.
pub fn audit_switching(rows: &[StepLog], policy: &SwitchPolicy) -> Vec<usize> {
    rows.iter()
        .filter(|r| policy.choose(r.iteration, r.foreground_count) != r.chosen)
        .map(|r| r.iteration)
        .collect()
}

/// Network input: the image with the dataset mean pixel subtracted per channel,
/// so hidden patches enter the trunk as zeros.
pub fn network_input(image: &Tensor, mean: [f64; 3]) -> Tensor {
    let mut x = image.detached();
    let plane = image.numel() / 3;
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v -= mean[i / plane];
    }
    x
}

/// Everything a step produced besides the weight update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub log: StepLog,
    pub mask: PseudoMask,
    pub map_set: ActivationMapSet,
}

fn tensor_summary(name: &str, t: &Tensor) -> String {
    let bad = t.data().iter().filter(|v| !v.is_finite()).count();
    let finite = t.data().iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    format!("{name} {:?}: {bad} non-finite, finite range [{lo}, {hi}]\n", t.shape())
}

/// Joint update of the CAM branches and the segmenter on one image.
///
/// Branch 1 sees the clean image and shares its trunk pass with the
/// segmenter; branches 2.. see independently hidden copies.
pub fn train_step(model: &mut Model, sample: &TrainSample, iteration: usize, hide_rng: &mut ChaCha8Rng) -> Result<StepOutput> {
    let cfg = &model.config;
    let size = cfg.backbone.input_size;
    if sample.image.shape() != [1, 3, size, size] {
        return Err(Error::Data(format!(
            "training image is {:?}, the model expects [1, 3, {size}, {size}]",
            sample.image.shape()
        )));
    }
    let num_classes = cfg.backbone.num_classes;
    if sample.labels.len() != num_classes {
        return Err(Error::Data(format!("{} labels for {num_classes} classes", sample.labels.len())));
    }
    let tap = cfg.backbone.gap_tap;
    let store = &model.store;
    let bb = &model.backbone;
    let mut g = Graph::new();

    let mean = cfg.hide.mean_pixel;
    let x = g.constant(network_input(&sample.image, mean));
    let clean = bb.forward_features(&mut g, store, x)?;
    let scores1 = bb.class_scores(&mut g, store, clean.select(tap))?;
    let cls1 = classification_loss(&mut g, scores1, &sample.labels)?;

    let head = bb.class_head(store);
    let mut cams = vec![class_activation_maps(g.value(clean.select(tap)), &head)?];
    let mut hidden_cls = Vec::new();
    let mut first_hidden_mid = None;
    for _ in 1..cfg.num_cam_branches {
        let hidden = hide_patches(&sample.image, &cfg.hide, hide_rng)?;
        let xh = g.constant(network_input(&hidden, mean));
        let taps = bb.forward_features(&mut g, store, xh)?;
        let scores = bb.class_scores(&mut g, store, taps.select(tap))?;
        hidden_cls.push(classification_loss(&mut g, scores, &sample.labels)?);
        cams.push(class_activation_maps(g.value(taps.select(tap)), &head)?);
        first_hidden_mid.get_or_insert(taps.mid);
    }
    let cls2 = if hidden_cls.is_empty() {
        None
    } else {
        let w = 1.0 / hidden_cls.len() as f64;
        let terms: Vec<_> = hidden_cls.iter().map(|&v| (v, w)).collect();
        Some(g.weighted_sum(&terms)?)
    };

    let merged = merge_cam_list(&cams.iter().collect::<Vec<_>>())?;
    let pf = foreground_map(g.value(clean.mid), first_hidden_mid.map(|v| g.value(v)))?;
    let mut map_set = assemble_map_set(&merged, &pf)?;
    map_set.retain_classes(&sample.labels);

    let logits = bb.seg_logits(&mut g, store, clean.last)?;
    let (mh, mw) = {
        let s = g.value(logits).shape();
        (s[2], s[3])
    };
    let use_crf = cfg.crf_in_training && iteration.is_multiple_of(cfg.crf_every_k);
    let mask = build_pseudo_mask(&map_set, &sample.image, use_crf.then_some(&cfg.crf), (mw, mh))?;

    let probs = g.softmax(logits, 1)?;
    let chosen = select_loss(&cfg.switch, iteration, &mask);
    let seg = match chosen {
        LossKind::Weak => weak_loss(&mut g, probs, &LabelSets::from_image_labels(&sample.labels))?,
        LossKind::Smx => smx_loss(&mut g, probs, &mask)?,
    };

    let weights = cfg.loss_weights;
    let (terms, frozen_cams) = match cfg.freeze_at() {
        Some(at) if iteration < at => ((None, Some(cls1), cls2), false),
        Some(_) => ((Some(seg), None, None), true),
        None => ((Some(seg), Some(cls1), cls2), false),
    };
    let total = total_loss(&mut g, terms.0, terms.1, terms.2, weights)?;

    let log = StepLog {
        iteration,
        seg_loss: g.value(seg).item()?,
        cls1: g.value(cls1).item()?,
        cls2: match cls2 {
            Some(v) => g.value(v).item()?,
            None => 0.0,
        },
        chosen,
        foreground_count: mask.foreground_count(),
        lr: cfg.lr_at(iteration),
    };
    let total_value = g.value(total).item()?;
    if !total_value.is_finite() {
        let mut dump = format!("non-finite loss at iteration {iteration}: total {total_value}\n");
        dump.push_str(&tensor_summary("seg_logits", g.value(logits)));
        dump.push_str(&tensor_summary("seg_softmax", g.value(probs)));
        dump.push_str(&tensor_summary("cam_scores", g.value(scores1)));
        dump.push_str(&tensor_summary("map_set", map_set.maps()));
        for (name, t) in model.store.named().filter(|(_, t)| !t.all_finite()) {
            dump.push_str(&tensor_summary(name, t));
        }
        return Err(Error::Numeric(dump));
    }

    let freeze_seg = cfg.freeze_cams && !frozen_cams;
    let sgd = SgdConfig {
        lr: log.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    for id in model.backbone.cam_params() {
        model.store.set_frozen(id, frozen_cams);
    }
    for id in model.backbone.seg_head_params() {
        model.store.set_frozen(id, freeze_seg);
    }
    g.backward(total, &mut model.store)?;
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut model.store, cfg.grad_clip);
    }
    sgd_step(&mut model.store, sgd);
    Ok(StepOutput { log, mask, map_set })
}

/// Iteration state outside the weights: data order and hiding streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub iteration: usize,
    order_rng: ChaCha8Rng,
    hide_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    /// Fills the hide mean pixel from `data`'s training split when unset.
    pub fn new(mut config: TrainConfig, data: &Dataset) -> Result<Self> {
        if data.train().is_empty() {
            return Err(Error::Data("the training split is empty".into()));
        }
        config.backbone.input_size = data.size;
        config.backbone.num_classes = data.num_classes;
        let mean = match config.mean_pixel {
            Some(m) => m,
            None => dataset_mean_pixel(data.train())?,
        };
        config.mean_pixel = Some(mean);
        config.hide.mean_pixel = mean;
        let seed = config.seed;
        Ok(Self {
            model: Model::init(config)?,
            iteration: 0,
            order_rng: seeded_stream(seed, STREAM_ORDER),
            hide_rng: seeded_stream(seed, STREAM_HIDE),
            order: (0..data.train_len()).collect(),
            cursor: usize::MAX,
        })
    }

    /// Index of the next training sample; reshuffles at every epoch boundary.
    pub fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.order_rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn step(&mut self, data: &Dataset) -> Result<StepOutput> {
        let idx = self.next_index();
        let sample = TrainSample::from_sample(&data.samples[idx], data.num_classes);
        let out = train_step(&mut self.model, &sample, self.iteration, &mut self.hide_rng)?;
        self.iteration += 1;
        Ok(out)
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.model.config.iterations
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub snapshots: Vec<PathBuf>,
    pub intermediate_checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    pub artifacts: Option<RunArtifacts>,
}

fn mask_to_pgm(mask: &PseudoMask) -> Result<GrayImage> {
    GrayImage::new(mask.width(), mask.height(), mask.labels().to_vec())
}

/// Runs a full training schedule. With `out`, writes `loss.csv`,
/// `model.ckpt`, periodic `checkpoints/` and pseudo-mask `snapshots/`.
/// `progress` sees every step's log row.
pub fn train(data: &Dataset, config: TrainConfig, out: Option<&Path>, mut progress: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    let cfg = trainer.model.config.clone();
    let mut csv = String::from(LOG_HEADER);
    csv.push('\n');
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if cfg.snapshot_every > 0 {
            let d = dir.join("snapshots");
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        if cfg.checkpoint_every > 0 {
            let d = dir.join("checkpoints");
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    while !trainer.is_done() {
        let it = trainer.iteration;
        let step = match trainer.step(data) {
            Ok(s) => s,
            Err(Error::Numeric(dump)) => {
                if let Some(dir) = out {
                    let p = dir.join("numeric_failure.txt");
                    fs::write(&p, &dump).map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::Numeric(dump));
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", step.log.csv_row()).unwrap();
        progress(&step.log);
        if let Some(dir) = out {
            let done = it + 1;
            if cfg.snapshot_every > 0 && done % cfg.snapshot_every == 0 {
                let p = dir.join("snapshots").join(format!("iter_{done:06}_mask.pgm"));
                crate::synthdata::write_pgm(&p, &mask_to_pgm(&step.mask)?)?;
                step.map_set.dump_pgm(&dir.join("snapshots"), &format!("iter_{done:06}_map"))?;
                snapshots.push(p);
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let p = dir.join("checkpoints").join(format!("iter_{done:06}.ckpt"));
                trainer.model.save(&p)?;
                checkpoints.push(p);
            }
        }
        log.push(step.log);
    }
    let artifacts = match out {
        Some(dir) => {
            let loss_csv = dir.join("loss.csv");
            fs::write(&loss_csv, &csv).map_err(|e| Error::io(&loss_csv, e))?;
            let checkpoint = dir.join("model.ckpt");
            trainer.model.save(&checkpoint)?;
            Some(RunArtifacts {
                checkpoint,
                loss_csv,
                snapshots,
                intermediate_checkpoints: checkpoints,
            })
        }
        None => None,
    };
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        artifacts,
    })
}
