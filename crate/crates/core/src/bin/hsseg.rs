use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hsseg::densecrf::{map_labels, mean_field, parse_unary_text, CrfMethod, CrfModel, CrfParams};
use hsseg::error::{Error, Result, EXIT_USAGE};
use hsseg::pipeline::{
    audit_switching, background_baseline, evaluate, infer, parse_loss_log, parse_suite, run_suite, train, wsol,
    InferOptions, Model, TrainConfig,
};
use hsseg::synthdata::{generate, load_dataset, read_ppm, save_dataset, write_pgm, GrayImage, SceneSpec};
use hsseg::tensor::Tensor;

/// Weakly-supervised segmentation with hide-and-seek class activation maps.
///
/// Exit codes: 0 success, 1 usage, 2 data/config/file error, 3 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "hsseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train from image-level labels. Writes loss.csv, model.ckpt, checkpoints/ and snapshots/.
    ///
    /// Config keys (defaults): iterations (8000), lr (0.01), lr_drop_at (0.5),
    /// lr_drop_factor (0.1), momentum (0.9), weight_decay (0.0005), grad_clip (1),
    /// seed (0), crf_in_training (true), crf_every_k (1), num_cam_branches (2),
    /// freeze_cams (false), cam_pretrain_fraction (0.4), filter_threshold (0.5),
    /// checkpoint_every (0 = off), snapshot_every (0 = off);
    /// [backbone] gap_tap (last), widths (8,16,32,32,32), final_dilation (2);
    /// [hide] grid (4), hide_prob (0.5), patch_count (random), mean_pixel (training mean);
    /// [crf] w_appearance (5), w_smoothness (3), sigma_alpha (50), sigma_beta (10),
    /// sigma_gamma (3), iterations (10), method (auto);
    /// [switch] mode (adaptive), warmup (500), tau (0);
    /// [loss] seg (1), cls1 (1), cls2 (1);
    /// [wsol] threshold (0.6), nms_iou (0.3), tiou (0.5, 0.2).
    #[command(verbatim_doc_comment)]
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Config file; omit to train with every default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every N iterations (0 = silent).
        #[arg(long, default_value_t = 500)]
        log_every: usize,
    },
    /// Segment one PPM image into a PGM label mask.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        no_crf: bool,
    },
    /// Per-class IoU, PCA and mIoU on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        no_crf: bool,
    },
    /// Localization AP from class activation map boxes.
    Wsol {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 0.6)]
        threshold: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.2")]
        tiou: Vec<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate every `[variant.NAME]` of a suite file.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Training seed for every variant, overriding the suite.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a loss log against the switching rule of a config.
    Audit {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dense CRF on a unary text file (`L H W` then L*H*W values of -log P) and a PPM image.
    Crf {
        #[arg(long)]
        unary: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        w_appearance: f64,
        #[arg(long, default_value_t = 3.0)]
        w_smoothness: f64,
        #[arg(long, default_value_t = 50.0)]
        sigma_alpha: f64,
        #[arg(long, default_value_t = 10.0)]
        sigma_beta: f64,
        #[arg(long, default_value_t = 3.0)]
        sigma_gamma: f64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// naive, lattice or auto
        #[arg(long, default_value = "auto")]
        method: String,
    },
}

fn header(lines: &[(&str, String)]) {
    for (k, v) in lines {
        println!("# {k} = {v}");
    }
}

fn header_config(text: &str) {
    for line in text.lines().filter(|l| !l.is_empty()) {
        println!("#   {line}");
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn options(no_filter: bool, no_crf: bool) -> InferOptions {
    InferOptions {
        filter: !no_filter,
        crf: !no_crf,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            n,
            seed,
            classes,
            size,
        } => {
            let spec = SceneSpec {
                size,
                num_classes: classes,
                seed,
                ..Default::default()
            };
            header(&[
                ("command", "gen-data".into()),
                ("out", out.display().to_string()),
                ("n", n.to_string()),
                ("seed", seed.to_string()),
                ("classes", classes.to_string()),
                ("size", size.to_string()),
            ]);
            let data = generate(&spec, n)?;
            save_dataset(&out, &data)?;
            let mut counts = vec![0usize; classes];
            for s in &data.samples {
                for (c, &y) in s.labels(classes).iter().enumerate() {
                    counts[c] += y as usize;
                }
            }
            println!(
                "wrote {} images ({} train, {} val) of {size}x{size} to {}",
                n,
                data.train().len(),
                data.val().len(),
                out.display()
            );
            for (c, k) in counts.iter().enumerate() {
                println!("class {}: {k} images", c + 1);
            }
        }
        Command::Train {
            data,
            config,
            out,
            log_every,
        } => {
            let cfg = match &config {
                Some(p) => TrainConfig::parse(&read_text(p)?)?,
                None => TrainConfig::default(),
            };
            let dataset = load_dataset(&data)?;
            let mut effective = cfg.clone();
            effective.backbone.input_size = dataset.size;
            effective.backbone.num_classes = dataset.num_classes;
            if effective.mean_pixel.is_none() {
                effective.mean_pixel = Some(hsseg::synthdata::dataset_mean_pixel(dataset.train())?);
            }
            header(&[
                ("command", "train".into()),
                ("data", data.display().to_string()),
                ("out", out.display().to_string()),
                ("config", "".into()),
            ]);
            header_config(&effective.to_text());
            let run = train(&dataset, effective, Some(&out), |s| {
                if log_every > 0 && (s.iteration % log_every == 0 || s.iteration + 1 == cfg.iterations) {
                    println!(
                        "iter {:>6}  seg {:.4}  cls1 {:.4}  cls2 {:.4}  loss {}  fg {:>3}  lr {}",
                        s.iteration, s.seg_loss, s.cls1, s.cls2, s.chosen, s.foreground_count, s.lr
                    );
                }
            })?;
            let a = run.artifacts.expect("output directory given");
            println!("checkpoint: {}", a.checkpoint.display());
            println!("loss log: {}", a.loss_csv.display());
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            no_filter,
            no_crf,
        } => {
            let model = Model::load(&checkpoint)?;
            let opts = options(no_filter, no_crf);
            header(&[
                ("command", "infer".into()),
                ("checkpoint", checkpoint.display().to_string()),
                ("image", image.display().to_string()),
                ("out", out.display().to_string()),
                ("filter", opts.filter.to_string()),
                ("crf", opts.crf.to_string()),
                ("model_config", "".into()),
            ]);
            header_config(&model.config.to_text());
            let img = read_ppm(&image)?;
            let pred = infer(&model, &img.to_tensor(), opts)?;
            write_pgm(&out, &GrayImage::new(pred.width, pred.height, pred.labels)?)?;
            for (c, (g, k)) in pred.class_scores.iter().zip(&pred.kept).enumerate() {
                println!("class {}: score {g:.4}{}", c + 1, if *k { "" } else { " (filtered)" });
            }
            println!("mask: {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
            no_filter,
            no_crf,
        } => {
            let model = Model::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let samples = dataset.split(&split)?;
            let opts = options(no_filter, no_crf);
            header(&[
                ("command", "eval".into()),
                ("checkpoint", checkpoint.display().to_string()),
                ("data", data.display().to_string()),
                ("split", split.clone()),
                ("filter", opts.filter.to_string()),
                ("crf", opts.crf.to_string()),
                ("model_config", "".into()),
            ]);
            header_config(&model.config.to_text());
            let rep = evaluate(&model, samples, opts)?;
            let base = background_baseline(samples, dataset.num_classes)?;
            print!("{}", rep.to_csv());
            println!("background_baseline_miou,{:.17}", base.miou);
            if let Some(p) = report {
                write_text(&p, &rep.to_csv())?;
            }
        }
        Command::Wsol {
            checkpoint,
            data,
            split,
            threshold,
            tiou,
            report,
        } => {
            let model = Model::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let samples = dataset.split(&split)?;
            header(&[
                ("command", "wsol".into()),
                ("checkpoint", checkpoint.display().to_string()),
                ("data", data.display().to_string()),
                ("split", split.clone()),
                ("threshold", threshold.to_string()),
                (
                    "tiou",
                    tiou.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
                ),
                ("model_config", "".into()),
            ]);
            header_config(&model.config.to_text());
            let rep = wsol(&model, samples, threshold, &tiou)?;
            print!("{}", rep.to_csv());
            if let Some(p) = report {
                write_text(&p, &rep.to_csv())?;
            }
        }
        Command::Ablate { data, suite, out, seed } => {
            let text = read_text(&suite)?;
            let mut parsed = parse_suite(&text)?;
            if let Some(seed) = seed {
                for v in &mut parsed.variants {
                    v.config.seed = seed;
                }
            }
            let dataset = load_dataset(&data)?;
            header(&[
                ("command", "ablate".into()),
                ("data", data.display().to_string()),
                ("suite", suite.display().to_string()),
                ("out", out.display().to_string()),
            ]);
            for v in &parsed.variants {
                println!("# variant {}", v.name);
                header_config(&v.config.to_text());
            }
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            run_suite(&dataset, &parsed, Some(&out), |name, s| {
                if s.iteration % 1000 == 0 {
                    println!("{name}: iter {} seg {:.4} loss {}", s.iteration, s.seg_loss, s.chosen);
                }
            })?;
            print!("{}", read_text(&out.join("ablation.csv"))?);
        }
        Command::Audit { log, config } => {
            let cfg = match &config {
                Some(p) => TrainConfig::parse(&read_text(p)?)?,
                None => TrainConfig::default(),
            };
            header(&[
                ("command", "audit".into()),
                ("log", log.display().to_string()),
                ("switch.mode", cfg.switch.mode.as_str().into()),
                ("switch.warmup", cfg.switch.warmup.to_string()),
                ("switch.tau", cfg.switch.tau.to_string()),
            ]);
            let rows = parse_loss_log(&read_text(&log)?)?;
            let bad = audit_switching(&rows, &cfg.switch);
            println!("{} rows, {} violations", rows.len(), bad.len());
            if let Some(first) = bad.first() {
                return Err(Error::Data(format!("switching rule violated at iteration {first}")));
            }
        }
        Command::Crf {
            unary,
            image,
            out,
            w_appearance,
            w_smoothness,
            sigma_alpha,
            sigma_beta,
            sigma_gamma,
            iterations,
            method,
        } => {
            let params = CrfParams {
                w_appearance,
                w_smoothness,
                sigma_alpha,
                sigma_beta,
                sigma_gamma,
                iterations,
                method: method.parse::<CrfMethod>()?,
            };
            params.validate()?;
            header(&[
                ("command", "crf".into()),
                ("unary", unary.display().to_string()),
                ("image", image.display().to_string()),
                ("out", out.display().to_string()),
                ("w_appearance", w_appearance.to_string()),
                ("w_smoothness", w_smoothness.to_string()),
                ("sigma_alpha", sigma_alpha.to_string()),
                ("sigma_beta", sigma_beta.to_string()),
                ("sigma_gamma", sigma_gamma.to_string()),
                ("iterations", iterations.to_string()),
                ("method", params.method.as_str().into()),
            ]);
            let u = parse_unary_text(&read_text(&unary)?).map_err(|e| match e {
                Error::Format { offset, detail, .. } => {
                    Error::Data(format!("{}: byte {offset}: {detail}", unary.display()))
                }
                other => other,
            })?;
            let img = read_ppm(&image)?;
            let colors = Tensor::new(
                &[3, img.height(), img.width()],
                (0..3)
                    .flat_map(|c| img.data().iter().skip(c).step_by(3).map(|&v| v as f64))
                    .collect(),
            )?;
            let model = CrfModel::new(&u, &colors)?;
            let labels = map_labels(&mean_field(&model, &params)?);
            if labels.iter().any(|&l| l > u8::MAX as usize) {
                return Err(Error::InvalidArgument("more than 256 labels cannot be stored in a PGM".into()));
            }
            let mask = GrayImage::new(img.width(), img.height(), labels.into_iter().map(|l| l as u8).collect())?;
            write_pgm(&out, &mask)?;
            println!("labels: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
