//! Synthetic shapes dataset with pixel-level ground truth.

mod pnm;

pub use pnm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm, GrayImage,
    RgbImage,
};

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SHAPE_NAMES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub size: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Per-channel color jitter in 8-bit units.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            color_jitter: 20.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("image size {} is below 16", self.size)));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::InvalidArgument(format!("{} classes (need 1..=254)", self.num_classes)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::InvalidArgument(format!(
                "shape count range {}..={} is empty",
                self.min_shapes, self.max_shapes
            )));
        }
        Ok(())
    }
}

/// Tight box with exclusive `x1`/`y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtBox {
    /// 1-based class id, as stored in the masks.
    pub class: u8,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    /// Per-pixel class ids, 0 = background.
    pub mask: GrayImage,
    pub boxes: Vec<GtBox>,
}

impl Sample {
    /// Multi-hot labels over classes `1..=C`, index 0 meaning class 1.
    pub fn labels(&self, num_classes: usize) -> Vec<bool> {
        let mut out = vec![false; num_classes];
        for &v in self.mask.data() {
            if v > 0 && (v as usize) <= num_classes {
                out[v as usize - 1] = true;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub size: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Number of leading samples that form the training split.
    pub fn train_len(&self) -> usize {
        self.samples.len() * 4 / 5
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.train_len()]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.train_len()..]
    }

    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(self.train()),
            "val" => Ok(self.val()),
            "all" => Ok(&self.samples),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}` (train, val or all)"))),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Base color of class `c` (0-based): evenly spaced hues.
pub fn class_color(c: usize, num_classes: usize) -> [f64; 3] {
    hsv_to_rgb(360.0 * c as f64 / num_classes as f64, 0.75, 0.9)
}

/// Whether `(x, y)` lies inside the shape of kind `kind` centred at `(cx, cy)` with half-extent `r`.
fn inside(kind: usize, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match kind % 5 {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        2 => {
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= r * t
        }
        3 => {
            let arm = r * 0.35;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

fn background(rng: &mut impl Rng, size: usize) -> Vec<f64> {
    const G: usize = 5;
    let mut grid = vec![[0.0f64; 3]; G * G];
    let base: f64 = rng.random_range(100.0..140.0);
    for cell in grid.iter_mut() {
        let v = base + rng.random_range(-25.0..25.0);
        for ch in cell.iter_mut() {
            *ch = v + rng.random_range(-6.0..6.0);
        }
    }
    let mut out = vec![0.0; size * size * 3];
    let scale = (G - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        let gy = y as f64 * scale;
        let (y0, fy) = ((gy.floor() as usize).min(G - 2), gy - (gy.floor()).min((G - 2) as f64));
        for x in 0..size {
            let gx = x as f64 * scale;
            let (x0, fx) = ((gx.floor() as usize).min(G - 2), gx - (gx.floor()).min((G - 2) as f64));
            for ch in 0..3 {
                let a = grid[y0 * G + x0][ch] * (1.0 - fx) + grid[y0 * G + x0 + 1][ch] * fx;
                let b = grid[(y0 + 1) * G + x0][ch] * (1.0 - fx) + grid[(y0 + 1) * G + x0 + 1][ch] * fx;
                out[(y * size + x) * 3 + ch] = a * (1.0 - fy) + b * fy + rng.random_range(-4.0..4.0);
            }
        }
    }
    out
}

/// Renders sample `index`; each index has its own RNG stream.
pub fn generate_sample(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let size = spec.size;
    let mut pixels = background(&mut rng, size);
    let mut mask = vec![0u8; size * size];
    let mut boxes = Vec::new();
    let wanted = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let max_r = (size as f64 * 0.2).max(5.0);
    let min_r = (size as f64 * 0.11).max(4.0);
    let mut attempts = 0;
    while boxes.len() < wanted && attempts < 200 {
        attempts += 1;
        let class = rng.random_range(0..spec.num_classes);
        let r: f64 = rng.random_range(min_r..max_r);
        let cx: f64 = rng.random_range(r..size as f64 - 1.0 - r);
        let cy: f64 = rng.random_range(r..size as f64 - 1.0 - r);
        let base = class_color(class, spec.num_classes);
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-spec.color_jitter..=spec.color_jitter));
        let lo_x = (cx - r).floor().max(0.0) as usize;
        let hi_x = ((cx + r).ceil() as usize).min(size - 1);
        let lo_y = (cy - r).floor().max(0.0) as usize;
        let hi_y = ((cy + r).ceil() as usize).min(size - 1);
        let mut covered = Vec::new();
        let mut clash = false;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                if inside(class, x as f64, y as f64, cx, cy, r) {
                    // Keep a one-pixel gap to earlier shapes.
                    let near = (y.saturating_sub(1)..=(y + 1).min(size - 1))
                        .any(|yy| (x.saturating_sub(1)..=(x + 1).min(size - 1)).any(|xx| mask[yy * size + xx] != 0));
                    if near {
                        clash = true;
                    }
                    covered.push((x, y));
                }
            }
        }
        if clash || covered.len() < 16 {
            continue;
        }
        let label = (class + 1) as u8;
        let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0, 0);
        for &(x, y) in &covered {
            mask[y * size + x] = label;
            for ch in 0..3 {
                pixels[(y * size + x) * 3 + ch] = base[ch] + jitter[ch] + rng.random_range(-3.0..3.0);
            }
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        boxes.push(GtBox {
            class: label,
            x0,
            y0,
            x1,
            y1,
        });
    }
    let data = pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    Sample {
        image: RgbImage::new(size, size, data).expect("sized buffer"),
        mask: GrayImage::new(size, size, mask).expect("sized buffer"),
        boxes,
    }
}

pub fn generate(spec: &SceneSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        size: spec.size,
        samples: (0..n as u64).map(|i| generate_sample(spec, i)).collect(),
    })
}

/// Channel-wise mean over every pixel of `samples`, in `[0,1]`.
pub fn dataset_mean_pixel(samples: &[Sample]) -> Result<[f64; 3]> {
    let mut sums = [0u64; 3];
    let mut count = 0u64;
    for s in samples {
        for px in s.image.data().chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("mean pixel of an empty training split".into()));
    }
    Ok(sums.map(|s| s as f64 / count as f64 / 255.0))
}

const META_FILE: &str = "dataset.cfg";

fn image_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes `images/NNNN.ppm`, `masks/NNNN.pgm`, `labels.csv`, `boxes.csv` and `dataset.cfg`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut labels = String::from("index,class_ids\n");
    let mut boxes = String::from("index,class,x0,y0,x1,y1\n");
    for (i, s) in data.samples.iter().enumerate() {
        write_ppm(&dir.join("images").join(format!("{}.ppm", image_name(i))), &s.image)?;
        write_pgm(&dir.join("masks").join(format!("{}.pgm", image_name(i))), &s.mask)?;
        let ids: Vec<String> = s
            .labels(data.num_classes)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(c, _)| (c + 1).to_string())
            .collect();
        let _ = writeln!(labels, "{i},{}", ids.join(" "));
        for b in &s.boxes {
            let _ = writeln!(boxes, "{i},{},{},{},{},{}", b.class, b.x0, b.y0, b.x1, b.y1);
        }
    }
    let meta = format!(
        "classes = {}\nsize = {}\ncount = {}\n",
        data.num_classes,
        data.size,
        data.samples.len()
    );
    for (name, body) in [("labels.csv", labels), ("boxes.csv", boxes), (META_FILE, meta)] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

/// Loads a directory written by [`save_dataset`]; labels are checked against the masks.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let mut meta = std::collections::HashMap::new();
    for (n, line) in read_text(&meta_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| data_err(&meta_path, n + 1, "expected `key = value`"))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| data_err(&meta_path, n + 1, format!("`{}` is not an integer", v.trim())))?;
        meta.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| {
        meta.get(k)
            .copied()
            .ok_or_else(|| data_err(&meta_path, 0, format!("missing `{k}`")))
    };
    let (num_classes, size, count) = (get("classes")?, get("size")?, get("count")?);

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image = read_ppm(&dir.join("images").join(format!("{}.ppm", image_name(i))))?;
        let mask_path = dir.join("masks").join(format!("{}.pgm", image_name(i)));
        let mask = read_pgm(&mask_path)?;
        if (image.width(), image.height()) != (size, size) || (mask.width(), mask.height()) != (size, size) {
            return Err(Error::Data(format!("sample {i} is not {size}x{size}")));
        }
        if mask.data().iter().any(|&v| v as usize > num_classes) {
            return Err(Error::Data(format!("{}: class id above {num_classes}", mask_path.display())));
        }
        samples.push(Sample {
            image,
            mask,
            boxes: Vec::new(),
        });
    }

    let labels_path = dir.join("labels.csv");
    for (n, line) in read_text(&labels_path)?.lines().enumerate().skip(1) {
        let (idx, ids) = line
            .split_once(',')
            .ok_or_else(|| data_err(&labels_path, n + 1, "expected `index,class_ids`"))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| data_err(&labels_path, n + 1, "bad index"))?;
        let sample = samples
            .get(idx)
            .ok_or_else(|| data_err(&labels_path, n + 1, format!("index {idx} out of range")))?;
        let mut listed = vec![false; num_classes];
        for id in ids.split_whitespace() {
            let c: usize = id
                .parse()
                .ok()
                .filter(|c| (1..=num_classes).contains(c))
                .ok_or_else(|| data_err(&labels_path, n + 1, format!("bad class id `{id}`")))?;
            listed[c - 1] = true;
        }
        if listed != sample.labels(num_classes) {
            return Err(data_err(&labels_path, n + 1, "labels disagree with the mask"));
        }
    }

    let boxes_path = dir.join("boxes.csv");
    for (n, line) in read_text(&boxes_path)?.lines().enumerate().skip(1) {
        let f: Vec<usize> = line
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| data_err(&boxes_path, n + 1, "expected six integers"))?;
        let [idx, class, x0, y0, x1, y1] = f[..] else {
            return Err(data_err(&boxes_path, n + 1, "expected six fields"));
        };
        if class == 0 || class > num_classes || x0 >= x1 || y0 >= y1 || x1 > size || y1 > size {
            return Err(data_err(&boxes_path, n + 1, "invalid box"));
        }
        let sample = samples
            .get_mut(idx)
            .ok_or_else(|| data_err(&boxes_path, n + 1, format!("index {idx} out of range")))?;
        sample.boxes.push(GtBox {
            class: class as u8,
            x0,
            y0,
            x1,
            y1,
        });
    }
    Ok(Dataset {
        num_classes,
        size,
        samples,
    })
}
