//! Fully-connected CRF with contrast-sensitive Potts potentials.
//!
//! The pairwise kernel between pixels `i` and `j` is
//!
//! ```text
//! k(i,j) = w1 * exp(-|p_i-p_j|^2 / 2 sa^2 - |I_i-I_j|^2 / 2 sb^2)
//!        + w2 * exp(-|p_i-p_j|^2 / 2 sg^2)
//! ```
//!
//! with integer pixel positions and RGB colors in `[0, 255]`. The energy
//! counts each unordered pair once; mean-field messages sum over all `j != i`.

mod exact;
mod lattice;

pub use exact::{exact_map, exact_marginals, MAX_EXACT_STATES};
pub use lattice::Permutohedral;

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrfMethod {
    /// Direct O(N^2) message passing.
    Naive,
    /// Exact separable smoothness kernel plus a permutohedral appearance kernel.
    Lattice,
    /// Naive up to [`AUTO_NAIVE_PIXELS`] pixels, lattice above.
    #[default]
    Auto,
}

pub const AUTO_NAIVE_PIXELS: usize = 1024;

impl FromStr for CrfMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "lattice" => Ok(Self::Lattice),
            "auto" => Ok(Self::Auto),
            other => Err(Error::InvalidArgument(format!(
                "unknown CRF method `{other}` (expected naive, lattice or auto)"
            ))),
        }
    }
}

impl CrfMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Naive => "naive",
            Self::Lattice => "lattice",
            Self::Auto => "auto",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    /// Appearance kernel weight `w1`.
    pub w_appearance: f64,
    /// Smoothness kernel weight `w2`.
    pub w_smoothness: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub iterations: usize,
    pub method: CrfMethod,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_appearance: 5.0,
            w_smoothness: 3.0,
            sigma_alpha: 50.0,
            sigma_beta: 10.0,
            sigma_gamma: 3.0,
            iterations: 10,
            method: CrfMethod::Auto,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.sigma_alpha, self.sigma_beta, self.sigma_gamma];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("CRF kernel widths must be positive, got {sigmas:?}")));
        }
        if !(self.w_appearance >= 0.0 && self.w_smoothness >= 0.0)
            || !self.w_appearance.is_finite()
            || !self.w_smoothness.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "CRF weights must be finite and non-negative, got ({}, {})",
                self.w_appearance, self.w_smoothness
            )));
        }
        Ok(())
    }
}

/// Reads a whitespace-separated unary file: `L H W` followed by `L*H*W`
/// values in label-major, row-major order. `#` starts a comment line.
pub fn parse_unary_text(text: &str) -> Result<Tensor> {
    let mut tokens = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim_start().starts_with('#') {
            let mut pos = 0;
            for tok in line.split_whitespace() {
                let at = pos + line[pos..].find(tok).expect("token is in its line");
                tokens.push((offset + at, tok));
                pos = at + tok.len();
            }
        }
        offset += line.len();
    }
    let bad = |at: usize, detail: String| Error::Format {
        format: "unary",
        offset: at,
        detail,
    };
    if tokens.len() < 3 {
        return Err(bad(text.len(), "expected a `L H W` header".into()));
    }
    let mut dims = [0usize; 3];
    for (d, &(at, tok)) in dims.iter_mut().zip(&tokens[..3]) {
        *d = tok
            .parse()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(at, format!("bad dimension `{tok}`")))?;
    }
    let expected = dims.iter().product::<usize>();
    let values = &tokens[3..];
    if values.len() != expected {
        return Err(bad(text.len(), format!("expected {expected} values, found {}", values.len())));
    }
    let data = values
        .iter()
        .map(|&(at, tok)| tok.parse::<f64>().map_err(|_| bad(at, format!("bad number `{tok}`"))))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&dims, data)
}

/// Unary potentials `-log P` over a pixel grid plus the pixel colors.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    labels: usize,
    height: usize,
    width: usize,
    unary: Vec<f64>,
    colors: Vec<f64>,
}

impl CrfModel {
    /// `unary` is `[L,H,W]`; `colors` is `[3,H,W]` in `[0,255]`.
    pub fn new(unary: &Tensor, colors: &Tensor) -> Result<Self> {
        let [labels, height, width] = *unary.shape() else {
            return Err(Error::shape("crf_model", format!("unary must be [L,H,W], got {:?}", unary.shape())));
        };
        if colors.shape() != [3, height, width] {
            return Err(Error::shape(
                "crf_model",
                format!("colors {:?} do not match unary {:?}", colors.shape(), unary.shape()),
            ));
        }
        if labels == 0 || height * width == 0 {
            return Err(Error::shape("crf_model", "empty label set or grid".to_string()));
        }
        if !unary.all_finite() || !colors.all_finite() {
            return Err(Error::Numeric("CRF unary or colors contain non-finite values".into()));
        }
        let plane = height * width;
        for i in 0..plane {
            let mass: f64 = (0..labels).map(|l| (-unary.data()[l * plane + i]).exp()).sum();
            if (mass - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "unary at pixel {i} is not a distribution (exp(-unary) sums to {mass})"
                )));
            }
        }
        Ok(Self {
            labels,
            height,
            width,
            unary: unary.data().to_vec(),
            colors: colors.data().to_vec(),
        })
    }

    /// From a per-pixel distribution `[L,H,W]` and an image in `[0,1]`
    /// (`[3,H,W]` or `[1,3,H,W]`).
    pub fn from_probabilities(probs: &Tensor, image: &Tensor) -> Result<Self> {
        let unary = Tensor::new(probs.shape(), probs.data().iter().map(|&p| -p.ln()).collect())?;
        let [c, h, w] = image.shape()[image.rank().saturating_sub(3)..] else {
            return Err(Error::shape("crf_model", format!("image {:?}", image.shape())));
        };
        let colors = Tensor::new(&[c, h, w], image.data().iter().map(|&v| v * 255.0).collect())?;
        Self::new(&unary, &colors)
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn unary(&self, pixel: usize, label: usize) -> f64 {
        self.unary[label * self.pixels() + pixel]
    }

    fn position(&self, i: usize) -> (f64, f64) {
        ((i % self.width) as f64, (i / self.width) as f64)
    }

    fn color(&self, i: usize) -> [f64; 3] {
        let n = self.pixels();
        [self.colors[i], self.colors[n + i], self.colors[2 * n + i]]
    }

    fn kernel(&self, params: &CrfParams, i: usize, j: usize) -> f64 {
        let (xi, yi) = self.position(i);
        let (xj, yj) = self.position(j);
        let dp = (xi - xj).powi(2) + (yi - yj).powi(2);
        let (ci, cj) = (self.color(i), self.color(j));
        let dc: f64 = (0..3).map(|k| (ci[k] - cj[k]).powi(2)).sum();
        let appearance = (-dp / (2.0 * params.sigma_alpha.powi(2)) - dc / (2.0 * params.sigma_beta.powi(2))).exp();
        let smoothness = (-dp / (2.0 * params.sigma_gamma.powi(2))).exp();
        params.w_appearance * appearance + params.w_smoothness * smoothness
    }
}

/// `k(i,j)` before the Potts factor.
pub fn pairwise_weight(model: &CrfModel, params: &CrfParams, i: usize, j: usize) -> Result<f64> {
    let n = model.pixels();
    if i == j {
        return Err(Error::InvalidArgument(format!("pairwise weight needs distinct pixels, got {i} twice")));
    }
    if i >= n || j >= n {
        return Err(Error::InvalidArgument(format!("pixel index out of range for {n} pixels")));
    }
    Ok(model.kernel(params, i, j))
}

pub fn energy(model: &CrfModel, params: &CrfParams, labels: &[usize]) -> Result<f64> {
    let n = model.pixels();
    if labels.len() != n || labels.iter().any(|&l| l >= model.labels) {
        return Err(Error::InvalidArgument(format!(
            "labeling must have {n} entries below {}",
            model.labels
        )));
    }
    let mut e: f64 = labels.iter().enumerate().map(|(i, &l)| model.unary(i, l)).sum();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                e += model.kernel(params, i, j);
            }
        }
    }
    Ok(e)
}

/// Per-pixel softmax of `-unary` (and of `-unary + message` during updates).
fn normalize_into(q: &mut [f64], logits: &[f64], labels: usize, plane: usize) {
    for i in 0..plane {
        let max = (0..labels).map(|l| logits[l * plane + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for l in 0..labels {
            let e = (logits[l * plane + i] - max).exp();
            q[l * plane + i] = e;
            s += e;
        }
        for l in 0..labels {
            q[l * plane + i] /= s;
        }
    }
}

/// Mean-field marginals `[L,H,W]` after `params.iterations` synchronous sweeps.
pub fn mean_field(model: &CrfModel, params: &CrfParams) -> Result<Tensor> {
    params.validate()?;
    let (labels, plane) = (model.labels, model.pixels());
    let neg_unary: Vec<f64> = model.unary.iter().map(|u| -u).collect();
    let mut q = vec![0.0; labels * plane];
    normalize_into(&mut q, &neg_unary, labels, plane);

    let method = match params.method {
        CrfMethod::Auto if plane <= AUTO_NAIVE_PIXELS => CrfMethod::Naive,
        CrfMethod::Auto => CrfMethod::Lattice,
        m => m,
    };
    let mut messenger: Box<dyn FnMut(&[f64]) -> Vec<f64>> = match method {
        CrfMethod::Naive => Box::new(|q: &[f64]| naive_messages(model, params, q)),
        _ => {
            let fast = FastMessages::new(model, params);
            Box::new(move |q: &[f64]| fast.messages(q))
        }
    };
    let mut logits = vec![0.0; labels * plane];
    for _ in 0..params.iterations {
        let m = messenger(&q);
        for ((lg, &nu), &mi) in logits.iter_mut().zip(&neg_unary).zip(&m) {
            *lg = nu + mi;
        }
        normalize_into(&mut q, &logits, labels, plane);
    }
    Tensor::new(&[labels, model.height, model.width], q)
}

/// `m_i(l) = Σ_{j≠i} k(i,j) Q_j(l)`, label-major.
fn naive_messages(model: &CrfModel, params: &CrfParams, q: &[f64]) -> Vec<f64> {
    let (labels, n) = (model.labels, model.pixels());
    let mut m = vec![0.0; labels * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = if i == j { 0.0 } else { model.kernel(params, i, j) };
        }
        for l in 0..labels {
            let ql = &q[l * n..(l + 1) * n];
            m[l * n + i] = row.iter().zip(ql).map(|(k, v)| k * v).sum();
        }
    }
    m
}

/// Truncation radius of the separable smoothness kernel, in units of `sigma_gamma`.
pub const SMOOTHNESS_RADIUS_SIGMAS: f64 = 6.0;

/// Scale that maps the lattice filter response onto the unnormalized
/// Gaussian sum `Σ_j exp(-|f_i - f_j|^2 / 2)` for 5-D features.
pub const LATTICE_GAIN_5D: f64 = 1.77;

struct FastMessages<'a> {
    model: &'a CrfModel,
    params: &'a CrfParams,
    lattice: Option<Permutohedral>,
    gauss_x: Vec<f64>,
    gauss_y: Vec<f64>,
}

impl<'a> FastMessages<'a> {
    fn new(model: &'a CrfModel, params: &'a CrfParams) -> Self {
        let n = model.pixels();
        let lattice = (params.w_appearance > 0.0).then(|| {
            let mut f = Vec::with_capacity(n * 5);
            for i in 0..n {
                let (x, y) = model.position(i);
                let c = model.color(i);
                f.extend_from_slice(&[
                    x / params.sigma_alpha,
                    y / params.sigma_alpha,
                    c[0] / params.sigma_beta,
                    c[1] / params.sigma_beta,
                    c[2] / params.sigma_beta,
                ]);
            }
            Permutohedral::new(&f, 5)
        });
        // Taps beyond SMOOTHNESS_RADIUS_SIGMAS standard deviations are dropped.
        let radius = (SMOOTHNESS_RADIUS_SIGMAS * params.sigma_gamma).ceil() as usize;
        let g = |extent: usize| -> Vec<f64> {
            (0..extent.min(radius + 1))
                .map(|d| (-((d * d) as f64) / (2.0 * params.sigma_gamma.powi(2))).exp())
                .collect()
        };
        Self {
            model,
            params,
            lattice,
            gauss_x: g(model.width),
            gauss_y: g(model.height),
        }
    }

    fn messages(&self, q: &[f64]) -> Vec<f64> {
        let (labels, n) = (self.model.labels, self.model.pixels());
        let (h, w) = (self.model.height, self.model.width);
        let mut m = vec![0.0; labels * n];
        if self.params.w_smoothness > 0.0 {
            let w2 = self.params.w_smoothness;
            let mut tmp = vec![0.0; n];
            let mut acc = vec![0.0; n];
            for l in 0..labels {
                let ql = &q[l * n..(l + 1) * n];
                tmp.fill(0.0);
                for (d, &g) in self.gauss_x.iter().enumerate() {
                    for y in 0..h {
                        let (src, dst) = (&ql[y * w..(y + 1) * w], &mut tmp[y * w..(y + 1) * w]);
                        for (o, &v) in dst[..w - d].iter_mut().zip(&src[d..]) {
                            *o += g * v;
                        }
                        if d > 0 {
                            for (o, &v) in dst[d..].iter_mut().zip(&src[..w - d]) {
                                *o += g * v;
                            }
                        }
                    }
                }
                acc.fill(0.0);
                for (d, &g) in self.gauss_y.iter().enumerate() {
                    for y in 0..h - d {
                        let (src, dst) = (&tmp[(y + d) * w..(y + d + 1) * w], &mut acc[y * w..(y + 1) * w]);
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += g * v;
                        }
                        if d > 0 {
                            let (src, dst) = (&tmp[y * w..(y + 1) * w], &mut acc[(y + d) * w..(y + d + 1) * w]);
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += g * v;
                            }
                        }
                    }
                }
                let ml = &mut m[l * n..(l + 1) * n];
                for ((o, &a), &v) in ml.iter_mut().zip(&acc).zip(ql) {
                    *o = w2 * (a - v);
                }
            }
        }
        if let Some(lat) = &self.lattice {
            let w1 = self.params.w_appearance;
            let mut interleaved = vec![0.0; n * labels];
            for l in 0..labels {
                for i in 0..n {
                    interleaved[i * labels + l] = q[l * n + i];
                }
            }
            let out = lat.filter(&interleaved, labels);
            for l in 0..labels {
                for i in 0..n {
                    let approx = LATTICE_GAIN_5D * out[i * labels + l] - q[l * n + i];
                    m[l * n + i] += w1 * approx;
                }
            }
        }
        m
    }
}

/// Per-pixel argmax of marginals `[L,H,W]`; ties go to the lowest label.
pub fn map_labels(q: &Tensor) -> Vec<usize> {
    crate::hideseek::argmax_channels(q).into_iter().map(usize::from).collect()
}
