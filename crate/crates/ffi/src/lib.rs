//! C ABI over the `hsseg` toolkit.
//!
//! Every fallible function returns an [`HssegStatus`] code; on failure the
//! message is available from [`hsseg_last_error_message`] on the same thread.
//! Objects are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hsseg::densecrf::{mean_field, CrfMethod, CrfModel, CrfParams};
use hsseg::pipeline::{evaluate, infer, train, InferOptions, Model, TrainConfig};
use hsseg::synthdata::{generate, load_dataset, save_dataset, RgbImage, SceneSpec};
use hsseg::tensor::Tensor;
use hsseg::Error;

/// Result codes. Values 1-3 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HssegStatus {
    Ok = 0,
    InvalidArgument = 1,
    DataError = 2,
    NumericError = 3,
    NullPointer = 4,
    Panic = 5,
}

/// Trained network plus its configuration.
pub struct HssegModel {
    inner: Model,
}

/// Dense CRF settings; `method` is 0 = auto, 1 = naive, 2 = lattice.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HssegCrfParams {
    pub w_appearance: f64,
    pub w_smoothness: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub iterations: usize,
    pub method: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: HssegStatus, msg: impl Into<String>) -> HssegStatus {
    set_last_error(msg.into());
    status
}

fn status_of(err: &Error) -> HssegStatus {
    match err.exit_code() {
        1 => HssegStatus::InvalidArgument,
        3 => HssegStatus::NumericError,
        _ => HssegStatus::DataError,
    }
}

fn guard(f: impl FnOnce() -> Result<(), HssegStatus>) -> HssegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HssegStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(HssegStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn lift<T>(r: hsseg::Result<T>) -> Result<T, HssegStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, HssegStatus> {
    if p.is_null() {
        return Err(fail(HssegStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HssegStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), HssegStatus> {
    if p.is_null() {
        Err(fail(HssegStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hsseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hsseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Writes a synthetic dataset of `n` images to `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hsseg_generate_dataset(
    out_dir: *const c_char,
    n: usize,
    seed: u64,
    num_classes: usize,
    size: usize,
) -> HssegStatus {
    guard(|| {
        let dir = PathBuf::from(c_str(out_dir, "out_dir")?);
        let spec = SceneSpec {
            size,
            num_classes,
            seed,
            ..Default::default()
        };
        let data = lift(generate(&spec, n))?;
        lift(save_dataset(&dir, &data))
    })
}

/// Trains on the dataset in `data_dir` with the config text `config`
/// (may be NULL for defaults). Artifacts go to `out_dir` when it is not NULL.
///
/// # Safety
/// String arguments must be NULL or valid NUL-terminated strings; `out_model`
/// must be a valid pointer. The returned model is released with [`hsseg_model_free`].
#[no_mangle]
pub unsafe extern "C" fn hsseg_train(
    data_dir: *const c_char,
    config: *const c_char,
    out_dir: *const c_char,
    out_model: *mut *mut HssegModel,
) -> HssegStatus {
    guard(|| {
        non_null(out_model, "out_model")?;
        let data = lift(load_dataset(&PathBuf::from(c_str(data_dir, "data_dir")?)))?;
        let cfg = if config.is_null() {
            TrainConfig::default()
        } else {
            lift(TrainConfig::parse(c_str(config, "config")?))?
        };
        let out = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(c_str(out_dir, "out_dir")?))
        };
        let run = lift(train(&data, cfg, out.as_deref(), |_| {}))?;
        *out_model = Box::into_raw(Box::new(HssegModel { inner: run.model }));
        Ok(())
    })
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsseg_model_load(path: *const c_char, out_model: *mut *mut HssegModel) -> HssegStatus {
    guard(|| {
        non_null(out_model, "out_model")?;
        let model = lift(Model::load(&PathBuf::from(c_str(path, "path")?)))?;
        *out_model = Box::into_raw(Box::new(HssegModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hsseg_model_save(model: *const HssegModel, path: *const c_char) -> HssegStatus {
    guard(|| {
        non_null(model, "model")?;
        lift((*model).inner.save(&PathBuf::from(c_str(path, "path")?)))
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hsseg_model_free(model: *mut HssegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the model accepts, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn hsseg_model_input_size(model: *const HssegModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.backbone.input_size)
}

/// Number of foreground classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn hsseg_model_num_classes(model: *const HssegModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.backbone.num_classes)
}

/// Segments an interleaved 8-bit RGB image of `width * height` pixels into
/// `labels` (`width * height` bytes, 0 = background). `class_scores`, when
/// not NULL, receives one sigmoid score per foreground class.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn hsseg_infer(
    model: *const HssegModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    apply_filter: bool,
    apply_crf: bool,
    labels: *mut u8,
    labels_len: usize,
    class_scores: *mut f64,
    class_scores_len: usize,
) -> HssegStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(rgb, "rgb")?;
        non_null(labels, "labels")?;
        let m = &(*model).inner;
        let n = width.checked_mul(height).ok_or_else(|| fail(HssegStatus::InvalidArgument, "image too large"))?;
        if labels_len < n {
            return Err(fail(
                HssegStatus::InvalidArgument,
                format!("labels buffer holds {labels_len} bytes, {n} needed"),
            ));
        }
        let pixels = std::slice::from_raw_parts(rgb, n * 3).to_vec();
        let img = lift(RgbImage::new(width, height, pixels))?;
        let opts = InferOptions {
            filter: apply_filter,
            crf: apply_crf,
        };
        let pred = lift(infer(m, &img.to_tensor(), opts))?;
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&pred.labels);
        if !class_scores.is_null() {
            let k = class_scores_len.min(pred.class_scores.len());
            std::slice::from_raw_parts_mut(class_scores, k).copy_from_slice(&pred.class_scores[..k]);
        }
        Ok(())
    })
}

/// Evaluates on a split (`"train"`, `"val"` or `"all"`) of the dataset in `data_dir`.
///
/// # Safety
/// Strings must be valid; `miou` and `pca` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn hsseg_evaluate(
    model: *const HssegModel,
    data_dir: *const c_char,
    split: *const c_char,
    apply_filter: bool,
    apply_crf: bool,
    miou: *mut f64,
    pca: *mut f64,
) -> HssegStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(miou, "miou")?;
        non_null(pca, "pca")?;
        let data = lift(load_dataset(&PathBuf::from(c_str(data_dir, "data_dir")?)))?;
        let samples = lift(data.split(c_str(split, "split")?))?;
        let opts = InferOptions {
            filter: apply_filter,
            crf: apply_crf,
        };
        let rep = lift(evaluate(&(*model).inner, samples, opts))?;
        *miou = rep.miou;
        *pca = rep.pca;
        Ok(())
    })
}

/// Default CRF settings.
#[no_mangle]
pub extern "C" fn hsseg_crf_default_params() -> HssegCrfParams {
    let p = CrfParams::default();
    HssegCrfParams {
        w_appearance: p.w_appearance,
        w_smoothness: p.w_smoothness,
        sigma_alpha: p.sigma_alpha,
        sigma_beta: p.sigma_beta,
        sigma_gamma: p.sigma_gamma,
        iterations: p.iterations,
        method: 0,
    }
}

/// Mean-field inference. `probs` is `labels * height * width` values
/// (label-major) forming a distribution per pixel; `rgb` is interleaved 8-bit
/// color. The marginals are written to `q_out` in the same layout.
///
/// # Safety
/// Buffers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn hsseg_crf_mean_field(
    probs: *const f64,
    labels: usize,
    height: usize,
    width: usize,
    rgb: *const u8,
    params: *const HssegCrfParams,
    q_out: *mut f64,
) -> HssegStatus {
    guard(|| {
        non_null(probs, "probs")?;
        non_null(rgb, "rgb")?;
        non_null(params, "params")?;
        non_null(q_out, "q_out")?;
        let p = *params;
        let method = match p.method {
            0 => CrfMethod::Auto,
            1 => CrfMethod::Naive,
            2 => CrfMethod::Lattice,
            other => return Err(fail(HssegStatus::InvalidArgument, format!("unknown CRF method {other}"))),
        };
        let crf = CrfParams {
            w_appearance: p.w_appearance,
            w_smoothness: p.w_smoothness,
            sigma_alpha: p.sigma_alpha,
            sigma_beta: p.sigma_beta,
            sigma_gamma: p.sigma_gamma,
            iterations: p.iterations,
            method,
        };
        lift(crf.validate())?;
        let plane = height * width;
        let pr = lift(Tensor::new(
            &[labels, height, width],
            std::slice::from_raw_parts(probs, labels * plane).to_vec(),
        ))?;
        let rgb = std::slice::from_raw_parts(rgb, plane * 3);
        let image = lift(Tensor::new(
            &[3, height, width],
            (0..3)
                .flat_map(|c| rgb.iter().skip(c).step_by(3).map(|&v| v as f64 / 255.0))
                .collect(),
        ))?;
        let model = lift(CrfModel::from_probabilities(&pr, &image))?;
        let q = lift(mean_field(&model, &crf))?;
        std::slice::from_raw_parts_mut(q_out, labels * plane).copy_from_slice(q.data());
        Ok(())
    })
}
