//! C ABI over the dropclass library.
//!
//! Models and datasets cross the boundary as opaque handles that the caller
//! frees with the matching `*_free`. Every fallible call returns a
//! [`DcStatus`]; on failure [`dc_last_error`] describes what went wrong on
//! the calling thread. Panics are caught and reported as
//! [`DcStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dropclass::config::{split_base_seed, Config};
use dropclass::datagen::{generate_dataset, Dataset, Split};
use dropclass::error::Error;
use dropclass::eval::{evaluate, weight_correlation};
use dropclass::model::{init_model, load_checkpoint, save_checkpoint, ModelConfig};
use dropclass::tensor::Tensor;
use dropclass::trainer::{train_from, Mode, TrainConfig};
use dropclass::Model;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Generation = 7,
    NonFinite = 8,
    Domain = 9,
    Panic = 10,
}

/// Opaque trained or freshly initialized model.
pub struct DcModel(Model);

/// Opaque in-memory dataset split.
pub struct DcDataset(Dataset);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcMode {
    Baseline = 0,
    Dropclass = 1,
    AblationNoSup = 2,
    AblationLabelDrop = 3,
}

impl From<DcMode> for Mode {
    fn from(m: DcMode) -> Mode {
        match m {
            DcMode::Baseline => Mode::Baseline,
            DcMode::Dropclass => Mode::Dropclass,
            DcMode::AblationNoSup => Mode::AblationNoSup,
            DcMode::AblationLabelDrop => Mode::AblationLabelDrop,
        }
    }
}

/// Training options; start from [`dc_train_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DcTrainOptions {
    pub mode: DcMode,
    /// 0 uses the mode's default step count.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub alpha: f32,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Io { .. } | Error::HashMismatch { .. } => DcStatus::Io,
        Error::Format { .. } | Error::CheckpointMismatch(_) => DcStatus::Format,
        Error::Shape { .. } => DcStatus::Shape,
        Error::Config(_) | Error::SceneSpec(_) => DcStatus::Config,
        Error::Generation { .. } => DcStatus::Generation,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => DcStatus::NonFinite,
        _ => DcStatus::Domain,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, recording any failure as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DcStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed as {what}"));
            DcStatus::NullPointer
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            DcStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(format!("[{}] {e}", e.module()));
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DcStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates `count` samples of the default benchmark at `image_size`
/// pixels. `split` is 0 (train), 1 (val) or 2 (test); splits of one seed
/// never share samples.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_generate(
    image_size: usize,
    count: usize,
    seed: u64,
    split: u32,
    out: *mut *mut DcDataset,
) -> DcStatus {
    guard(|| {
        let split = split_from(split)?;
        let config = Config {
            image_size,
            ..Config::default()
        };
        let spec = config.scene()?;
        let ds = generate_dataset(&spec, count, split_base_seed(seed, split), split)?;
        write_out(out, DcDataset(ds), "out")
    })
}

/// Loads one split of a dataset directory written by `dropclass gen-data`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_load(
    dir: *const c_char,
    split: u32,
    out: *mut *mut DcDataset,
) -> DcStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let ds = Dataset::load(&dir, split_from(split)?)?;
        write_out(out, DcDataset(ds), "out")
    })
}

fn split_from(split: u32) -> Result<Split, Fail> {
    match split {
        0 => Ok(Split::Train),
        1 => Ok(Split::Val),
        2 => Ok(Split::Test),
        s => Err(Fail::Arg(format!("split must be 0, 1 or 2, got {s}"))),
    }
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_len(ds: *const DcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_num_classes(ds: *const DcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.num_classes())
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_dataset_free(ds: *mut DcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fresh model with `n_widths` extractor convs of the given widths.
///
/// # Safety
/// `widths` must point to `n_widths` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_new(
    num_classes: usize,
    widths: *const usize,
    n_widths: usize,
    seed: u64,
    out: *mut *mut DcModel,
) -> DcStatus {
    guard(|| {
        if widths.is_null() {
            return Err(Fail::Null("widths"));
        }
        let mut cfg = ModelConfig::new(num_classes);
        cfg.widths = std::slice::from_raw_parts(widths, n_widths).to_vec();
        cfg.seed = seed;
        cfg.validate()?;
        write_out(out, DcModel(init_model(&cfg, seed)?), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        write_out(out, DcModel(load_checkpoint(&path)?), "out")
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dc_model_save(model: *const DcModel, path: *const c_char) -> DcStatus {
    guard(|| {
        let model = deref(model, "model")?;
        save_checkpoint(&model.0, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn dc_model_num_classes(model: *const DcModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_classes())
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Per-pixel class of an `height x width` RGB image given row-major as
/// `height * width * 3` floats; writes `height * width` labels.
///
/// # Safety
/// `image` must hold `height*width*3` floats and `labels` room for
/// `height*width` bytes.
#[no_mangle]
pub unsafe extern "C" fn dc_model_predict(
    model: *const DcModel,
    image: *const f32,
    height: usize,
    width: usize,
    labels: *mut u8,
) -> DcStatus {
    guard(|| {
        let model = deref(model, "model")?;
        if image.is_null() {
            return Err(Fail::Null("image"));
        }
        if labels.is_null() {
            return Err(Fail::Null("labels"));
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| Fail::Arg(format!("invalid image size {height}x{width}")))?;
        let data = std::slice::from_raw_parts(image, n * 3).to_vec();
        let pred = model
            .0
            .predict(&Tensor::new(vec![height, width, 3], data)?)?;
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(pred.data());
        Ok(())
    })
}

/// Defaults for `mode`; the library's own defaults.
#[no_mangle]
pub extern "C" fn dc_train_options_default(mode: DcMode) -> DcTrainOptions {
    let c = TrainConfig::new(mode.into(), 1);
    DcTrainOptions {
        mode,
        iterations: 0,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        momentum: c.momentum,
        alpha: c.alpha,
        seed: c.seed,
    }
}

/// Trains `model` in place on `train`.
///
/// # Safety
/// `model` and `train` must be live handles; `options` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dc_train(
    model: *mut DcModel,
    train: *const DcDataset,
    options: *const DcTrainOptions,
) -> DcStatus {
    guard(|| {
        let model = model.as_mut().ok_or(Fail::Null("model"))?;
        let train = deref(train, "train")?;
        let o = deref(options, "options")?;
        let mode: Mode = o.mode.into();
        let mut cfg = TrainConfig::new(mode, model.0.num_classes());
        cfg.model = model.0.config.clone();
        if o.iterations > 0 {
            cfg.iterations = o.iterations;
        }
        cfg.batch_size = o.batch_size;
        cfg.learning_rate = o.learning_rate;
        cfg.momentum = o.momentum;
        cfg.alpha = o.alpha;
        cfg.seed = o.seed;
        let report = train_from(&train.0, &cfg, model.0.clone(), |_| {})?;
        model.0 = report.model;
        Ok(())
    })
}

/// Mean IoU of `model` on `ds`.
///
/// # Safety
/// Handles must be live; `miou` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_evaluate_miou(
    model: *const DcModel,
    ds: *const DcDataset,
    miou: *mut f64,
) -> DcStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let ds = deref(ds, "dataset")?;
        if miou.is_null() {
            return Err(Fail::Null("miou"));
        }
        *miou = evaluate(&model.0, &ds.0)?.miou;
        Ok(())
    })
}

/// Mean over classes of the summed cosine similarity between a class's
/// classifier weights and every other class's.
///
/// # Safety
/// `model` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dc_weight_correlation(model: *const DcModel, out: *mut f64) -> DcStatus {
    guard(|| {
        let model = deref(model, "model")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = weight_correlation(&model.0)?.mean_row_sum();
        Ok(())
    })
}
