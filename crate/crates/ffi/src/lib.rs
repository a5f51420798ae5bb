//! C ABI over `adapterseg`.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free` function. Every fallible call returns an [`AsegStatus`];
//! on failure the message is available from [`aseg_last_error`] until the
//! next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use adapterseg::adapters::{count_trainable, AdaptedModel, AdapterKind, AdapterPlan, SiteDims, Variant};
use adapterseg::autodiff::{no_grad, Tensor};
use adapterseg::data::{self, DatasetSplits, GeneratorSpec, Split};
use adapterseg::metrics::{self, Mask};
use adapterseg::model::ModelConfig;
use adapterseg::{checkpoint, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsegVariant {
    V = 0,
    Vl = 1,
    Vlc = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsegKind {
    Shallow = 0,
    Dense = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsegPreset {
    ClipB = 0,
    Toy = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsegSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// A trained or freshly loaded adapted model.
pub struct AsegModel(AdaptedModel);

/// A dataset split into train, val and test.
pub struct AsegDataset(DatasetSplits);

/// Per-sample segmentation scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AsegScores {
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AsegStatus {
    match e {
        Error::Config { .. } | Error::Manifest { .. } | Error::Json(_) => AsegStatus::Config,
        Error::Io { .. } => AsegStatus::Io,
        Error::Checkpoint(_) => AsegStatus::Checkpoint,
        Error::Numerical(_) => AsegStatus::Numerical,
        Error::Tensor(_) => AsegStatus::InvalidArgument,
    }
}

struct Fail(AsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(AsegStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AsegStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AsegStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(AsegStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(AsegStatus::NullPointer, format!("{name} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(AsegStatus::NullPointer, format!("{name} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail(AsegStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn split_of(s: AsegSplit) -> Split {
    match s {
        AsegSplit::Train => Split::Train,
        AsegSplit::Val => Split::Val,
        AsegSplit::Test => Split::Test,
    }
}

/// Message of the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn aseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Closed-form trainable-parameter count of an adapter plan.
///
/// # Safety
/// `out` must be a valid pointer to a `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn aseg_count_params(
    preset: AsegPreset,
    variant: AsegVariant,
    kind: AsegKind,
    d_prime: usize,
    out: *mut u64,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dims = match preset {
            AsegPreset::ClipB => SiteDims::clip_b(),
            AsegPreset::Toy => SiteDims::from_config(&ModelConfig::toy()),
        };
        let variant = match variant {
            AsegVariant::V => Variant::V,
            AsegVariant::Vl => Variant::VL,
            AsegVariant::Vlc => Variant::VLC,
        };
        let kind = match kind {
            AsegKind::Shallow => AdapterKind::Shallow,
            AsegKind::Dense => AdapterKind::Dense,
        };
        *out = count_trainable(&AdapterPlan::new(variant, kind, d_prime), &dims)?;
        Ok(())
    })
}

/// Loads a checkpoint written by the `train` command.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aseg_model_load(path: *const c_char, out: *mut *mut AsegModel) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = checkpoint::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(AsegModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`aseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aseg_model_free(model: *mut AsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aseg_model_image_size(model: *const AsegModel, out: *mut usize) -> AsegStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.0.config().image_size;
        Ok(())
    })
}

/// Number of trainable adapter parameters in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aseg_model_trainable_count(model: *const AsegModel, out: *mut u64) -> AsegStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(model, "model")?.0.trainable_count();
        Ok(())
    })
}

/// Predicts per-pixel logits for one image and prompt.
///
/// `rgb` holds `size * size * 3` interleaved bytes in row-major order;
/// `logits` receives `size * size` values.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `prompt` must be
/// nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn aseg_model_predict(
    model: *const AsegModel,
    rgb: *const u8,
    rgb_len: usize,
    prompt: *const c_char,
    logits: *mut f64,
    logits_len: usize,
) -> AsegStatus {
    guard(|| {
        let model = &ref_arg(model, "model")?.0;
        let size = model.config().image_size;
        let rgb = slice_arg(rgb, rgb_len, "rgb")?;
        if rgb.len() != size * size * 3 {
            return Err(invalid(format!("rgb has {} bytes, expected {}", rgb.len(), size * size * 3)));
        }
        if logits.is_null() {
            return Err(Fail(AsegStatus::NullPointer, "logits is null".into()));
        }
        if logits_len < size * size {
            return Err(Fail(AsegStatus::BufferTooSmall, format!("logits needs {} slots", size * size)));
        }
        let prompt = str_arg(prompt, "prompt")?;
        let image = Tensor::new(rgb.iter().map(|&b| f64::from(b) / 255.0).collect(), &[size, size, 3])
            .map_err(Error::from)?;
        let ids = model.backbone.tokenizer().encode(prompt);
        let out = no_grad(|| model.forward(&image, &ids))?.to_vec();
        std::slice::from_raw_parts_mut(logits, size * size).copy_from_slice(&out);
        Ok(())
    })
}

/// Generates the synthetic distractor dataset in memory.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aseg_dataset_generate(
    seed: u64,
    n: usize,
    size: usize,
    out: *mut *mut AsegDataset,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let d = data::generate(&GeneratorSpec { seed, n, size })?;
        *out = Box::into_raw(Box::new(AsegDataset(d)));
        Ok(())
    })
}

/// Loads a dataset from a JSONL manifest.
///
/// # Safety
/// `manifest` must be nul-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aseg_dataset_load(manifest: *const c_char, out: *mut *mut AsegDataset) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let d = data::load(Path::new(str_arg(manifest, "manifest")?))?;
        *out = Box::into_raw(Box::new(AsegDataset(d)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aseg_dataset_free(dataset: *mut AsegDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples in one split.
///
/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aseg_dataset_len(dataset: *const AsegDataset, split: AsegSplit, out: *mut usize) -> AsegStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(dataset, "dataset")?.0.get(split_of(split)).len();
        Ok(())
    })
}

/// Scores a model on one split, prompting each sample with its first prompt.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aseg_evaluate(
    model: *const AsegModel,
    dataset: *const AsegDataset,
    split: AsegSplit,
    threshold: f64,
    out: *mut AsegScores,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = &ref_arg(model, "model")?.0;
        let samples = ref_arg(dataset, "dataset")?.0.get(split_of(split));
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(invalid(format!("threshold {threshold} is not in (0, 1)")));
        }
        let r = adapterseg::run::evaluate(model, samples, threshold)?;
        *out = AsegScores { dsc: r.dsc, iou: r.iou, hd95: r.hd95 };
        Ok(())
    })
}

/// DSC, IoU and HD95 of two binary masks given as `height * width` bytes
/// (zero is background, anything else foreground).
///
/// # Safety
/// `pred` and `gt` must each hold `height * width` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn aseg_mask_scores(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut AsegScores,
) -> AsegStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = height.checked_mul(width).ok_or_else(|| invalid("height * width overflows"))?;
        let to_mask = |p: &[u8]| Mask::new(height, width, p.iter().map(|&b| b != 0).collect());
        let pred = to_mask(slice_arg(pred, n, "pred")?)?;
        let gt = to_mask(slice_arg(gt, n, "gt")?)?;
        let s = metrics::sample_metrics(&pred, &gt)?;
        *out = AsegScores { dsc: s.dsc, iou: s.iou, hd95: s.hd95 };
        Ok(())
    })
}
