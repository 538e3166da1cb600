//! C ABI over `pomp-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` / `*_new`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`PompStatus`]; on failure the message is kept per thread and can
//! be copied out with [`pomp_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pomp_core::analysis::{alignment_loss, uniformity_loss, zero_shot_eval};
use pomp_core::data::{localize, read_features, FeatureDataset};
use pomp_core::encoder::{
    encode_all_classes, init_prompt, read_vocabulary, ClassVocabulary, EncoderKind,
    FrozenTextEncoder, SoftPrompt,
};
use pomp_core::numerics::Matrix;
use pomp_core::objective::{adaptive_margin, corrected_prob, LogitBlock};
use pomp_core::training::{load_checkpoint, save_checkpoint, Checkpoint};
use pomp_core::PompError;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PompStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DigestMismatch = 5,
    ShapeMismatch = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Encoder variants accepted by [`pomp_encoder_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PompEncoderKind {
    MeanPoolLinear = 0,
    MeanPoolTwoLayerTanh = 1,
}

pub struct PompVocabulary(ClassVocabulary);
pub struct PompEncoder(FrozenTextEncoder);
pub struct PompDataset(FeatureDataset);
pub struct PompPrompt(SoftPrompt);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &PompError) -> PompStatus {
    match err {
        PompError::Io { .. } => PompStatus::Io,
        PompError::BadMagic { .. }
        | PompError::UnsupportedVersion { .. }
        | PompError::Truncated { .. }
        | PompError::TrailingBytes { .. }
        | PompError::Parse { .. } => PompStatus::Format,
        PompError::DigestMismatch => PompStatus::DigestMismatch,
        PompError::ShapeMismatch { .. } => PompStatus::ShapeMismatch,
        PompError::NonFinite { .. } => PompStatus::NonFinite,
        _ => PompStatus::InvalidArgument,
    }
}

struct Failure(PompStatus, String);

impl From<PompError> for Failure {
    fn from(e: PompError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PompStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> PompStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PompStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside pomp".into());
            PompStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PompStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out handle"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len - 1` bytes). Returns the full message
/// length excluding the terminator; 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pomp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// `m = -ln((K - 1) / (N - 1))`.
///
/// # Safety
/// `out` must point to a writable `double`.
#[no_mangle]
pub unsafe extern "C" fn pomp_adaptive_margin(k: usize, n: usize, out: *mut f64) -> PompStatus {
    guard(|| put(out, adaptive_margin(k, n)?, "out"))
}

/// Margin-corrected probability of `sims[positive]` among `len` similarities.
///
/// # Safety
/// `sims` must point to `len` readable doubles and `out` to a writable one.
#[no_mangle]
pub unsafe extern "C" fn pomp_corrected_prob(
    sims: *const f64,
    len: usize,
    positive: usize,
    tau: f64,
    margin: f64,
    out: *mut f64,
) -> PompStatus {
    guard(|| {
        let s = slice_arg(sims, len, "sims")?;
        let block = LogitBlock::new(s.to_vec(), positive, tau, margin)?;
        put(out, corrected_prob(&block), "out")
    })
}

/// Loads a vocabulary file and its token embedding table.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_vocab_load(
    vocab_path: *const c_char,
    embedding_path: *const c_char,
    out: *mut *mut PompVocabulary,
) -> PompStatus {
    guard(|| {
        let v = read_vocabulary(&path_arg(vocab_path, "vocab_path")?, &path_arg(embedding_path, "embedding_path")?)?;
        put_handle(out, PompVocabulary(v))
    })
}

/// # Safety
/// `vocab` must be null or a handle from [`pomp_vocab_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn pomp_vocab_free(vocab: *mut PompVocabulary) {
    free_handle(vocab)
}

/// # Safety
/// `vocab` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pomp_vocab_num_classes(vocab: *const PompVocabulary) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.num_classes())
}

/// # Safety
/// `vocab` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pomp_vocab_embed_dim(vocab: *const PompVocabulary) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.embed_dim())
}

/// Seeded frozen encoder mapping `embed_dim`-wide tokens to `output_dim`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_encoder_new(
    kind: PompEncoderKind,
    seed: u64,
    embed_dim: usize,
    output_dim: usize,
    out: *mut *mut PompEncoder,
) -> PompStatus {
    guard(|| {
        let kind = match kind {
            PompEncoderKind::MeanPoolLinear => EncoderKind::MeanPoolLinear,
            PompEncoderKind::MeanPoolTwoLayerTanh => EncoderKind::MeanPoolTwoLayerTanh,
        };
        put_handle(out, PompEncoder(FrozenTextEncoder::new(kind, seed, embed_dim, output_dim)?))
    })
}

/// # Safety
/// `encoder` must be null or a handle from [`pomp_encoder_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn pomp_encoder_free(encoder: *mut PompEncoder) {
    free_handle(encoder)
}

/// Loads a feature file and its label file.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_dataset_load(
    feature_path: *const c_char,
    label_path: *const c_char,
    out: *mut *mut PompDataset,
) -> PompStatus {
    guard(|| {
        let d = read_features(&path_arg(feature_path, "feature_path")?, &path_arg(label_path, "label_path")?)?;
        put_handle(out, PompDataset(d))
    })
}

/// # Safety
/// `dataset` must be null or a handle from [`pomp_dataset_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn pomp_dataset_free(dataset: *mut PompDataset) {
    free_handle(dataset)
}

/// # Safety
/// `dataset` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pomp_dataset_len(dataset: *const PompDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pomp_dataset_dim(dataset: *const PompDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.dim())
}

/// Freshly initialized `len × embed_dim` prompt.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_prompt_init(
    len: usize,
    embed_dim: usize,
    seed: u64,
    out: *mut *mut PompPrompt,
) -> PompStatus {
    guard(|| put_handle(out, PompPrompt(init_prompt(len, embed_dim, seed)?)))
}

/// Loads a checkpoint's prompt; `step` and `seed` may be null.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable; `step`
/// and `seed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_checkpoint_load(
    path: *const c_char,
    out: *mut *mut PompPrompt,
    step: *mut u64,
    seed: *mut u64,
) -> PompStatus {
    guard(|| {
        let ckpt = load_checkpoint(&path_arg(path, "path")?)?;
        if out.is_null() {
            return Err(null("out handle"));
        }
        if !step.is_null() {
            step.write(ckpt.step);
        }
        if !seed.is_null() {
            seed.write(ckpt.seed);
        }
        put_handle(out, PompPrompt(ckpt.prompt))
    })
}

/// Writes `prompt` as a checkpoint file.
///
/// # Safety
/// `prompt` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pomp_checkpoint_save(
    prompt: *const PompPrompt,
    step: u64,
    seed: u64,
    path: *const c_char,
) -> PompStatus {
    guard(|| {
        let p = handle(prompt, "prompt")?;
        let ckpt = Checkpoint::new(p.0.clone(), step, seed)?;
        save_checkpoint(&ckpt, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `prompt` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn pomp_prompt_free(prompt: *mut PompPrompt) {
    free_handle(prompt)
}

/// # Safety
/// `prompt` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pomp_prompt_len(prompt: *const PompPrompt) -> usize {
    prompt.as_ref().map_or(0, |p| p.0.len())
}

/// # Safety
/// `prompt` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn pomp_prompt_embed_dim(prompt: *const PompPrompt) -> usize {
    prompt.as_ref().map_or(0, |p| p.0.embed_dim())
}

/// Copies the prompt row-major into `buf`, which must hold `len × embed_dim`
/// doubles.
///
/// # Safety
/// `buf` must point to `buf_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pomp_prompt_copy(prompt: *const PompPrompt, buf: *mut f64, buf_len: usize) -> PompStatus {
    guard(|| {
        let p = handle(prompt, "prompt")?;
        copy_out(p.0.theta().as_slice(), buf, buf_len)
    })
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, buf_len: usize) -> Result<(), Failure> {
    if buf_len < src.len() {
        return Err(Failure(
            PompStatus::BufferTooSmall,
            format!("buffer holds {buf_len} values, {} needed", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Writes the `N × output_dim` class-feature matrix, row-major, into `buf`.
///
/// # Safety
/// Handles must be live; `buf` must point to `buf_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pomp_encode_class_features(
    encoder: *const PompEncoder,
    prompt: *const PompPrompt,
    vocab: *const PompVocabulary,
    buf: *mut f64,
    buf_len: usize,
) -> PompStatus {
    guard(|| {
        let (e, p, v) = (handle(encoder, "encoder")?, handle(prompt, "prompt")?, handle(vocab, "vocab")?);
        let features = encode_all_classes(&e.0, &p.0, &v.0)?;
        copy_out(features.as_slice(), buf, buf_len)
    })
}

/// Zero-shot top-1 / top-5 of `dataset` over the classes that occur in it.
///
/// # Safety
/// Handles must be live; `top1` and `top5` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_zero_shot_eval(
    encoder: *const PompEncoder,
    prompt: *const PompPrompt,
    vocab: *const PompVocabulary,
    dataset: *const PompDataset,
    top1: *mut f64,
    top5: *mut f64,
) -> PompStatus {
    guard(|| {
        let (e, p) = (handle(encoder, "encoder")?, handle(prompt, "prompt")?);
        let (v, d) = (handle(vocab, "vocab")?, handle(dataset, "dataset")?);
        if top1.is_null() || top5.is_null() {
            return Err(null("top1/top5"));
        }
        let (local_vocab, local_data) = localize(&v.0, &d.0)?;
        let r = zero_shot_eval(&p.0, &e.0, &local_vocab, &local_data, &[1, 5])?;
        top1.write(r.top1);
        top5.write(r.top5);
        Ok(())
    })
}

unsafe fn features_arg(buf: *const f64, rows: usize, cols: usize) -> Result<Matrix, Failure> {
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(PompStatus::InvalidArgument, "feature matrix too large".into()))?;
    Ok(Matrix::new(rows, cols, slice_arg(buf, n, "class_features")?.to_vec())?)
}

/// Mean `‖x - w_y‖²` with `class_features` given row-major as
/// `num_classes × dim`; dataset labels index its rows.
///
/// # Safety
/// `dataset` must be live; `class_features` must hold `num_classes × dim`
/// doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_alignment_loss(
    dataset: *const PompDataset,
    class_features: *const f64,
    num_classes: usize,
    dim: usize,
    out: *mut f64,
) -> PompStatus {
    guard(|| {
        let d = handle(dataset, "dataset")?;
        let w = features_arg(class_features, num_classes, dim)?;
        put(out, alignment_loss(&d.0, &w)?, "out")
    })
}

/// Log-mean Gaussian-kernel energy over ordered pairs of class features.
///
/// # Safety
/// `class_features` must hold `num_classes × dim` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pomp_uniformity_loss(
    class_features: *const f64,
    num_classes: usize,
    dim: usize,
    out: *mut f64,
) -> PompStatus {
    guard(|| {
        let w = features_arg(class_features, num_classes, dim)?;
        put(out, uniformity_loss(&w)?, "out")
    })
}
