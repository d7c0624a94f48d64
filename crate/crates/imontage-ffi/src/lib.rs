//! C ABI over the imontage pipeline: model lifecycle, many-in/many-out
//! sampling, and the set-consistency metrics.
//!
//! Every fallible function returns an [`ImtgStatus`]; on any non-OK status a
//! human-readable message is stored per thread and can be read back with
//! [`imtg_last_error`]. Handles returned through out-pointers are owned by
//! the caller and must be released with the matching `_free` function.
//! Handles are not internally synchronized — share them across threads only
//! behind the caller's own lock. No function unwinds across the boundary;
//! panics are caught and surfaced as `IMTG_STATUS_RUNTIME`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use imontage::config::{ConfigError, RunConfig};
use imontage::data::{motion_score, DataError};
use imontage::eval::{ip_score, masked_embed, psnr, tc_score, DefaultExtractor, EvalError};
use imontage::flow::{sample, FlowError};
use imontage::model::{init_params, param_count, Parameters};
use imontage::pack::Image;
use imontage::train::{load_checkpoint, stream_rng, TrainError, INIT_STREAM};

/// Result of every fallible call. `IMTG_STATUS_OK` is zero; anything else
/// leaves a message readable through `imtg_last_error`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ImtgStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was outside the function's domain (empty image, zero
    /// output count, too few frames for a pairwise score, ...).
    InvalidArgument = 3,
    /// The config JSON was rejected, or a checkpoint was written under a
    /// different config.
    Config = 4,
    /// The filesystem failed.
    Io = 5,
    /// An internal failure: corrupt checkpoint bytes or a caught panic.
    Runtime = 6,
}

/// Borrowed view of one interleaved RGB float image, row-major, `h*w*3`
/// samples in `[0, 1]`. The caller keeps ownership of `data`.
#[repr(C)]
pub struct ImtgImageView {
    pub data: *const f32,
    pub h: usize,
    pub w: usize,
}

/// Opaque handle holding a parsed run config plus model parameters.
pub struct ImtgModel {
    cfg: RunConfig,
    params: Parameters<f32>,
    step: u64,
}

/// Opaque handle owning the frames produced by one sampling call.
pub struct ImtgFrames {
    frames: Vec<Image>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).expect("NULs stripped");
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

struct Fail(ImtgStatus, String);

type FfiResult<T> = Result<T, Fail>;

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Fail {
        let status = match e {
            ConfigError::Io { .. } => ImtgStatus::Io,
            _ => ImtgStatus::Config,
        };
        Fail(status, e.to_string())
    }
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Fail {
        let status = match e {
            TrainError::Io { .. } => ImtgStatus::Io,
            TrainError::DigestMismatch => ImtgStatus::Config,
            _ => ImtgStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

impl From<FlowError> for Fail {
    fn from(e: FlowError) -> Fail {
        let status = match e {
            // Geometry and prompt problems originate in the arguments.
            FlowError::Pack(_) => ImtgStatus::InvalidArgument,
            FlowError::Tensor(_) => ImtgStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

impl From<EvalError> for Fail {
    fn from(e: EvalError) -> Fail {
        let status = match e {
            EvalError::Io { .. } => ImtgStatus::Io,
            EvalError::Transport(_)
            | EvalError::MalformedReply(_)
            | EvalError::ScoreOutOfRange(_) => ImtgStatus::Runtime,
            _ => ImtgStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

impl From<DataError> for Fail {
    fn from(e: DataError) -> Fail {
        let status = match e {
            DataError::Io { .. } | DataError::Codec { .. } => ImtgStatus::Io,
            _ => ImtgStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn finish(r: FfiResult<()>) -> ImtgStatus {
    match r {
        Ok(()) => ImtgStatus::Ok,
        Err(Fail(status, msg)) => {
            set_last_error(&msg);
            status
        }
    }
}

fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> ImtgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => finish(r),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with a non-string payload".into());
            set_last_error(&format!("internal panic: {msg}"));
            ImtgStatus::Runtime
        }
    }
}

fn bail<T>(status: ImtgStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Fail(status, msg.into()))
}

unsafe fn cstr<'a>(name: &str, p: *const c_char) -> FfiResult<&'a str> {
    if p.is_null() {
        return bail(ImtgStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ImtgStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_slot<'a, T>(name: &str, p: *mut T) -> FfiResult<&'a mut T> {
    if p.is_null() {
        return bail(ImtgStatus::NullArgument, format!("{name} is null"));
    }
    Ok(&mut *p)
}

unsafe fn handle<'a, T>(name: &str, p: *const T) -> FfiResult<&'a T> {
    if p.is_null() {
        return bail(ImtgStatus::NullArgument, format!("{name} is null"));
    }
    Ok(&*p)
}

unsafe fn image_of(name: &str, v: &ImtgImageView) -> FfiResult<Image> {
    if v.data.is_null() {
        return bail(ImtgStatus::NullArgument, format!("{name}.data is null"));
    }
    if v.h == 0 || v.w == 0 {
        return bail(
            ImtgStatus::InvalidArgument,
            format!("{name} is {}x{}; both sides must be positive", v.h, v.w),
        );
    }
    let data = std::slice::from_raw_parts(v.data, v.h * v.w * 3).to_vec();
    Ok(Image::new(v.h, v.w, data))
}

unsafe fn images_of(name: &str, p: *const ImtgImageView, n: usize) -> FfiResult<Vec<Image>> {
    if p.is_null() {
        return bail(ImtgStatus::NullArgument, format!("{name} is null"));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .enumerate()
        .map(|(i, v)| image_of(&format!("{name}[{i}]"), v))
        .collect()
}

fn parse_config(json: &str) -> FfiResult<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(json)
        .map_err(|e| Fail(ImtgStatus::Config, format!("config JSON: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn embed_full_frame(images: &[Image]) -> FfiResult<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| {
            let mask = vec![true; img.h * img.w];
            masked_embed(img, &mask, &DefaultExtractor).map_err(Fail::from)
        })
        .collect()
}

/// Version of the library, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn imtg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing this thread's most recent failure, empty until one
/// occurs. The pointer stays valid until the next failing call on the same
/// thread.
#[no_mangle]
pub extern "C" fn imtg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a model with freshly initialized parameters.
///
/// `config_json` is a run-config document; `{}` selects every default. The
/// parameters are drawn exactly as training initialization draws them, from
/// the config seed, so a fresh handle matches step zero of a training run.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer;
/// on OK the caller owns `*out` and must release it with `imtg_model_free`.
#[no_mangle]
pub unsafe extern "C" fn imtg_model_new(
    config_json: *const c_char,
    out: *mut *mut ImtgModel,
) -> ImtgStatus {
    guard(|| {
        let json = cstr("config_json", config_json)?;
        let slot = out_slot("out", out)?;
        let cfg = parse_config(json)?;
        let params = init_params(&cfg.model, &mut stream_rng(cfg.seed, INIT_STREAM));
        *slot = Box::into_raw(Box::new(ImtgModel {
            cfg,
            params,
            step: 0,
        }));
        Ok(())
    })
}

/// Build a model from a checkpoint written under the same config.
///
/// The checkpoint must carry the digest of `config_json` as parsed — the one
/// the command-line `train` stamps — otherwise the call fails with
/// `IMTG_STATUS_CONFIG`.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` a valid pointer; on OK the
/// caller owns `*out` and must release it with `imtg_model_free`.
#[no_mangle]
pub unsafe extern "C" fn imtg_model_load(
    config_json: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut ImtgModel,
) -> ImtgStatus {
    guard(|| {
        let json = cstr("config_json", config_json)?;
        let path = cstr("checkpoint_path", checkpoint_path)?;
        let slot = out_slot("out", out)?;
        let cfg = parse_config(json)?;
        let cp = load_checkpoint(Path::new(path), &cfg.digest())?;
        *slot = Box::into_raw(Box::new(ImtgModel {
            cfg,
            params: cp.params,
            step: cp.step,
        }));
        Ok(())
    })
}

/// Number of scalar parameters in the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from `imtg_model_new`/`_load`.
#[no_mangle]
pub unsafe extern "C" fn imtg_model_param_count(model: *const ImtgModel) -> u64 {
    match model.as_ref() {
        Some(m) => param_count(&m.params) as u64,
        None => 0,
    }
}

/// Training step the parameters were saved at (0 for a fresh model or a null
/// handle).
///
/// # Safety
/// `model` must be null or a live handle from `imtg_model_new`/`_load`.
#[no_mangle]
pub unsafe extern "C" fn imtg_model_step(model: *const ImtgModel) -> u64 {
    match model.as_ref() {
        Some(m) => m.step,
        None => 0,
    }
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a live handle, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn imtg_model_free(model: *mut ImtgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generate `n_out` frames of `out_h` x `out_w` pixels conditioned on the
/// reference images and the instruction.
///
/// Sampler settings and the position-layout strategy come from the model's
/// config; `seed` alone controls the noise, so equal arguments reproduce
/// equal frames bit for bit. Both output sides must be multiples of the
/// model's patch size.
///
/// # Safety
/// `refs` must point to `n_refs` valid views, `instruction` must be
/// NUL-terminated, and `out` must be a valid pointer; on OK the caller owns
/// `*out` and must release it with `imtg_frames_free`.
#[no_mangle]
pub unsafe extern "C" fn imtg_sample(
    model: *const ImtgModel,
    refs: *const ImtgImageView,
    n_refs: usize,
    instruction: *const c_char,
    n_out: usize,
    out_h: usize,
    out_w: usize,
    seed: u64,
    out: *mut *mut ImtgFrames,
) -> ImtgStatus {
    guard(|| {
        let m = handle("model", model)?;
        let instruction = cstr("instruction", instruction)?;
        let slot = out_slot("out", out)?;
        if n_refs == 0 {
            return bail(ImtgStatus::InvalidArgument, "sampling needs a reference");
        }
        if n_out == 0 {
            return bail(ImtgStatus::InvalidArgument, "n_out must be positive");
        }
        let ref_images = images_of("refs", refs, n_refs)?;
        let frames = sample(
            &m.params,
            &m.cfg.model,
            &ref_images,
            instruction,
            n_out,
            (out_h, out_w),
            &m.cfg.sampler,
            m.cfg.strategy,
            seed,
        )?;
        *slot = Box::into_raw(Box::new(ImtgFrames { frames }));
        Ok(())
    })
}

/// Number of frames in the handle, or 0 for null.
///
/// # Safety
/// `frames` must be null or a live handle from `imtg_sample`.
#[no_mangle]
pub unsafe extern "C" fn imtg_frames_len(frames: *const ImtgFrames) -> usize {
    match frames.as_ref() {
        Some(f) => f.frames.len(),
        None => 0,
    }
}

/// Borrow frame `index` as a view into the handle's storage. The view stays
/// valid until `imtg_frames_free`.
///
/// # Safety
/// `frames` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn imtg_frames_view(
    frames: *const ImtgFrames,
    index: usize,
    out: *mut ImtgImageView,
) -> ImtgStatus {
    guard(|| {
        let f = handle("frames", frames)?;
        let slot = out_slot("out", out)?;
        let Some(img) = f.frames.get(index) else {
            return bail(
                ImtgStatus::InvalidArgument,
                format!("index {index} out of range for {} frames", f.frames.len()),
            );
        };
        *slot = ImtgImageView {
            data: img.data.as_ptr(),
            h: img.h,
            w: img.w,
        };
        Ok(())
    })
}

/// Release a frames handle. Null is a no-op.
///
/// # Safety
/// `frames` must be null or a live handle, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn imtg_frames_free(frames: *mut ImtgFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}

/// Identity-preservation score: mean cosine similarity between every
/// generated/reference embedding pair, full-frame embeddings. 1.0 when the
/// sets are identical.
///
/// # Safety
/// `gen` and `refs` must point to `n_gen` / `n_refs` valid views and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn imtg_ip_score(
    gen: *const ImtgImageView,
    n_gen: usize,
    refs: *const ImtgImageView,
    n_refs: usize,
    out: *mut f64,
) -> ImtgStatus {
    guard(|| {
        let slot = out_slot("out", out)?;
        let gen_embs = embed_full_frame(&images_of("gen", gen, n_gen)?)?;
        let ref_embs = embed_full_frame(&images_of("refs", refs, n_refs)?)?;
        *slot = ip_score(&gen_embs, &ref_embs)?;
        Ok(())
    })
}

/// Temporal-consistency score: mean cosine similarity over all unordered
/// pairs of generated frames. Needs at least two frames.
///
/// # Safety
/// `gen` must point to `n_gen` valid views and `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn imtg_tc_score(
    gen: *const ImtgImageView,
    n_gen: usize,
    out: *mut f64,
) -> ImtgStatus {
    guard(|| {
        let slot = out_slot("out", out)?;
        let gen_embs = embed_full_frame(&images_of("gen", gen, n_gen)?)?;
        *slot = tc_score(&gen_embs)?;
        Ok(())
    })
}

/// Peak signal-to-noise ratio in dB between two equal-shape images;
/// +infinity when they are identical.
///
/// # Safety
/// `a`, `b`, and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn imtg_psnr(
    a: *const ImtgImageView,
    b: *const ImtgImageView,
    out: *mut f64,
) -> ImtgStatus {
    guard(|| {
        let slot = out_slot("out", out)?;
        let a = image_of("a", handle("a", a)?)?;
        let b = image_of("b", handle("b", b)?)?;
        *slot = psnr(&a, &b)?;
        Ok(())
    })
}

/// Mean block-matching displacement between two frames, in pixels. The
/// curation pipeline uses `block` 8 and `radius` 7.
///
/// # Safety
/// `a`, `b`, and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn imtg_motion_score(
    a: *const ImtgImageView,
    b: *const ImtgImageView,
    block: usize,
    radius: usize,
    out: *mut f64,
) -> ImtgStatus {
    guard(|| {
        let slot = out_slot("out", out)?;
        if block == 0 {
            return bail(ImtgStatus::InvalidArgument, "block must be positive");
        }
        let a = image_of("a", handle("a", a)?)?;
        let b = image_of("b", handle("b", b)?)?;
        *slot = motion_score(&a, &b, block, radius)?;
        Ok(())
    })
}
