//! C ABI over the pavsgg library.
//!
//! Every function returns a [`PavsggStatus`]. On failure a message is kept
//! per thread and can be read with [`pavsgg_last_error_message`]. Objects
//! cross the boundary as opaque handles that must be released with the
//! matching `_free` function; strings returned through `char **` outputs
//! are released with [`pavsgg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pavsgg::config::RunConfig;
use pavsgg::diff::ParamStore;
use pavsgg::evalrank::{composite_score, evaluate, rank_frame, Protocol};
use pavsgg::ram::{grounding_score, reliability};
use pavsgg::relnet::{ClipInputs, RelNet};
use pavsgg::scene::{generate_clip, iou, read_split, AttentionMap, BoundingBox, VideoClip};
use pavsgg::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PavsggStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Data = 3,
    Io = 4,
    Panic = 5,
}

/// Opaque attention map.
pub struct PavsggAttention(AttentionMap);

/// Opaque video clip.
pub struct PavsggClip(VideoClip);

/// Opaque trained model.
pub struct PavsggModel {
    net: RelNet,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(PavsggStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => PavsggStatus::Io,
            Error::InvalidConfig(_) | Error::Shape { .. } | Error::EmptyBoxProjection => PavsggStatus::InvalidArgument,
            _ => PavsggStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PavsggStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(PavsggStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PavsggStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PavsggStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            PavsggStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn in_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn in_box(p: *const f64) -> Result<BoundingBox, Failure> {
    if p.is_null() {
        return Err(null("box"));
    }
    let v = std::slice::from_raw_parts(p, 4);
    BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| invalid(e.to_string()))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("string contains an interior NUL"))
}

fn load_config(json: Option<&str>) -> Result<RunConfig, Failure> {
    let cfg = match json {
        Some(text) => RunConfig::from_json(text).map_err(|e| invalid(format!("config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pavsgg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pavsgg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must point to four doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_iou(a: *const f64, b: *const f64, out: *mut f64) -> PavsggStatus {
    guard(|| {
        let (a, b) = (in_box(a)?, in_box(b)?);
        *out_ref(out, "out")? = iou(&a, &b);
        Ok(())
    })
}

/// Product score `conf_s * conf_o * pc * pa`; `pa` is ignored when
/// `pa_enabled` is zero.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_composite_score(
    conf_s: f64,
    conf_o: f64,
    pc: f64,
    pa: f64,
    pa_enabled: i32,
    out: *mut f64,
) -> PavsggStatus {
    guard(|| {
        *out_ref(out, "out")? = composite_score(conf_s, conf_o, pc, pa, pa_enabled != 0);
        Ok(())
    })
}

/// Copies `height * width` row-major values into a new attention map.
///
/// # Safety
/// `values` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_attention_new(
    height: usize,
    width: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut PavsggAttention,
) -> PavsggStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if values.is_null() {
            return Err(null("values"));
        }
        if len != height.saturating_mul(width) {
            return Err(invalid(format!("expected {} values, got {len}", height.saturating_mul(width))));
        }
        let data = std::slice::from_raw_parts(values, len).to_vec();
        let map = AttentionMap::new(height, width, data)?;
        *out = Box::into_raw(Box::new(PavsggAttention(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must come from [`pavsgg_attention_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_attention_free(map: *mut PavsggAttention) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Reliability `r` of an attention map.
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_reliability(map: *const PavsggAttention, out: *mut f64) -> PavsggStatus {
    guard(|| {
        let map = in_ref(map, "map")?;
        *out_ref(out, "out")? = reliability(&map.0).r;
        Ok(())
    })
}

/// Grounding score of a `[x1, y1, x2, y2]` box under an attention map.
/// Boxes are in image pixels; the map covers the whole image whatever its
/// grid size.
///
/// # Safety
/// `map` must be a live handle, `bbox` must point to four doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_grounding_score(
    map: *const PavsggAttention,
    bbox: *const f64,
    out: *mut f64,
) -> PavsggStatus {
    guard(|| {
        let map = in_ref(map, "map")?;
        let b = in_box(bbox)?;
        *out_ref(out, "out")? = grounding_score(&map.0, &b)?;
        Ok(())
    })
}

/// Generates one synthetic clip. `config_json` may be NULL for defaults.
///
/// # Safety
/// `config_json` must be NULL or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_clip_generate(
    config_json: *const c_char,
    clip_seed: u64,
    out: *mut *mut PavsggClip,
) -> PavsggStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let json = if config_json.is_null() {
            None
        } else {
            Some(in_str(config_json, "config_json")?)
        };
        let cfg = load_config(json)?;
        let clip = generate_clip(&cfg.gen, clip_seed);
        *out = Box::into_raw(Box::new(PavsggClip(clip)));
        Ok(())
    })
}

/// Parses a clip document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_clip_from_json(json: *const c_char, out: *mut *mut PavsggClip) -> PavsggStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let text = in_str(json, "json")?;
        let clip: VideoClip = serde_json::from_str(text).map_err(|e| Failure(PavsggStatus::Data, e.to_string()))?;
        clip.validate()?;
        *out = Box::into_raw(Box::new(PavsggClip(clip)));
        Ok(())
    })
}

/// Serializes a clip; release the result with [`pavsgg_string_free`].
///
/// # Safety
/// `clip` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_clip_to_json(clip: *const PavsggClip, out: *mut *mut c_char) -> PavsggStatus {
    guard(|| {
        let clip = in_ref(clip, "clip")?;
        let out = out_ref(out, "out")?;
        let text = serde_json::to_string(&clip.0).map_err(|e| Failure(PavsggStatus::Data, e.to_string()))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// Number of frames in a clip.
///
/// # Safety
/// `clip` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_clip_frame_count(clip: *const PavsggClip, out: *mut usize) -> PavsggStatus {
    guard(|| {
        *out_ref(out, "out")? = in_ref(clip, "clip")?.0.frames.len();
        Ok(())
    })
}

/// # Safety
/// `clip` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_clip_free(clip: *mut PavsggClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Loads a checkpoint directory written by `pavsgg train`.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_model_load(dir: *const c_char, out: *mut *mut PavsggModel) -> PavsggStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let dir = in_str(dir, "dir")?;
        let (net, store) = RelNet::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(PavsggModel { net, store }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pavsgg_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_model_free(model: *mut PavsggModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Ranked triplets of frame `t` as a JSON array of
/// `{subject, object, predicate, score}`. `with_constraint` selects the
/// protocol; `pa_enabled` and `pam` toggle affinity scoring and gating.
///
/// # Safety
/// `model` and `clip` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_model_rank(
    model: *const PavsggModel,
    clip: *const PavsggClip,
    t: usize,
    with_constraint: i32,
    pa_enabled: i32,
    pam: i32,
    out: *mut *mut c_char,
) -> PavsggStatus {
    guard(|| {
        let model = in_ref(model, "model")?;
        let clip = in_ref(clip, "clip")?;
        let out = out_ref(out, "out")?;
        if t >= clip.0.frames.len() {
            return Err(invalid(format!("frame {t} out of range ({} frames)", clip.0.frames.len())));
        }
        let inputs = ClipInputs::build(&clip.0, &model.net.cfg)?;
        let outputs = model.net.infer(&model.store, &inputs, pam != 0)?;
        let protocol = if with_constraint != 0 {
            Protocol::WithConstraint
        } else {
            Protocol::NoConstraint
        };
        let ranked = rank_frame(&outputs[t], &clip.0.frames[t], protocol, pa_enabled != 0)?;
        let text = serde_json::to_string(&ranked).map_err(|e| Failure(PavsggStatus::Data, e.to_string()))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}

/// Evaluates a model on a split directory and returns the report JSON.
/// `config_json` may be NULL for defaults.
///
/// # Safety
/// `model` must be a live handle, `split_dir` a NUL-terminated path,
/// `config_json` NULL or NUL-terminated, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pavsgg_model_evaluate(
    model: *const PavsggModel,
    split_dir: *const c_char,
    config_json: *const c_char,
    out: *mut *mut c_char,
) -> PavsggStatus {
    guard(|| {
        let model = in_ref(model, "model")?;
        let out = out_ref(out, "out")?;
        let dir = in_str(split_dir, "split_dir")?;
        let json = if config_json.is_null() {
            None
        } else {
            Some(in_str(config_json, "config_json")?)
        };
        let cfg = load_config(json)?;
        let records = read_split(Path::new(dir))?;
        let mut report = evaluate(&model.net, &model.store, &records, &cfg.eval, &cfg.ram)?;
        report.seed = Some(cfg.seed);
        let text = serde_json::to_string(&report).map_err(|e| Failure(PavsggStatus::Data, e.to_string()))?;
        *out = into_c_string(text)?;
        Ok(())
    })
}
