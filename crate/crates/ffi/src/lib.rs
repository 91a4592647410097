//! C ABI over the attnlab toolkit.
//!
//! Every fallible call returns an [`AttnlabStatus`]; on failure the message is
//! available from [`attnlab_last_error`] on the same thread. Handles are
//! opaque and released with their matching `_free` function. Strings returned
//! through out-parameters are released with [`attnlab_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use attnlab::attention::policy::InjectionPolicy;
use attnlab::backend::adapter::{LoadOptions, ModelAdapter};
use attnlab::editing::fpe::run_edit;
use attnlab::editing::job::EditJob;
use attnlab::service::{execute, JobKind, JobRequest, RunContext, ToolkitConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The request was rejected before running (bad value, prompt too long).
    Validation = 3,
    /// Weights or other required files are missing or unreadable.
    MissingAssets = 4,
    /// The operation failed while running.
    Runtime = 5,
    /// The library panicked; the handle involved should be freed.
    Panic = 6,
}

/// A loaded backbone.
pub struct AttnlabAdapter {
    adapter: ModelAdapter,
    config: ToolkitConfig,
}

/// An RGB8 image, row-major and tightly packed.
pub struct AttnlabImage {
    width: u32,
    height: u32,
    rgb: Vec<u8>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(AttnlabStatus, String);

impl From<attnlab::Error> for Failure {
    fn from(e: attnlab::Error) -> Self {
        use attnlab::Error as E;
        let status = match &e {
            E::Validation(_) | E::PromptTooLong { .. } | E::UnknownBackbone(_) => AttnlabStatus::Validation,
            E::MissingAssets { .. } | E::Load { .. } => AttnlabStatus::MissingAssets,
            _ => AttnlabStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `body`, recording failures and panics for [`attnlab_last_error`].
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> AttnlabStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => AttnlabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AttnlabStatus::Panic
        }
    }
}

/// Reads a required C string.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn required<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure(AttnlabStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(AttnlabStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

/// Reads an optional C string; null means absent.
///
/// # Safety
/// As [`required`].
unsafe fn optional<'a>(ptr: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if ptr.is_null() {
        Ok(None)
    } else {
        required(ptr, name).map(Some)
    }
}

fn null_out(name: &str) -> Failure {
    Failure(AttnlabStatus::NullArgument, format!("`{name}` is null"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(std::ptr::null_mut(), CString::into_raw)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attnlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn attnlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a backbone (`sd15` or `tiny-test`).
///
/// `device` and `weights_root` may be null (meaning `auto` and unset).
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attnlab_adapter_load(
    backbone: *const c_char,
    device: *const c_char,
    weights_root: *const c_char,
    fixture_seed: u64,
    out: *mut *mut AttnlabAdapter,
) -> AttnlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = std::ptr::null_mut();
        let backbone = required(backbone, "backbone")?;
        let device = optional(device, "device")?.unwrap_or("auto");
        let weights_root = optional(weights_root, "weights_root")?.map(PathBuf::from);
        let mut config = ToolkitConfig::default();
        config.set("backbone", backbone)?;
        config.device_hint = device.to_string();
        config.weights_root = weights_root.clone();
        config.fixture_seed = fixture_seed;
        let opts = LoadOptions {
            weights_root,
            fixture_seed,
            ..Default::default()
        };
        let adapter = ModelAdapter::load(backbone, device, &opts)?;
        *out = Box::into_raw(Box::new(AttnlabAdapter { adapter, config }));
        Ok(())
    })
}

/// Releases an adapter. Null is ignored.
///
/// # Safety
/// `adapter` must be null or a handle from [`attnlab_adapter_load`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn attnlab_adapter_free(adapter: *mut AttnlabAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Number of attention sites (self plus cross) of the adapter's backbone.
///
/// # Safety
/// `adapter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn attnlab_adapter_site_count(adapter: *const AttnlabAdapter) -> usize {
    adapter.as_ref().map_or(0, |a| a.adapter.sites().len())
}

/// The site table as a JSON array.
///
/// # Safety
/// `adapter` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn attnlab_adapter_sites_json(
    adapter: *const AttnlabAdapter,
    out_json: *mut *mut c_char,
) -> AttnlabStatus {
    guard(|| {
        let a = adapter.as_ref().ok_or_else(|| null_out("adapter"))?;
        let out = out_json.as_mut().ok_or_else(|| null_out("out_json"))?;
        let text = serde_json::to_string(a.adapter.sites()).map_err(|e| Failure(AttnlabStatus::Runtime, e.to_string()))?;
        *out = into_c_string(text);
        Ok(())
    })
}

fn to_image(img: &attnlab::io::image::RgbImage) -> *mut AttnlabImage {
    Box::into_raw(Box::new(AttnlabImage {
        width: img.width(),
        height: img.height(),
        rgb: img.as_raw().clone(),
    }))
}

/// Edits the image generated from `source_prompt` with `seed` toward
/// `target_prompt`, replacing self-attention maps at the backbone's default
/// sites over the first `ratio` of `steps` (0 means the default step count).
///
/// `out_source` may be null when the source image is not wanted.
///
/// # Safety
/// `adapter` must be a live handle, the prompts NUL-terminated, and the
/// out-pointers writable (or null where allowed).
#[no_mangle]
pub unsafe extern "C" fn attnlab_edit(
    adapter: *const AttnlabAdapter,
    seed: u64,
    source_prompt: *const c_char,
    target_prompt: *const c_char,
    ratio: f64,
    steps: u32,
    out_source: *mut *mut AttnlabImage,
    out_edited: *mut *mut AttnlabImage,
) -> AttnlabStatus {
    guard(|| {
        let a = adapter.as_ref().ok_or_else(|| null_out("adapter"))?;
        let edited = out_edited.as_mut().ok_or_else(|| null_out("out_edited"))?;
        *edited = std::ptr::null_mut();
        let src = required(source_prompt, "source_prompt")?;
        let dst = required(target_prompt, "target_prompt")?;
        let mut job = EditJob::generated(seed, src, dst);
        job.policy = InjectionPolicy {
            site_indices: a.config.default_policy.site_indices.clone(),
            replace_ratio: ratio,
            ..Default::default()
        };
        if steps > 0 {
            job.sampler.step_count = steps as usize;
        }
        let outcome = run_edit(&a.adapter, &job)?;
        if let Some(s) = out_source.as_mut() {
            *s = to_image(&outcome.source_image);
        }
        *edited = to_image(&outcome.edited_image);
        Ok(())
    })
}

/// Runs a job of `kind` (`edit`, `sweep`, `harvest`, `probe`, `benchmark`)
/// from its JSON request, writing artifacts to `out_dir`. The summary JSON is
/// stored in `out_summary` when it is not null.
///
/// # Safety
/// `adapter` must be a live handle; strings NUL-terminated; `out_summary`
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn attnlab_run_job(
    adapter: *const AttnlabAdapter,
    kind: *const c_char,
    request_json: *const c_char,
    out_dir: *const c_char,
    out_summary: *mut *mut c_char,
) -> AttnlabStatus {
    guard(|| {
        let a = adapter.as_ref().ok_or_else(|| null_out("adapter"))?;
        let kind: JobKind = required(kind, "kind")?.parse()?;
        let text = required(request_json, "request_json")?;
        let out_dir = Path::new(required(out_dir, "out_dir")?);
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Failure(AttnlabStatus::Validation, format!("request_json: {e}")))?;
        let request = JobRequest::parse(kind, &doc, "")
            .map_err(|v| Failure(AttnlabStatus::Validation, format!("request_json at `{}`: {}", v.pointer, v.message)))?;
        let ctx = RunContext {
            adapter: &a.adapter,
            config: &a.config,
        };
        let summary = execute(&ctx, &request, out_dir)?;
        if let Some(s) = out_summary.as_mut() {
            *s = into_c_string(summary.to_string());
        }
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a live image handle.
#[no_mangle]
pub unsafe extern "C" fn attnlab_image_width(image: *const AttnlabImage) -> u32 {
    image.as_ref().map_or(0, |i| i.width)
}

/// # Safety
/// `image` must be null or a live image handle.
#[no_mangle]
pub unsafe extern "C" fn attnlab_image_height(image: *const AttnlabImage) -> u32 {
    image.as_ref().map_or(0, |i| i.height)
}

/// Pixel bytes (`width * height * 3`), valid until the image is freed.
///
/// # Safety
/// `image` must be null or a live image handle; `out_len` null or writable.
#[no_mangle]
pub unsafe extern "C" fn attnlab_image_data(image: *const AttnlabImage, out_len: *mut usize) -> *const u8 {
    let Some(i) = image.as_ref() else {
        if let Some(l) = out_len.as_mut() {
            *l = 0;
        }
        return std::ptr::null();
    };
    if let Some(l) = out_len.as_mut() {
        *l = i.rgb.len();
    }
    i.rgb.as_ptr()
}

/// Releases an image. Null is ignored.
///
/// # Safety
/// `image` must be null or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attnlab_image_free(image: *mut AttnlabImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Releases a string returned through an out-parameter. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn attnlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
