//! C ABI over the rmfnet core.
//!
//! Handles are opaque pointers created by `*_new`/`*_load`/`*_read` and
//! released by the matching `*_free`. Every fallible call returns an
//! [`RmfStatus`]; on failure [`rmf_last_error`] gives a message for the
//! calling thread. Panics never cross the boundary; they surface as
//! [`RmfStatus::Internal`].
//!
//! Handles are not synchronized. Share one across threads only with
//! external locking.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rmfnet::augment::{augment, AugmentMethod, AugmentSpec};
use rmfnet::event::{downsample_stream, stack_count_image, Event, EventStream, Polarity, PolarityTag, SequenceWindow, Window};
use rmfnet::io::{read_events, write_events, EventFormat};
use rmfnet::model::{Model, ModelConfig};
use rmfnet::train::{infer_window, InferenceState};
use rmfnet::Error;

/// Result code of every fallible call. The numeric values of the first
/// five match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RmfStatus {
    Ok = 0,
    /// Bad argument or configuration.
    InvalidArgument = 1,
    /// Malformed input data, I/O failure or shape mismatch.
    Data = 2,
    /// A resource ceiling was hit.
    Resource = 3,
    /// Non-finite values during computation.
    Numerical = 4,
    /// A required pointer argument was null.
    NullPointer = 5,
    /// The checkpoint file does not exist.
    CheckpointNotFound = 6,
    /// A caller-provided buffer is too small.
    BufferTooSmall = 7,
    /// A bug inside the library (caught panic).
    Internal = 8,
}

/// One event as laid out in C. `p` is +1 or -1.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RmfEvent {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

/// Growable, time-ordered event stream.
pub struct RmfStream {
    width: usize,
    height: usize,
    events: Vec<Event>,
}

/// A loaded network plus its recurrent state.
pub struct RmfModel {
    model: Model<f32>,
    state: Option<InferenceState>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RmfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match (e.category(), e.exit_code()) {
            ("checkpoint_not_found", _) => RmfStatus::CheckpointNotFound,
            (_, 1) => RmfStatus::InvalidArgument,
            (_, 3) => RmfStatus::Resource,
            (_, 4) => RmfStatus::Numerical,
            _ => RmfStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: RmfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RmfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            RmfStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(RmfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(RmfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(out: *mut *mut T) -> Result<&'a mut *mut T, Failure> {
    let slot = out.as_mut().ok_or_else(|| fail(RmfStatus::NullPointer, "output pointer is null"))?;
    *slot = ptr::null_mut();
    Ok(slot)
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(RmfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(RmfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

impl RmfStream {
    fn from_stream(s: EventStream) -> Self {
        RmfStream { width: s.width(), height: s.height(), events: s.into_events() }
    }

    fn to_stream(&self) -> Result<EventStream, Failure> {
        Ok(EventStream::new(self.width, self.height, self.events.clone())?)
    }

    fn push(&mut self, e: &RmfEvent) -> Result<(), Failure> {
        if usize::from(e.x) >= self.width || usize::from(e.y) >= self.height {
            return Err(fail(RmfStatus::Data, format!("event at ({}, {}) outside {}x{}", e.x, e.y, self.width, self.height)));
        }
        if let Some(last) = self.events.last() {
            if e.t < last.t {
                return Err(fail(RmfStatus::Data, format!("timestamp {} precedes {}", e.t, last.t)));
            }
        }
        let p = Polarity::from_sign(i64::from(e.p))?;
        self.events.push(Event::new(e.t, e.x, e.y, p));
        Ok(())
    }
}

fn into_handle<T>(out: &mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rmf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Empty stream on a `width` x `height` sensor.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_new(width: usize, height: usize, out: *mut *mut RmfStream) -> RmfStatus {
    guard(|| {
        let slot = out_ptr(out)?;
        let s = EventStream::empty(width, height)?;
        into_handle(slot, RmfStream::from_stream(s));
        Ok(())
    })
}

/// Load a text or binary event file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`rmf_stream_new`].
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_read(path: *const c_char, out: *mut *mut RmfStream) -> RmfStatus {
    guard(|| {
        let slot = out_ptr(out)?;
        let path = PathBuf::from(c_str(path, "path")?);
        into_handle(slot, RmfStream::from_stream(read_events(&path)?));
        Ok(())
    })
}

/// Write the stream as text (`binary == 0`) or binary.
///
/// # Safety
/// `stream` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_write(stream: *const RmfStream, path: *const c_char, binary: i32) -> RmfStatus {
    guard(|| {
        let s = deref(stream, "stream")?;
        let path = PathBuf::from(c_str(path, "path")?);
        let format = if binary != 0 { EventFormat::Binary } else { EventFormat::Text };
        Ok(write_events(&path, &s.to_stream()?, format)?)
    })
}

/// Append `n` events. They must be in bounds and not earlier than the
/// stream's last event. On failure no event of the batch is kept.
///
/// # Safety
/// `stream` must be a live handle; `events` must point to `n` events
/// (it may be null when `n == 0`).
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_push(stream: *mut RmfStream, events: *const RmfEvent, n: usize) -> RmfStatus {
    guard(|| {
        let s = deref_mut(stream, "stream")?;
        if n == 0 {
            return Ok(());
        }
        let batch = std::slice::from_raw_parts(deref(events, "events")?, n);
        let before = s.events.len();
        for e in batch {
            if let Err(f) = s.push(e) {
                s.events.truncate(before);
                return Err(f);
            }
        }
        Ok(())
    })
}

/// Number of events, or 0 for a null handle.
///
/// # Safety
/// `stream` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_len(stream: *const RmfStream) -> usize {
    stream.as_ref().map_or(0, |s| s.events.len())
}

/// Sensor size of the stream.
///
/// # Safety
/// `stream` must be a live handle; `width`/`height` writable.
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_size(stream: *const RmfStream, width: *mut usize, height: *mut usize) -> RmfStatus {
    guard(|| {
        let s = deref(stream, "stream")?;
        *deref_mut(width, "width")? = s.width;
        *deref_mut(height, "height")? = s.height;
        Ok(())
    })
}

/// Copy event `index` into `out`.
///
/// # Safety
/// `stream` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_get(stream: *const RmfStream, index: usize, out: *mut RmfEvent) -> RmfStatus {
    guard(|| {
        let s = deref(stream, "stream")?;
        let e = s
            .events
            .get(index)
            .ok_or_else(|| fail(RmfStatus::InvalidArgument, format!("index {index} out of range ({} events)", s.events.len())))?;
        *deref_mut(out, "out")? = RmfEvent { t: e.t, x: e.x, y: e.y, p: e.p.sign() };
        Ok(())
    })
}

/// New stream with coordinates relocated down by `factor`.
///
/// # Safety
/// `stream` must be a live handle; `out` as in [`rmf_stream_new`].
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_downsample(stream: *const RmfStream, factor: usize, out: *mut *mut RmfStream) -> RmfStatus {
    guard(|| {
        let slot = out_ptr(out)?;
        let s = deref(stream, "stream")?.to_stream()?;
        into_handle(slot, RmfStream::from_stream(downsample_stream(&s, factor)?));
        Ok(())
    })
}

/// New stream produced by the named augmentation (`"polarity_flip"`,
/// `"selected_da"`, ...) with default parameters.
///
/// # Safety
/// `stream` must be a live handle and `method` a NUL-terminated string;
/// `out` as in [`rmf_stream_new`].
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_augment(
    stream: *const RmfStream,
    method: *const c_char,
    seed: u64,
    out: *mut *mut RmfStream,
) -> RmfStatus {
    guard(|| {
        let slot = out_ptr(out)?;
        let s = deref(stream, "stream")?.to_stream()?;
        let method: AugmentMethod = c_str(method, "method")?.parse()?;
        into_handle(slot, RmfStream::from_stream(augment(&s, &AugmentSpec::new(method, seed))?));
        Ok(())
    })
}

/// Event count image of the whole stream into `counts` (row-major,
/// `width * height` entries). `polarity` is +1, -1, or 0 for all events.
///
/// # Safety
/// `stream` must be a live handle; `counts` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_stack(stream: *const RmfStream, polarity: i32, counts: *mut u32, capacity: usize) -> RmfStatus {
    guard(|| {
        let s = deref(stream, "stream")?;
        let tag = match polarity {
            1 => PolarityTag::Positive,
            -1 => PolarityTag::Negative,
            0 => PolarityTag::All,
            other => return Err(fail(RmfStatus::InvalidArgument, format!("polarity must be -1, 0 or 1, got {other}"))),
        };
        let need = s.width * s.height;
        if capacity < need {
            return Err(fail(RmfStatus::BufferTooSmall, format!("need {need} counts, buffer holds {capacity}")));
        }
        let img = stack_count_image(&s.to_stream()?, tag);
        let dst = std::slice::from_raw_parts_mut(deref_mut(counts, "counts")?, need);
        dst.copy_from_slice(img.counts());
        Ok(())
    })
}

/// Release a stream. Null is ignored.
///
/// # Safety
/// `stream` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmf_stream_free(stream: *mut RmfStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Load a checkpoint; its geometry is read from the file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rmf_model_load(path: *const c_char, out: *mut *mut RmfModel) -> RmfStatus {
    guard(|| {
        let slot = out_ptr(out)?;
        let path = PathBuf::from(c_str(path, "path")?);
        let model = Model::<f32>::load(&path, &ModelConfig::default())?;
        into_handle(slot, RmfModel { model, state: None });
        Ok(())
    })
}

/// Upscaling factor of the model.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmf_model_scale(model: *const RmfModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().scale)
}

/// Run one recurrent step on an LR window (all events of `window`).
/// Writes the SR positive plane then the negative plane, each
/// `(r*width) * (r*height)` row-major counts, into `out`.
///
/// # Safety
/// `model` and `window` must be live handles; `out` must hold `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn rmf_model_infer_window(
    model: *mut RmfModel,
    window: *const RmfStream,
    out: *mut f32,
    capacity: usize,
) -> RmfStatus {
    guard(|| {
        let m = deref_mut(model, "model")?;
        let w = deref(window, "window")?;
        let r = m.model.config().scale;
        let need = 2 * w.width * w.height * r * r;
        if capacity < need {
            return Err(fail(RmfStatus::BufferTooSmall, format!("need {need} floats, buffer holds {capacity}")));
        }
        let lr = w.to_stream()?;
        let span = Window { t_start: lr.t_first().unwrap_or(0), t_end: lr.t_last().map_or(0, |t| t + 1), events: 0..lr.len() };
        let win = SequenceWindow::from_lr(&lr, r, &span);
        let sr = infer_window(&m.model, &win, &mut m.state)?;
        let dst = std::slice::from_raw_parts_mut(deref_mut(out, "out")?, need);
        dst.copy_from_slice(sr.data());
        Ok(())
    })
}

/// Forget the recurrent state; the next window starts a new sequence.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rmf_model_reset(model: *mut RmfModel) {
    if let Some(m) = model.as_mut() {
        m.state = None;
    }
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmf_model_free(model: *mut RmfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
