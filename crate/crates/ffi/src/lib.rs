//! C ABI over the streaming runtime and the WER metric.
//!
//! Handles are opaque. Every fallible call returns a [`JepStatus`]; on failure
//! the message is kept per thread and read with [`jep_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use jointep::corpus::FeatureFrame;
use jointep::evalkit;
use jointep::runtime::{self, FsmState, Mode, SessionState, StreamingModel, StreamingSystem, SystemState, Thresholds};
use jointep::trainer::{load_model, Arm};
use jointep::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JepStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    SessionEnded = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JepArm {
    B1 = 0,
    E1 = 1,
    E2 = 2,
    E3 = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JepMode {
    ShortQuery = 0,
    Continuous = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JepFsmState {
    EpOnly = 0,
    AsrPlusEp = 1,
    End = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JepThresholds {
    pub vad: f64,
    pub eoq: f64,
    pub eos: f64,
    pub wait_ms: u64,
}

/// Per-frame outcome of [`jep_session_push_frame`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JepFrameResult {
    /// State when the frame arrived.
    pub arrival: JepFsmState,
    /// State after the frame.
    pub state: JepFsmState,
    /// Speech, initial, intermediate, final silence.
    pub posterior: [f64; 4],
    /// Decoder end-of-query cost, NaN while only the endpointer runs.
    pub eos_cost: f64,
    pub filtered: bool,
    pub endpoint: bool,
    pub hyp_len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JepWer {
    /// Percent.
    pub wer: f64,
    pub deletions: usize,
    pub insertions: usize,
    pub substitutions: usize,
    pub ref_words: usize,
}

/// A loaded model.
pub struct JepModel {
    system: Arc<StreamingSystem>,
}

/// A streaming session over one model.
pub struct JepSession {
    system: Arc<StreamingSystem>,
    state: SessionState<SystemState>,
    frame_period_ms: u64,
    next_index: usize,
    finished: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> JepStatus {
    match e {
        Error::Shape { .. } => JepStatus::Shape,
        Error::NonFinite(_) => JepStatus::NonFinite,
        Error::SessionEnded => JepStatus::SessionEnded,
        Error::Io { .. } => JepStatus::Io,
        Error::Parse { .. } | Error::Version { .. } | Error::Integrity(_) | Error::Json(_) => JepStatus::Format,
        _ => JepStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (JepStatus, String)>) -> JepStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            JepStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            JepStatus::Internal
        }
    }
}

fn lift(e: Error) -> (JepStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (JepStatus, String) {
    (JepStatus::NullPointer, format!("{what} is null"))
}

fn fsm(s: FsmState) -> JepFsmState {
    match s {
        FsmState::EpOnly => JepFsmState::EpOnly,
        FsmState::AsrPlusEp => JepFsmState::AsrPlusEp,
        FsmState::End => JepFsmState::End,
    }
}

/// Last error message on this thread, or null. Valid until the next call on
/// this thread.
#[no_mangle]
pub extern "C" fn jep_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a model from `n_paths` checkpoint files (two for a B1 run).
///
/// # Safety
/// `paths` must point to `n_paths` NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn jep_model_load(
    paths: *const *const c_char,
    n_paths: usize,
    arm: JepArm,
    out: *mut *mut JepModel,
) -> JepStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if paths.is_null() || n_paths == 0 {
            return Err((JepStatus::InvalidArgument, "no checkpoint paths".into()));
        }
        let mut files = Vec::with_capacity(n_paths);
        for i in 0..n_paths {
            let p = *paths.add(i);
            if p.is_null() {
                return Err(null("checkpoint path"));
            }
            let s = CStr::from_ptr(p)
                .to_str()
                .map_err(|_| (JepStatus::InvalidArgument, "checkpoint path is not UTF-8".to_string()))?;
            files.push(PathBuf::from(s));
        }
        let (model, store) = load_model(&files, None).map_err(lift)?;
        let arm = match arm {
            JepArm::B1 => Arm::B1,
            JepArm::E1 => Arm::E1,
            JepArm::E2 => Arm::E2,
            JepArm::E3 => Arm::E3,
        };
        let system = Arc::new(StreamingSystem::new(model, store, arm.routing()));
        *out = Box::into_raw(Box::new(JepModel { system }));
        Ok(())
    })
}

/// Feature dimension expected by [`jep_session_push_frame`]; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn jep_model_input_dim(model: *const JepModel) -> usize {
    model.as_ref().map_or(0, |m| m.system.model.cfg.d_in)
}

/// # Safety
/// `model` must be null or a handle from [`jep_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn jep_model_free(model: *mut JepModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Opens a session. The session keeps the model alive on its own.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jep_session_new(
    model: *const JepModel,
    mode: JepMode,
    thresholds: JepThresholds,
    frame_period_ms: u64,
    out: *mut *mut JepSession,
) -> JepStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if frame_period_ms == 0 {
            return Err((JepStatus::InvalidArgument, "frame period must be positive".into()));
        }
        let mode = match mode {
            JepMode::ShortQuery => Mode::ShortQuery,
            JepMode::Continuous => Mode::Continuous,
        };
        let th = Thresholds {
            vad: thresholds.vad,
            eoq: thresholds.eoq,
            eos: thresholds.eos,
            wait_ms: thresholds.wait_ms,
        };
        let state = runtime::start_session(m.system.as_ref(), mode, th).map_err(lift)?;
        *out = Box::into_raw(Box::new(JepSession {
            system: Arc::clone(&m.system),
            state,
            frame_period_ms,
            next_index: 0,
            finished: false,
        }));
        Ok(())
    })
}

/// Streams one frame of `len` features.
///
/// # Safety
/// `session` must be live; `features` must hold `len` values; `out` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn jep_session_push_frame(
    session: *mut JepSession,
    features: *const f64,
    len: usize,
    out: *mut JepFrameResult,
) -> JepStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if s.finished {
            return Err((JepStatus::SessionEnded, "stream already finished".into()));
        }
        let frame = FeatureFrame {
            t_index: s.next_index,
            t_ms: s.next_index as u64 * s.frame_period_ms,
            features: std::slice::from_raw_parts(features, len).to_vec(),
            domain_id: None,
        };
        let row = runtime::step(s.system.as_ref(), &mut s.state, &frame).map_err(lift)?;
        s.next_index += 1;
        if let Some(o) = out.as_mut() {
            *o = JepFrameResult {
                arrival: fsm(row.fsm_state),
                state: fsm(s.state.fsm),
                posterior: row.posterior,
                eos_cost: row.eos_cost.unwrap_or(f64::NAN),
                filtered: row.filtered,
                endpoint: row.endpoint,
                hyp_len: row.hyp_len,
            };
        }
        Ok(())
    })
}

/// Marks the end of the stream and drains buffered recogniser input. A
/// session that reached its endpoint is left as is.
///
/// # Safety
/// `session` must be live.
#[no_mangle]
pub unsafe extern "C" fn jep_session_finish(session: *mut JepSession) -> JepStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if !s.finished && s.state.fsm != FsmState::End {
            s.system.finish(&mut s.state.model).map_err(lift)?;
        }
        s.finished = true;
        Ok(())
    })
}

/// Copies the current hypothesis into `tokens`. `len` always receives the
/// full length; `BufferTooSmall` is returned when `cap` is short.
///
/// # Safety
/// `session` must be live; `tokens` must hold `cap` values (may be null when
/// `cap` is 0); `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jep_session_hypothesis(
    session: *const JepSession,
    tokens: *mut u32,
    cap: usize,
    len: *mut usize,
) -> JepStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        let hyp = s.system.hypothesis(&s.state.model);
        *len = hyp.len();
        if hyp.len() > cap {
            return Err((JepStatus::BufferTooSmall, format!("hypothesis has {} tokens", hyp.len())));
        }
        if !hyp.is_empty() && tokens.is_null() {
            return Err(null("tokens"));
        }
        for (i, &t) in hyp.iter().enumerate() {
            *tokens.add(i) = t as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a handle from [`jep_session_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn jep_session_free(session: *mut JepSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Word error rate of `hyp` against a non-empty `reference`.
///
/// # Safety
/// `reference` and `hyp` must hold `n_ref` and `n_hyp` values (either may be
/// null when its length is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn jep_wer(
    reference: *const u32,
    n_ref: usize,
    hyp: *const u32,
    n_hyp: usize,
    out: *mut JepWer,
) -> JepStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let view = |p: *const u32, n: usize, what: &str| {
            if n == 0 {
                Ok(&[][..])
            } else if p.is_null() {
                Err(null(what))
            } else {
                Ok(std::slice::from_raw_parts(p, n))
            }
        };
        let r = view(reference, n_ref, "reference")?;
        let h = view(hyp, n_hyp, "hyp")?;
        let w = evalkit::wer(r, h).map_err(lift)?;
        *out = JepWer {
            wer: w.wer,
            deletions: w.deletions,
            insertions: w.insertions,
            substitutions: w.substitutions,
            ref_words: w.ref_words,
        };
        Ok(())
    })
}
