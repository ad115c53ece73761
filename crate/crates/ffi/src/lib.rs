//! C ABI for serving trained retrieve-and-edit pipelines.
//!
//! The CLI trains and evaluates; this crate lets other languages load the
//! resulting artifacts and query them. A session is an opaque handle
//! created by [`retedit_open`] from a config file whose `data_dir` holds
//! the trained checkpoints. Fallible calls return a [`RetEditStatus`];
//! on failure, [`retedit_last_error`] gives the detail message for the
//! current thread. Strings handed out through out-parameters belong to
//! the caller and must be released with [`retedit_string_free`].
//!
//! The C header is generated into `include/retedit.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fmt::Display;
use std::path::Path;
use std::ptr;

use retedit::config::Config;
use retedit::pipeline::{PipelineError, Session};

/// Opaque handle to a loaded config, retriever, index, and editor.
pub struct RetEditSession {
    inner: Session,
}

/// Outcome of a fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RetEditStatus {
    /// The call succeeded.
    Ok = 0,
    /// Unspecified failure; see `retedit_last_error`.
    Error = 1,
    /// A pointer, string, or parameter was unusable.
    BadInput = 2,
    /// A required artifact is missing; run the named pipeline stage.
    MissingArtifact = 3,
    /// A numeric computation diverged.
    NumericError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail<E: Display>(status: RetEditStatus, err: E) -> RetEditStatus {
    let msg = CString::new(err.to_string())
        .unwrap_or_else(|_| CString::new("error message had interior NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
    status
}

fn fail_pipeline(err: PipelineError) -> RetEditStatus {
    let status = match err.exit_code() {
        2 => RetEditStatus::BadInput,
        3 => RetEditStatus::MissingArtifact,
        4 => RetEditStatus::NumericError,
        _ => RetEditStatus::Error,
    };
    fail(status, err)
}

/// Message for the most recent failing call on the current thread, or
/// NULL if none has failed yet.
///
/// The pointer stays valid until the next failing call on this thread;
/// do not free it.
#[no_mangle]
pub extern "C" fn retedit_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |msg| msg.as_ptr())
    })
}

/// Crate version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn retedit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads trained artifacts described by the config file at `config_path`
/// and stores the new session in `*out`.
///
/// The referenced `data_dir` must already contain the checkpoints written
/// by the ingest, train-retriever, build-index, and train-editor stages.
/// On failure `*out` is NULL and the status tells which stage is missing
/// or what was invalid.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` a valid
/// pointer; the returned session must be released with `retedit_close`.
#[no_mangle]
pub unsafe extern "C" fn retedit_open(
    config_path: *const c_char,
    out: *mut *mut RetEditSession,
) -> RetEditStatus {
    if out.is_null() {
        return fail(RetEditStatus::BadInput, "out pointer is NULL");
    }
    *out = ptr::null_mut();
    if config_path.is_null() {
        return fail(RetEditStatus::BadInput, "config_path is NULL");
    }
    let path = match CStr::from_ptr(config_path).to_str() {
        Ok(s) => Path::new(s),
        Err(_) => return fail(RetEditStatus::BadInput, "config_path is not valid UTF-8"),
    };
    let cfg = match Config::load(path).and_then(|c| c.validate().map(|()| c)) {
        Ok(cfg) => cfg,
        Err(e) => return fail(RetEditStatus::BadInput, e),
    };
    match Session::open(cfg) {
        Ok(session) => {
            *out = Box::into_raw(Box::new(RetEditSession { inner: session }));
            RetEditStatus::Ok
        }
        Err(e) => fail_pipeline(e),
    }
}

/// Releases a session. NULL is a no-op.
///
/// # Safety
/// `session` must have come from `retedit_open` and not been closed yet.
#[no_mangle]
pub unsafe extern "C" fn retedit_close(session: *mut RetEditSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Number of training examples behind the session's index, or 0 for a
/// NULL session.
///
/// # Safety
/// `session` must be a live session from `retedit_open` or NULL.
#[no_mangle]
pub unsafe extern "C" fn retedit_train_size(session: *const RetEditSession) -> usize {
    session.as_ref().map_or(0, |s| s.inner.train_size())
}

/// Number of vocabulary entries the models were trained with, or 0 for a
/// NULL session.
///
/// # Safety
/// `session` must be a live session from `retedit_open` or NULL.
#[no_mangle]
pub unsafe extern "C" fn retedit_vocab_size(session: *const RetEditSession) -> usize {
    session.as_ref().map_or(0, |s| s.inner.vocab_size())
}

/// Retrieves the nearest training example for the whitespace-tokenized
/// `query` and decodes up to `topk` completion candidates, storing a
/// JSON document in `*out`:
///
/// ```json
/// {
///   "retrieved_id": "t003_i01",
///   "distance": 0.12,
///   "candidates": [{"tokens": ["def", "..."], "logprob": -1.5}]
/// }
/// ```
///
/// # Safety
/// `session` must be a live session from `retedit_open`, `query` a
/// NUL-terminated string, and `out` a valid pointer; release `*out` with
/// `retedit_string_free`.
#[no_mangle]
pub unsafe extern "C" fn retedit_complete_json(
    session: *const RetEditSession,
    query: *const c_char,
    topk: usize,
    out: *mut *mut c_char,
) -> RetEditStatus {
    if out.is_null() {
        return fail(RetEditStatus::BadInput, "out pointer is NULL");
    }
    *out = ptr::null_mut();
    let Some(session) = session.as_ref() else {
        return fail(RetEditStatus::BadInput, "session is NULL");
    };
    if query.is_null() {
        return fail(RetEditStatus::BadInput, "query is NULL");
    }
    let Ok(text) = CStr::from_ptr(query).to_str() else {
        return fail(RetEditStatus::BadInput, "query is not valid UTF-8");
    };
    let done = match session.inner.complete(text, topk) {
        Ok(done) => done,
        Err(e) => return fail_pipeline(e),
    };
    let candidates: Vec<serde_json::Value> = done
        .candidates
        .iter()
        .map(|(tokens, logp)| serde_json::json!({ "tokens": tokens, "logprob": logp }))
        .collect();
    let doc = serde_json::json!({
        "retrieved_id": done.retrieved_id,
        "distance": done.distance,
        "candidates": candidates,
    });
    match CString::new(doc.to_string()) {
        Ok(s) => {
            *out = s.into_raw();
            RetEditStatus::Ok
        }
        Err(e) => fail(RetEditStatus::Error, e),
    }
}

/// Releases a string produced by this library. NULL is a no-op.
///
/// # Safety
/// `s` must have come from an out-parameter of this library and not have
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn retedit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
