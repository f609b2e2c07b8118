//! C ABI over the stagefix scoring, parsing and retrieval functions.
//!
//! Every function returns a [`StagefixStatus`]; results come back through
//! out-pointers. On failure, [`stagefix_last_error`] describes the most
//! recent error on the calling thread. Strings returned by the library
//! are owned by the caller and must be released with
//! [`stagefix_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stagefix::corpus::{load_instances, BugInstance};
use stagefix::metrics;
use stagefix::orchestrator::read_results;
use stagefix::prompting;
use stagefix::retrieval::{Bm25Index, Bm25Params};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StagefixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Empty = 6,
    Panic = 7,
}

/// A BM25 index over a training split.
pub struct StagefixIndex {
    inner: Bm25Index,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(StagefixStatus, String);

impl Failure {
    fn new(status: StagefixStatus, msg: impl std::fmt::Display) -> Self {
        Failure(status, msg.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StagefixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            StagefixStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            StagefixStatus::Panic
        }
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(StagefixStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(StagefixStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a pointer valid for writes.
    unsafe { p.as_mut() }
        .ok_or_else(|| Failure::new(StagefixStatus::NullPointer, format!("{name} is null")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(StagefixStatus::InvalidArgument, "result contains a nul byte"))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn stagefix_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn stagefix_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `candidate` and `reference` must be NUL-terminated strings; `out` must
/// be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stagefix_exact_match(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut bool,
) -> StagefixStatus {
    guard(|| {
        let (c, r) = (arg_str(candidate, "candidate")?, arg_str(reference, "reference")?);
        *out_ptr(out, "out")? = metrics::exact_match(c, r);
        Ok(())
    })
}

/// Sentence BLEU-4 in `[0, 1]`.
///
/// # Safety
/// As [`stagefix_exact_match`].
#[no_mangle]
pub unsafe extern "C" fn stagefix_bleu4(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> StagefixStatus {
    guard(|| {
        let (c, r) = (arg_str(candidate, "candidate")?, arg_str(reference, "reference")?);
        *out_ptr(out, "out")? = metrics::bleu4(c, r);
        Ok(())
    })
}

/// Token-level edit distance.
///
/// # Safety
/// As [`stagefix_exact_match`].
#[no_mangle]
pub unsafe extern "C" fn stagefix_levenshtein(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut usize,
) -> StagefixStatus {
    guard(|| {
        let (c, r) = (arg_str(candidate, "candidate")?, arg_str(reference, "reference")?);
        *out_ptr(out, "out")? = metrics::levenshtein(c, r);
        Ok(())
    })
}

/// Pulls the one-line patch out of a model reply. Returns
/// `STAGEFIX_STATUS_EMPTY` when the reply holds no code.
///
/// # Safety
/// `reply` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stagefix_extract_patch(
    reply: *const c_char,
    out: *mut *mut c_char,
) -> StagefixStatus {
    guard(|| {
        let text = arg_str(reply, "reply")?;
        let slot = out_ptr(out, "out")?;
        let patch = prompting::extract_patch(text)
            .map_err(|e| Failure::new(StagefixStatus::Empty, e))?;
        *slot = to_c_string(patch)?;
        Ok(())
    })
}

/// Reads a reviewer reply. `feedback` may be null; otherwise it receives
/// the trimmed reply text.
///
/// # Safety
/// `reply` must be a NUL-terminated string; `passed` must be valid for
/// writes; `feedback` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stagefix_parse_verdict(
    reply: *const c_char,
    passed: *mut bool,
    feedback: *mut *mut c_char,
) -> StagefixStatus {
    guard(|| {
        let text = arg_str(reply, "reply")?;
        let verdict = prompting::parse_verdict(text);
        *out_ptr(passed, "passed")? = verdict.passed;
        if let Some(slot) = feedback.as_mut() {
            *slot = to_c_string(verdict.feedback)?;
        }
        Ok(())
    })
}

/// Scores a `results.jsonl` file against a reference split and returns the
/// report as JSON.
///
/// # Safety
/// `results_path` and `reference_path` must be NUL-terminated strings;
/// `out_json` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stagefix_evaluate(
    results_path: *const c_char,
    reference_path: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> StagefixStatus {
    guard(|| {
        let results = arg_str(results_path, "results_path")?;
        let reference = arg_str(reference_path, "reference_path")?;
        let slot = out_ptr(out_json, "out_json")?;
        if k == 0 {
            return Err(Failure::new(StagefixStatus::InvalidArgument, "k must be at least 1"));
        }
        let results = read_results(results).map_err(|e| Failure::new(StagefixStatus::Io, e))?;
        let refs = load_instances(reference).map_err(|e| Failure::new(StagefixStatus::Io, e))?;
        let report = metrics::evaluate(&results, &refs, k)
            .map_err(|e| Failure::new(StagefixStatus::Empty, e))?;
        let json = serde_json::to_string(&report)
            .map_err(|e| Failure::new(StagefixStatus::Parse, e))?;
        *slot = to_c_string(json)?;
        Ok(())
    })
}

/// Builds an index over a JSONL training split. When `cache_path` is
/// non-null the index is loaded from, or saved to, that cache file.
///
/// # Safety
/// `train_path` must be a NUL-terminated string, `cache_path` null or a
/// NUL-terminated string, and `out` valid for writes. Release the handle
/// with [`stagefix_index_free`].
#[no_mangle]
pub unsafe extern "C" fn stagefix_index_open(
    train_path: *const c_char,
    cache_path: *const c_char,
    out: *mut *mut StagefixIndex,
) -> StagefixStatus {
    guard(|| {
        let train = arg_str(train_path, "train_path")?;
        let cache = if cache_path.is_null() {
            None
        } else {
            Some(arg_str(cache_path, "cache_path")?)
        };
        let slot = out_ptr(out, "out")?;
        if !Path::new(train).is_file() {
            return Err(Failure::new(StagefixStatus::Io, format!("no such file: {train}")));
        }
        let docs = load_instances(train).map_err(|e| Failure::new(StagefixStatus::Parse, e))?;
        let params = Bm25Params::default();
        let index = match cache {
            Some(c) => Bm25Index::load_or_build(c, &docs, params),
            None => Bm25Index::build(&docs, params),
        }
        .map_err(|e| Failure::new(StagefixStatus::InvalidArgument, e))?;
        *slot = Box::into_raw(Box::new(StagefixIndex { inner: index }));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle from [`stagefix_index_open`]; `out` must
/// be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stagefix_index_doc_count(
    index: *const StagefixIndex,
    out: *mut usize,
) -> StagefixStatus {
    guard(|| {
        let index = index
            .as_ref()
            .ok_or_else(|| Failure::new(StagefixStatus::NullPointer, "index is null"))?;
        *out_ptr(out, "out")? = index.inner.doc_count();
        Ok(())
    })
}

/// Retrieves the `k` best demonstrations for a bug instance given as JSON.
/// The result is a JSON array ordered by descending score.
///
/// # Safety
/// `index` must be a live handle; `query_json` a NUL-terminated string;
/// `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn stagefix_index_top_k(
    index: *const StagefixIndex,
    query_json: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> StagefixStatus {
    guard(|| {
        let index = index
            .as_ref()
            .ok_or_else(|| Failure::new(StagefixStatus::NullPointer, "index is null"))?;
        let query: BugInstance = serde_json::from_str(arg_str(query_json, "query_json")?)
            .map_err(|e| Failure::new(StagefixStatus::Parse, e))?;
        let slot = out_ptr(out_json, "out_json")?;
        let demos = index.inner.top_k(&query, k);
        let json = serde_json::to_string(&demos)
            .map_err(|e| Failure::new(StagefixStatus::Parse, e))?;
        *slot = to_c_string(json)?;
        Ok(())
    })
}

/// Releases an index handle. Null is ignored.
///
/// # Safety
/// `index` must come from [`stagefix_index_open`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn stagefix_index_free(index: *mut StagefixIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}
