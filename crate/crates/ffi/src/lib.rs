//! C ABI over the decoding library.
//!
//! Objects cross the boundary as opaque handles, each released with the
//! matching `dlm_*_free`. Every call
//! returns a [`DlmStatus`]; on failure a message is kept per thread and can
//! be copied out with [`dlm_last_error`]. Panics are caught and reported as
//! [`DlmStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dlm_remask::checkpoint::{load_denoiser, load_head};
use dlm_remask::decode::{run_semi_ar, DecodeConfig, Decoded};
use dlm_remask::denoiser::{Denoiser, OracleDenoiser, TinyDenoiser};
use dlm_remask::diffusion::MaskedSeq;
use dlm_remask::head::{BayesHead, CorrectionHead, LearnedHead};
use dlm_remask::rng::Seed;
use dlm_remask::tasks::{TaskConfig, TaskSpec};
use dlm_remask::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DlmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    Checkpoint = 5,
    VocabMismatch = 6,
    MissingPrerequisite = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// A validated task.
pub struct DlmTask {
    spec: TaskSpec,
}

enum DenoiserKind {
    Oracle(OracleDenoiser),
    Tiny(TinyDenoiser),
}

/// A denoiser: the exact oracle or a loaded checkpoint.
pub struct DlmDenoiser {
    inner: DenoiserKind,
}

enum HeadKind {
    Bayes(BayesHead),
    Learned(LearnedHead),
}

/// A correction head.
pub struct DlmHead {
    inner: HeadKind,
}

impl DlmHead {
    fn as_dyn(&self) -> &dyn CorrectionHead {
        match &self.inner {
            HeadKind::Bayes(h) => h,
            HeadKind::Learned(h) => h,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DlmStatus {
    match e {
        Error::InvalidConfig(_) | Error::InvalidPrompt { .. } => DlmStatus::InvalidConfig,
        Error::Io(_) => DlmStatus::Io,
        Error::Checkpoint { .. } | Error::Json(_) => DlmStatus::Checkpoint,
        Error::VocabMismatch(_) => DlmStatus::VocabMismatch,
        Error::MissingPrerequisite(_) => DlmStatus::MissingPrerequisite,
        _ => DlmStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DlmStatus, String)>) -> DlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DlmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", msg.unwrap_or_default()));
            DlmStatus::Internal
        }
    }
}

fn lib(e: Error) -> (DlmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DlmStatus, String) {
    (DlmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DlmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (DlmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (DlmStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DlmStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (DlmStatus, String)> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copy the calling thread's last error message (NUL-terminated, truncated
/// to fit) into `buf`. Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dlm_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Build a task from the JSON `task` config section.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlm_task_from_json(json: *const c_char, out: *mut *mut DlmTask) -> DlmStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let cfg: TaskConfig = serde_json::from_str(text).map_err(|e| (DlmStatus::InvalidConfig, e.to_string()))?;
        let spec = TaskSpec::from_config(&cfg).map_err(lib)?;
        put(out, DlmTask { spec })
    })
}

/// # Safety
/// `task` must be null or a handle from [`dlm_task_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dlm_task_free(task: *mut DlmTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Sequence length, prompt length and vocabulary size of a task.
///
/// # Safety
/// `task` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn dlm_task_dims(task: *const DlmTask, max_len: *mut usize, prompt_len: *mut usize, vocab_size: *mut u32) -> DlmStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        if let Some(p) = max_len.as_mut() {
            *p = t.spec.max_len;
        }
        if let Some(p) = prompt_len.as_mut() {
            *p = t.spec.prompt_len;
        }
        if let Some(p) = vocab_size.as_mut() {
            *p = t.spec.vocab.size;
        }
        Ok(())
    })
}

/// Check a full sequence (prompt followed by the generation region).
/// `ok` receives 1 when it passes the task verifier, else 0.
///
/// # Safety
/// `seq` must point to `len` values; `ok` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlm_verify(task: *const DlmTask, seq: *const u32, len: usize, ok: *mut i32) -> DlmStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        let s = slice_arg(seq, len, "seq")?;
        if ok.is_null() {
            return Err(null("ok"));
        }
        *ok = i32::from(t.spec.verify_full(&MaskedSeq::from_tokens(s)));
        Ok(())
    })
}

/// Exact enumeration denoiser for `task`.
///
/// # Safety
/// `task` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlm_denoiser_oracle(task: *const DlmTask, out: *mut *mut DlmDenoiser) -> DlmStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        put(out, DlmDenoiser { inner: DenoiserKind::Oracle(OracleDenoiser::new(t.spec.clone())) })
    })
}

/// Load a denoiser checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlm_denoiser_load(path: *const c_char, out: *mut *mut DlmDenoiser) -> DlmStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let m = load_denoiser(Path::new(p)).map_err(lib)?;
        put(out, DlmDenoiser { inner: DenoiserKind::Tiny(m) })
    })
}

/// # Safety
/// `den` must be null or a live denoiser handle.
#[no_mangle]
pub unsafe extern "C" fn dlm_denoiser_free(den: *mut DlmDenoiser) {
    if !den.is_null() {
        drop(Box::from_raw(den));
    }
}

fn with_denoiser<R>(den: &DlmDenoiser, f: impl FnOnce(&dyn DenoiserDyn) -> R) -> R {
    match &den.inner {
        DenoiserKind::Oracle(d) => f(d),
        DenoiserKind::Tiny(d) => f(d),
    }
}

/// Object-safe slice of [`Denoiser`] plus decoding, so one code path
/// serves both denoiser kinds.
trait DenoiserDyn {
    fn vocab_size(&self) -> usize;
    fn probs(&self, x: &MaskedSeq) -> Vec<f64>;
    fn decode(&self, spec: &TaskSpec, prompt: &[u32], head: Option<&dyn CorrectionHead>, cfg: &DecodeConfig, seed: Seed) -> dlm_remask::Result<Decoded>;
}

impl<D: Denoiser> DenoiserDyn for D {
    fn vocab_size(&self) -> usize {
        self.vocab().len()
    }
    fn probs(&self, x: &MaskedSeq) -> Vec<f64> {
        self.predict(x).posterior.data
    }
    fn decode(&self, spec: &TaskSpec, prompt: &[u32], head: Option<&dyn CorrectionHead>, cfg: &DecodeConfig, seed: Seed) -> dlm_remask::Result<Decoded> {
        run_semi_ar(spec, prompt, self, head, cfg, seed)
    }
}

/// Posterior of every position. `tokens` uses -1 for MASK; `probs` receives
/// `len * vocab_size` values, row-major.
///
/// # Safety
/// `tokens` must point to `len` values and `probs` to `probs_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn dlm_denoiser_predict(
    den: *const DlmDenoiser,
    tokens: *const i64,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> DlmStatus {
    guard(|| {
        let d = ref_arg(den, "denoiser")?;
        let toks = slice_arg(tokens, len, "tokens")?;
        let want = match &d.inner {
            DenoiserKind::Oracle(o) => o.spec().max_len,
            DenoiserKind::Tiny(m) => m.arch().max_len,
        };
        if len != want {
            return Err((DlmStatus::InvalidArgument, format!("sequence length {len}, denoiser expects {want}")));
        }
        with_denoiser(d, |d| {
            let need = len * d.vocab_size();
            if probs.is_null() {
                return Err(null("probs"));
            }
            if probs_len < need {
                return Err((DlmStatus::BufferTooSmall, format!("probs needs {need} values, got {probs_len}")));
            }
            if toks.iter().any(|&t| t < -1 || t >= d.vocab_size() as i64) {
                return Err((DlmStatus::InvalidArgument, "token id out of range".into()));
            }
            let p = d.probs(&MaskedSeq::from_wire(toks));
            std::slice::from_raw_parts_mut(probs, need).copy_from_slice(&p);
            Ok(())
        })
    })
}

/// Enumeration-backed correction head for `task`.
///
/// # Safety
/// `task` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlm_head_bayes(task: *const DlmTask, out: *mut *mut DlmHead) -> DlmStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        put(out, DlmHead { inner: HeadKind::Bayes(BayesHead::new(t.spec.clone())) })
    })
}

/// Load a head checkpoint trained on `den`'s features.
///
/// # Safety
/// `path` must be a NUL-terminated string; `den` a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dlm_head_load(path: *const c_char, den: *const DlmDenoiser, out: *mut *mut DlmHead) -> DlmStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let d = ref_arg(den, "denoiser")?;
        let (vocab, dim) = match &d.inner {
            DenoiserKind::Oracle(o) => (o.vocab(), o.feature_dim()),
            DenoiserKind::Tiny(m) => (m.vocab(), m.feature_dim()),
        };
        let head = load_head(Path::new(p), vocab, dim).map_err(lib)?;
        put(out, DlmHead { inner: HeadKind::Learned(head) })
    })
}

/// # Safety
/// `head` must be null or a live head handle.
#[no_mangle]
pub unsafe extern "C" fn dlm_head_free(head: *mut DlmHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Decode one prompt. `config_json` is a `decode` config section (null for
/// defaults); `head` may be null unless the strategy is `dsc`. `out_tokens`
/// receives the full sequence (`max_len` values) and `out_passes` the
/// number of denoiser forward passes.
///
/// # Safety
/// Handles must be live; `prompt` must point to `prompt_len` values;
/// `out_tokens` to `out_len` writable values; `out_passes` may be null.
#[no_mangle]
pub unsafe extern "C" fn dlm_decode(
    task: *const DlmTask,
    den: *const DlmDenoiser,
    head: *const DlmHead,
    config_json: *const c_char,
    prompt: *const u32,
    prompt_len: usize,
    seed: u64,
    out_tokens: *mut u32,
    out_len: usize,
    out_passes: *mut usize,
) -> DlmStatus {
    guard(|| {
        let t = ref_arg(task, "task")?;
        let d = ref_arg(den, "denoiser")?;
        let h = head.as_ref().map(DlmHead::as_dyn);
        let cfg: DecodeConfig = if config_json.is_null() {
            DecodeConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(|e| (DlmStatus::InvalidConfig, e.to_string()))?
        };
        let p = slice_arg(prompt, prompt_len, "prompt")?;
        if out_tokens.is_null() {
            return Err(null("out_tokens"));
        }
        if out_len < t.spec.max_len {
            return Err((DlmStatus::BufferTooSmall, format!("out_tokens needs {} values, got {out_len}", t.spec.max_len)));
        }
        let decoded = with_denoiser(d, |d| {
            if d.vocab_size() != t.spec.vocab.len() {
                return Err((DlmStatus::VocabMismatch, "denoiser vocabulary does not match the task".to_string()));
            }
            d.decode(&t.spec, p, h, &cfg, Seed(seed)).map_err(lib)
        })?;
        let out = std::slice::from_raw_parts_mut(out_tokens, t.spec.max_len);
        for (o, tok) in out.iter_mut().zip(&decoded.output.0) {
            *o = tok.unwrap_or(u32::MAX);
        }
        if let Some(p) = out_passes.as_mut() {
            *p = decoded.trace.forward_passes;
        }
        Ok(())
    })
}
