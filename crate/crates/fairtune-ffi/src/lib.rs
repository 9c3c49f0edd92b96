//! C ABI over the toolkit: corpus augmentation, overlay parameter counts,
//! bias metrics, and checkpoint scoring behind opaque handles.
//!
//! Conventions, mirrored by every function here:
//! - Fallible calls return [`FtStatus`]; anything but `Ok` leaves a message
//!   readable through [`ft_last_error`] on the same thread.
//! - Constructors return null on failure (message via [`ft_last_error`]).
//! - Strings crossing the boundary are NUL-terminated UTF-8. Strings the
//!   library hands out are either static (`ft_version`), valid until the next
//!   failing call on the thread (`ft_last_error`), or owned by the caller and
//!   released with [`ft_string_free`] (`ft_session_fingerprint`).
//! - Panics never unwind across the boundary; they surface as
//!   `FtStatus::Panic`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fairtune::biaseval::{
    icat, permutation_test, perplexity, read_pairs, stereotype_score_pairs, ModelScorer,
    PermutationMode, SentenceScorer,
};
use fairtune::cda::{augment_corpus, AugmentOptions};
use fairtune::corpus::{read_lines, Tokenizer};
use fairtune::lexicon::BiasAttributeList;
use fairtune::model::{CoreModel, ModelConfig, Objective};
use fairtune::peft::{count_tunable, MethodSpec, TuningOverlay};
use fairtune::{Error, Result};

/// Outcome of a fallible call. Matches the CLI's exit-code convention.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    /// A caller-supplied argument violated the contract (null pointer,
    /// non-UTF-8 string, unknown method name, out-of-range value).
    InvalidInput = 1,
    /// Missing or malformed files and mismatched artifacts.
    Data = 2,
    /// Non-finite values or a diverged computation.
    Numerical = 3,
    /// An internal invariant broke; the library state is still sound but the
    /// call produced nothing.
    Panic = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', "?")).expect("NUL stripped");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FtStatus {
    match e {
        Error::InvalidInput(_) => FtStatus::InvalidInput,
        Error::Data(_) | Error::Io { .. } => FtStatus::Data,
        Error::Numerical(_) => FtStatus::Numerical,
    }
}

/// Runs a fallible body, translating errors and panics into a status plus a
/// thread-local message.
fn guarded(body: impl FnOnce() -> Result<()>) -> FtStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FtStatus::Ok,
        Ok(Err(e)) => {
            let status = status_of(&e);
            set_error(e.to_string());
            status
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("ffi: internal panic: {what}"));
            FtStatus::Panic
        }
    }
}

/// Like [`guarded`] but for constructors: null on any failure.
fn guarded_ptr<T>(body: impl FnOnce() -> Result<*mut T>) -> *mut T {
    let mut out = std::ptr::null_mut();
    let status = guarded(|| {
        out = body()?;
        Ok(())
    });
    if status == FtStatus::Ok {
        out
    } else {
        std::ptr::null_mut()
    }
}

unsafe fn arg_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str> {
    if ptr.is_null() {
        return Err(Error::invalid(format!("ffi: {what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::invalid(format!("ffi: {what} is not valid UTF-8")))
}

unsafe fn arg_ref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T> {
    ptr.as_ref()
        .ok_or_else(|| Error::invalid(format!("ffi: {what} is null")))
}

unsafe fn arg_out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T> {
    ptr.as_mut()
        .ok_or_else(|| Error::invalid(format!("ffi: {what} is null")))
}

/// Library version as a static NUL-terminated string. Never null; do not
/// free.
#[no_mangle]
pub extern "C" fn ft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failing call on this thread, empty if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have come from a fairtune function documented to transfer
/// ownership, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ft_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Aligned word tuples marking membership in demographic groups.
pub struct FtLexicon(BiasAttributeList);

/// Opens a bundled lexicon: "gender", "religion", or "race". Null on unknown
/// names.
///
/// # Safety
/// `name` must be a NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn ft_lexicon_builtin(name: *const c_char) -> *mut FtLexicon {
    guarded_ptr(|| {
        let name = arg_str(name, "lexicon name")?;
        Ok(Box::into_raw(Box::new(FtLexicon(BiasAttributeList::builtin(name)?))))
    })
}

/// Loads a lexicon from a tab-separated tuple file with `expected_groups`
/// columns. Null on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn ft_lexicon_open(
    path: *const c_char,
    expected_groups: usize,
) -> *mut FtLexicon {
    guarded_ptr(|| {
        let path = arg_str(path, "lexicon path")?;
        let list = BiasAttributeList::load(Path::new(path), expected_groups)?;
        Ok(Box::into_raw(Box::new(FtLexicon(list))))
    })
}

/// Number of demographic groups (columns). Zero if `lexicon` is null.
///
/// # Safety
/// `lexicon` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn ft_lexicon_num_groups(lexicon: *const FtLexicon) -> usize {
    lexicon.as_ref().map_or(0, |l| l.0.num_groups())
}

/// Number of word tuples (rows). Zero if `lexicon` is null.
///
/// # Safety
/// `lexicon` must be a live handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn ft_lexicon_tuples(lexicon: *const FtLexicon) -> usize {
    lexicon.as_ref().map_or(0, |l| l.0.tuples().len())
}

/// Releases a lexicon handle. Null is a no-op.
///
/// # Safety
/// `lexicon` must have come from `ft_lexicon_builtin`/`ft_lexicon_open` and
/// must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ft_lexicon_free(lexicon: *mut FtLexicon) {
    if !lexicon.is_null() {
        drop(Box::from_raw(lexicon));
    }
}

/// Counterfactually augments a one-sentence-per-line corpus and writes the
/// result as JSON lines. Every kept sentence contributes its original
/// followed by `samples` rewrites. `out_examples` (optional) receives the
/// number of examples written.
///
/// # Safety
/// `lexicon` must be a live handle; `input` and `output` NUL-terminated
/// strings; `out_examples` a writable pointer or null.
#[no_mangle]
pub unsafe extern "C" fn ft_augment_file(
    lexicon: *const FtLexicon,
    input: *const c_char,
    output: *const c_char,
    samples: usize,
    keep_neutral: bool,
    exclude_fixed_identity: bool,
    seed: u64,
    out_examples: *mut usize,
) -> FtStatus {
    guarded(|| {
        let lexicon = arg_ref(lexicon, "lexicon")?;
        let input = arg_str(input, "input path")?;
        let output = arg_str(output, "output path")?;
        let lines = read_lines(Path::new(input))?;
        let opts = AugmentOptions {
            samples_per_sentence: samples,
            seed,
            keep_neutral,
            exclude_fixed_identity,
        };
        let augmented = augment_corpus(&lines, &lexicon.0, &opts)?;
        augmented.write_jsonl(Path::new(output))?;
        if let Some(out) = out_examples.as_mut() {
            *out = augmented.examples.len();
        }
        Ok(())
    })
}

/// Tunable-parameter count for an overlay method on a transformer of the
/// given shape. `method` is "full", "prefix", "prompt", or "adapter";
/// `l` is the prefix/prompt length and `r` the adapter reduction factor
/// (each ignored by the other methods).
///
/// # Safety
/// `method` must be a NUL-terminated string; `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn ft_count_tunable(
    method: *const c_char,
    l: usize,
    r: usize,
    d: usize,
    layers: usize,
    heads: usize,
    t_max: usize,
    vocab: usize,
    out_count: *mut usize,
) -> FtStatus {
    guarded(|| {
        let out = arg_out(out_count, "out_count")?;
        let spec = match arg_str(method, "method")? {
            "full" => MethodSpec::Full,
            "prefix" => MethodSpec::Prefix { l },
            "prompt" => MethodSpec::Prompt { l },
            "adapter" => MethodSpec::Adapter { r },
            other => {
                return Err(Error::invalid(format!(
                    "ffi: unknown method {other:?}, expected full|prefix|prompt|adapter"
                )))
            }
        };
        let config = ModelConfig {
            n_layer: layers,
            d,
            n_head: heads,
            t_max,
            vocab_size: vocab,
            objective: Objective::Causal,
        };
        *out = count_tunable(spec, &config);
        Ok(())
    })
}

/// Combined bias/quality score from a stereotype score and a language-model
/// score, both in [0, 100].
///
/// # Safety
/// `out_icat` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_icat(ss: f64, lms: f64, out_icat: *mut f64) -> FtStatus {
    guarded(|| {
        let out = arg_out(out_icat, "out_icat")?;
        *out = icat(ss, lms)?;
        Ok(())
    })
}

/// Paired sign-flip significance test between two runs' per-example
/// indicators (same length, same example order). Exact enumeration up to 16
/// pairs, seeded resampling above that. `resamples` is ignored in the exact
/// regime.
///
/// # Safety
/// `baseline` and `current` must point to `len` readable doubles; `out_p`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ft_permutation_test(
    baseline: *const f64,
    current: *const f64,
    len: usize,
    resamples: usize,
    seed: u64,
    out_p: *mut f64,
) -> FtStatus {
    guarded(|| {
        let out = arg_out(out_p, "out_p")?;
        let (a, b): (&[f64], &[f64]) = if len == 0 {
            (&[], &[])
        } else if baseline.is_null() || current.is_null() {
            return Err(Error::invalid("ffi: indicator array is null"));
        } else {
            (
                std::slice::from_raw_parts(baseline, len),
                std::slice::from_raw_parts(current, len),
            )
        };
        let mode = if len <= 16 {
            PermutationMode::Exhaustive
        } else {
            PermutationMode::MonteCarlo { resamples }
        };
        *out = permutation_test(a, b, mode, seed)?;
        Ok(())
    })
}

/// A loaded model: frozen core, optional tuning overlay, and the tokenizer
/// the pair was trained with.
pub struct FtSession {
    core: CoreModel,
    overlay: Option<TuningOverlay>,
    tokenizer: Tokenizer,
}

impl FtSession {
    fn scorer(&self) -> ModelScorer<'_> {
        ModelScorer {
            core: &self.core,
            overlay: self.overlay.as_ref(),
            tokenizer: &self.tokenizer,
        }
    }
}

/// Opens a scoring session from checkpoint files. `overlay_path` may be null
/// to score the bare core. The overlay must have been trained against this
/// exact core; a fingerprint mismatch fails. Null on failure.
///
/// # Safety
/// Paths must be NUL-terminated strings (`overlay_path` may be null).
#[no_mangle]
pub unsafe extern "C" fn ft_session_open(
    core_path: *const c_char,
    overlay_path: *const c_char,
    tokenizer_path: *const c_char,
) -> *mut FtSession {
    guarded_ptr(|| {
        let core = CoreModel::load(Path::new(arg_str(core_path, "core path")?))?;
        let tokenizer = Tokenizer::load(Path::new(arg_str(tokenizer_path, "tokenizer path")?))?;
        let overlay = if overlay_path.is_null() {
            None
        } else {
            let (overlay, _) = TuningOverlay::load(Path::new(arg_str(overlay_path, "overlay path")?))?;
            overlay.bind_check(&core)?;
            Some(overlay)
        };
        Ok(Box::into_raw(Box::new(FtSession {
            core,
            overlay,
            tokenizer,
        })))
    })
}

/// Hex digest identifying the session's core parameters. Caller owns the
/// string; release with [`ft_string_free`]. Null on failure.
///
/// # Safety
/// `session` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ft_session_fingerprint(session: *const FtSession) -> *mut c_char {
    guarded_ptr(|| {
        let session = arg_ref(session, "session")?;
        let digest = CString::new(session.core.fingerprint()).expect("hex digest has no NUL");
        Ok(digest.into_raw())
    })
}

/// Length-normalized log-probability of one sentence under the session
/// model (higher is more plausible).
///
/// # Safety
/// `session` must be a live handle; `sentence` a NUL-terminated string;
/// `out_logprob` writable.
#[no_mangle]
pub unsafe extern "C" fn ft_session_score(
    session: *const FtSession,
    sentence: *const c_char,
    out_logprob: *mut f64,
) -> FtStatus {
    guarded(|| {
        let session = arg_ref(session, "session")?;
        let sentence = arg_str(sentence, "sentence")?;
        let out = arg_out(out_logprob, "out_logprob")?;
        *out = session.scorer().score(sentence)?;
        Ok(())
    })
}

/// Corpus perplexity of a one-sentence-per-line file under the session
/// model.
///
/// # Safety
/// `session` must be a live handle; `corpus_path` a NUL-terminated string;
/// `out_perplexity` writable.
#[no_mangle]
pub unsafe extern "C" fn ft_session_perplexity_file(
    session: *const FtSession,
    corpus_path: *const c_char,
    out_perplexity: *mut f64,
) -> FtStatus {
    guarded(|| {
        let session = arg_ref(session, "session")?;
        let path = arg_str(corpus_path, "corpus path")?;
        let out = arg_out(out_perplexity, "out_perplexity")?;
        let lines = read_lines(Path::new(path))?;
        let encoded: Vec<Vec<usize>> = lines.iter().map(|l| session.tokenizer.encode(l)).collect();
        *out = perplexity(&session.core, session.overlay.as_ref(), &encoded)?;
        Ok(())
    })
}

/// Stereotype score over a JSONL file of sentence pairs: the percentage of
/// pairs where the model prefers the more-stereotypical sentence (50 is
/// unbiased).
///
/// # Safety
/// `session` must be a live handle; `pairs_path` a NUL-terminated string;
/// `out_score` writable.
#[no_mangle]
pub unsafe extern "C" fn ft_session_stereotype_score(
    session: *const FtSession,
    pairs_path: *const c_char,
    out_score: *mut f64,
) -> FtStatus {
    guarded(|| {
        let session = arg_ref(session, "session")?;
        let path = arg_str(pairs_path, "pairs path")?;
        let out = arg_out(out_score, "out_score")?;
        let pairs = read_pairs(Path::new(path))?;
        let report = stereotype_score_pairs(&session.scorer(), &pairs)?;
        *out = report
            .stereotype_score
            .ok_or_else(|| Error::numerical("ffi: pair scoring produced no stereotype score"))?;
        Ok(())
    })
}

/// Releases a session handle. Null is a no-op.
///
/// # Safety
/// `session` must have come from `ft_session_open` and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn ft_session_free(session: *mut FtSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
