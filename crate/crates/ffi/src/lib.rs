//! C interface to `cppso`.
//!
//! Every fallible call returns a [`CppsoStatus`]; on failure a message is
//! available from [`cppso_last_error`] on the same thread. Objects are opaque
//! handles released with their `_free` function, and strings handed out are
//! released with [`cppso_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cppso::harness::{heldout_eval, inspect, load_snapshot, run_experiment, ExperimentConfig};
use cppso::inference::{ChainState, PGConfig};
use cppso::model::{ModelDoc, ModelStructure, Relation, SymbolId};
use cppso::rng::{stream, tag};
use cppso::sampler::{
    generate, sample, Budget, CollapsedPrior, DistributionSource, Materialized, PredictiveMode, Status,
};
use cppso::semantics::{evaluate_semantics, observation_oracle, DEFAULT_MAX_ITER, DEFAULT_TOL};
use cppso::tree::CountTables;
use cppso::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CppsoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidModel = 4,
    Unparseable = 5,
    Io = 6,
    Json = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(CppsoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownSymbol(..)
            | Error::WrongType { .. }
            | Error::InvalidModel(_)
            | Error::InvalidWeights(_)
            | Error::NonPositiveAlpha(_) => CppsoStatus::InvalidModel,
            Error::Unparseable { .. } => CppsoStatus::Unparseable,
            Error::Io(_) => CppsoStatus::Io,
            Error::Json(_) => CppsoStatus::Json,
            _ => CppsoStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(CppsoStatus::Json, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CppsoStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CppsoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CppsoStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            CppsoStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CppsoStatus::NullPointer, "null string argument".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(CppsoStatus::InvalidUtf8, e.to_string()))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(CppsoStatus::NullPointer, "null output pointer".into()))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(CppsoStatus::NullPointer, "null handle".into()))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("result contains a nul byte"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cppso_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cppso_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cppso_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// A model with either fixed weights or a prior to sample from.
pub struct CppsoModel {
    model: ModelStructure,
    source: Source,
}

enum Source {
    Weights(Materialized),
    Prior(CollapsedPrior, CountTables),
}

impl CppsoModel {
    fn source(&self) -> DistributionSource<'_> {
        match &self.source {
            Source::Weights(m) => DistributionSource::Materialized(m),
            Source::Prior(p, c) => DistributionSource::Collapsed {
                prior: p,
                base: c,
                mode: PredictiveMode::Polya,
            },
        }
    }

    fn symbol(&self, name: &str) -> Result<SymbolId, Failure> {
        if let Some(q) = self.model.by_name(name) {
            return Ok(q);
        }
        match name.parse::<usize>() {
            Ok(k) if k < self.model.len() => Ok(k.into()),
            _ => Err(invalid(format!("no symbol {name:?}"))),
        }
    }
}

/// Parses a model document (JSON). Sampling uses its weights when present,
/// else its prior's predictive with no data.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_model_from_json(json: *const c_char, out: *mut *mut CppsoModel) -> CppsoStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let doc: ModelDoc = serde_json::from_str(text(json)?)?;
        let model = doc.model()?;
        let source = if let Some(w) = doc.weights(&model)? {
            Source::Weights(Materialized::new(&model, w)?)
        } else if let Some(p) = doc.prior(&model)? {
            Source::Prior(CollapsedPrior::new(p), CountTables::new(model.len()))
        } else {
            return Err(Failure(
                CppsoStatus::InvalidModel,
                "the model has neither weights nor a prior".into(),
            ));
        };
        *out = Box::into_raw(Box::new(CppsoModel { model, source }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cppso_model_from_json`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cppso_model_free(model: *mut CppsoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of symbols, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cppso_model_len(model: *const CppsoModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.len())
}

/// Fixed-point semantics of a weighted model as JSON.
///
/// # Safety
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_model_semantics(model: *const CppsoModel, out_json: *mut *mut c_char) -> CppsoStatus {
    guard(|| {
        let m = handle(model)?;
        let out = out_ptr(out_json)?;
        let Source::Weights(w) = &m.source else {
            return Err(invalid("semantics needs a model with weights"));
        };
        let table = evaluate_semantics(&m.model, w.weights(), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        *out = owned_string(serde_json::to_string(&table)?)?;
        Ok(())
    })
}

/// One run of `Sample(symbol, input)`. Writes the output symbol's index, or
/// -1 if the run exhausted `budget` calls.
///
/// # Safety
/// `model` must be a live handle, the names nul-terminated, `out_index`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_model_sample(
    model: *const CppsoModel,
    symbol: *const c_char,
    input: *const c_char,
    budget: u32,
    seed: u64,
    out_index: *mut i64,
) -> CppsoStatus {
    guard(|| {
        let m = handle(model)?;
        let out = out_ptr(out_index)?;
        let (q, i) = (m.symbol(text(symbol)?)?, m.symbol(text(input)?)?);
        let mut rng = stream(seed, &[tag::GENERATE]);
        let o = sample(&m.source(), &m.model, q, i, Budget::calls(budget), &mut rng)?;
        *out = match o.status {
            Status::Returned(j) => j.index() as i64,
            Status::BudgetExceeded => -1,
        };
        Ok(())
    })
}

/// Draws one string from the model. `out_terminated` is false when the run
/// hit the budget (the string is then a prefix).
///
/// # Safety
/// `model` must be a live handle and the outputs writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_model_generate(
    model: *const CppsoModel,
    budget: u32,
    seed: u64,
    out_text: *mut *mut c_char,
    out_terminated: *mut bool,
) -> CppsoStatus {
    guard(|| {
        let m = handle(model)?;
        let (text_out, done) = (out_ptr(out_text)?, out_ptr(out_terminated)?);
        let mut rng = stream(seed, &[tag::GENERATE]);
        let o = generate(&m.source(), &m.model, Budget::calls(budget), &mut rng)?;
        *done = matches!(o.status, Status::Returned(_));
        *text_out = owned_string(o.printed)?;
        Ok(())
    })
}

/// Exhaustive bracket of `p(text)`: the probability of runs that print
/// exactly `text`, and the mass cut off by the `depth` call budget.
///
/// # Safety
/// `model` must be a live handle, `text` nul-terminated, outputs writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_model_oracle(
    model: *const CppsoModel,
    string: *const c_char,
    depth: u32,
    out_matched: *mut f64,
    out_truncated: *mut f64,
) -> CppsoStatus {
    guard(|| {
        let m = handle(model)?;
        let (matched, truncated) = (out_ptr(out_matched)?, out_ptr(out_truncated)?);
        let x: Vec<char> = text(string)?.chars().collect();
        let r = observation_oracle(&m.model, &m.source(), &x, depth)?;
        *matched = r.matched_mass;
        *truncated = r.truncated_mass;
        Ok(())
    })
}

/// A trained chain loaded from a snapshot.
pub struct CppsoChain {
    chain: ChainState,
}

/// Loads a chain snapshot file written by an experiment run.
///
/// # Safety
/// `path` must be nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_chain_load(path: *const c_char, out: *mut *mut CppsoChain) -> CppsoStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let chain = load_snapshot(Path::new(text(path)?))?;
        *out = Box::into_raw(Box::new(CppsoChain { chain }));
        Ok(())
    })
}

/// # Safety
/// `chain` must come from [`cppso_chain_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cppso_chain_free(chain: *mut CppsoChain) {
    if !chain.is_null() {
        drop(Box::from_raw(chain));
    }
}

/// Completed epochs, or 0 for a null handle.
///
/// # Safety
/// `chain` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cppso_chain_epoch(chain: *const CppsoChain) -> usize {
    chain.as_ref().map_or(0, |c| c.chain.epoch)
}

/// Per-letter negative log-likelihood estimate of `string` under the chain;
/// infinity when no particle produced it.
///
/// # Safety
/// `chain` must be a live handle, `string` nul-terminated, `out_nll` writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_chain_nll(
    chain: *const CppsoChain,
    string: *const c_char,
    particles: usize,
    seed: u64,
    out_nll: *mut f64,
) -> CppsoStatus {
    guard(|| {
        let c = handle(chain)?;
        let out = out_ptr(out_nll)?;
        let pg = PGConfig::new(particles);
        let r = heldout_eval(&c.chain, &[text(string)?.to_string()], &pg, seed)?;
        *out = r[0].nll;
        Ok(())
    })
}

/// Posterior-mean weights, relation verdicts and parses as JSON.
///
/// # Safety
/// `chain` must be a live handle; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_chain_inspect(chain: *const CppsoChain, out_json: *mut *mut c_char) -> CppsoStatus {
    guard(|| {
        let c = handle(chain)?;
        let out = out_ptr(out_json)?;
        let report = inspect(&c.chain, &Relation::Shift { by: 1 }, &Relation::Shift { by: 2 });
        *out = owned_string(serde_json::to_string(&report)?)?;
        Ok(())
    })
}

/// Configuration JSON of a preset experiment (`A1`..`A7`).
///
/// # Safety
/// `id` must be nul-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_experiment_preset(id: *const c_char, out_json: *mut *mut c_char) -> CppsoStatus {
    guard(|| {
        let out = out_ptr(out_json)?;
        let cfg = ExperimentConfig::preset(text(id)?)?;
        *out = owned_string(serde_json::to_string(&cfg)?)?;
        Ok(())
    })
}

/// Runs an experiment from its configuration JSON, writing artifacts to
/// `out_dir` unless it is null, and returns the report as JSON.
///
/// # Safety
/// `config_json` must be nul-terminated, `out_dir` null or nul-terminated,
/// `out_report` writable.
#[no_mangle]
pub unsafe extern "C" fn cppso_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    out_report: *mut *mut c_char,
) -> CppsoStatus {
    guard(|| {
        let out = out_ptr(out_report)?;
        let cfg = ExperimentConfig::from_json(text(config_json)?)?;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(Path::new(text(out_dir)?))
        };
        let report = run_experiment(&cfg, dir)?;
        *out = owned_string(serde_json::to_string(&report)?)?;
        Ok(())
    })
}
