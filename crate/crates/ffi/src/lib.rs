//! C ABI over the clbench harness.
//!
//! Every fallible function returns a [`ClbStatus`]; on failure the message is
//! kept per thread and read with [`clb_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `*_free` function. Strings returned through out-parameters are owned by the
//! caller and released with [`clb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use clbench::config::{apply_set, default_tree, from_tree, load_layered, merge_configs, ExperimentConfig};
use clbench::memorybudget::{compute_budget_with, published_footprints, StorageEntry, StorageKind, StorageLedger};
use clbench::metrics::AccuracyMatrix;
use clbench::runner::{execute, RunOptions, RunRecord};
use clbench::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Metric = 4,
    Budget = 5,
    Infeasible = 6,
    Training = 7,
    Io = 8,
    OutOfRange = 9,
    Internal = 10,
    Panic = 11,
}

/// Storage categories priced by the memory ledger.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClbStorageKind {
    Image = 0,
    Feature = 1,
    Model = 2,
    Parameter = 3,
    Prompt = 4,
}

/// Summary metrics of an accuracy matrix. `bwt` and `forgetting` are NaN and
/// `has_transfer` is false for single-task matrices.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClbMetrics {
    pub last_acc: f64,
    pub avg_acc: f64,
    pub bwt: f64,
    pub forgetting: f64,
    pub has_transfer: bool,
}

/// Experiment description: built-in defaults merged with user layers.
pub struct ClbConfig {
    tree: serde_yaml::Value,
    cfg: ExperimentConfig,
}

/// Result of one run.
pub struct ClbRunRecord {
    record: RunRecord,
}

/// Itemized storage ledger.
pub struct ClbLedger {
    ledger: StorageLedger,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ClbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            e if e.is_config_error() => ClbStatus::Config,
            Error::UndefinedMetric(_) => ClbStatus::Metric,
            Error::Budget(_) => ClbStatus::Budget,
            Error::Infeasible(_) => ClbStatus::Infeasible,
            Error::Training(_) | Error::Numerical(_) => ClbStatus::Training,
            Error::Io { .. } => ClbStatus::Io,
            _ => ClbStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ClbStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ClbStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            ClbStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(ClbStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ClbStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_box<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(Box::into_raw(Box::new(value)));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(ClbStatus::Internal, "string contains NUL".into()))?;
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(c.into_raw());
    Ok(())
}

fn metrics_of(m: &AccuracyMatrix) -> Result<ClbMetrics, Failure> {
    let s = m.summary()?;
    Ok(ClbMetrics {
        last_acc: s.last_acc,
        avg_acc: s.avg_acc,
        bwt: s.bwt.unwrap_or(f64::NAN),
        forgetting: s.forgetting.unwrap_or(f64::NAN),
        has_transfer: s.bwt.is_some(),
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn clb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn clb_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Built-in default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn clb_config_default(out: *mut *mut ClbConfig) -> ClbStatus {
    guard(|| {
        let tree = default_tree();
        let cfg = from_tree(&tree)?;
        put_box(out, ClbConfig { tree, cfg })
    })
}

/// Parses YAML text and merges it over the built-in defaults.
///
/// # Safety
/// `yaml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_config_from_yaml(yaml: *const c_char, out: *mut *mut ClbConfig) -> ClbStatus {
    guard(|| {
        let text = str_arg(yaml, "yaml")?;
        let user: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| {
            Failure::from(Error::ConfigParse { path: "<string>".into(), message: e.to_string() })
        })?;
        let tree = merge_configs(&default_tree(), &user)?;
        let cfg = from_tree(&tree)?;
        put_box(out, ClbConfig { tree, cfg })
    })
}

/// Loads a YAML file over the built-in defaults.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_config_load(path: *const c_char, out: *mut *mut ClbConfig) -> ClbStatus {
    guard(|| {
        let path = Path::new(str_arg(path, "path")?);
        let cfg = load_layered(None, path, &[])?;
        let tree = cfg.to_tree();
        put_box(out, ClbConfig { tree, cfg })
    })
}

/// Applies one `dotted.key=value` override. The handle is unchanged on error.
///
/// # Safety
/// `cfg` must be a live handle; `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn clb_config_set(cfg: *mut ClbConfig, assignment: *const c_char) -> ClbStatus {
    guard(|| {
        let handle = mut_arg(cfg, "config")?;
        let tree = apply_set(&handle.tree, str_arg(assignment, "assignment")?)?;
        handle.cfg = from_tree(&tree)?;
        handle.tree = tree;
        Ok(())
    })
}

/// Fully resolved configuration as YAML.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_config_to_yaml(cfg: *const ClbConfig, out: *mut *mut c_char) -> ClbStatus {
    guard(|| put_string(out, ref_arg(cfg, "config")?.cfg.to_yaml()))
}

/// # Safety
/// `cfg` must be NULL or a handle from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clb_config_free(cfg: *mut ClbConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs an experiment to completion. With `write_outputs` false nothing is
/// written to disk.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_run(cfg: *const ClbConfig, write_outputs: bool, out: *mut *mut ClbRunRecord) -> ClbStatus {
    guard(|| {
        let cfg = &ref_arg(cfg, "config")?.cfg;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let record = execute(cfg, RunOptions { write_outputs })?.record;
        put_box(out, ClbRunRecord { record })
    })
}

/// Loads a `record.json` written by a previous run.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_record_load(path: *const c_char, out: *mut *mut ClbRunRecord) -> ClbStatus {
    guard(|| {
        let record = RunRecord::load(Path::new(str_arg(path, "path")?))?;
        put_box(out, ClbRunRecord { record })
    })
}

/// Number of evaluated rows in the accuracy matrix.
///
/// # Safety
/// `rec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_record_num_tasks(rec: *const ClbRunRecord, out: *mut usize) -> ClbStatus {
    guard(|| put(out, ref_arg(rec, "record")?.record.matrix.rows().len()))
}

/// Accuracy on task `j` after training through task `t` (`j <= t`).
///
/// # Safety
/// `rec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_record_accuracy(rec: *const ClbRunRecord, t: usize, j: usize, out: *mut f64) -> ClbStatus {
    guard(|| {
        let m = &ref_arg(rec, "record")?.record.matrix;
        let v = m
            .get(t, j)
            .ok_or_else(|| Failure(ClbStatus::OutOfRange, format!("no entry at ({t}, {j})")))?;
        put(out, v)
    })
}

/// Summary metrics of the recorded matrix.
///
/// # Safety
/// `rec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_record_metrics(rec: *const ClbRunRecord, out: *mut ClbMetrics) -> ClbStatus {
    guard(|| put(out, metrics_of(&ref_arg(rec, "record")?.record.matrix)?))
}

/// The record serialized as JSON.
///
/// # Safety
/// `rec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_record_to_json(rec: *const ClbRunRecord, out: *mut *mut c_char) -> ClbStatus {
    guard(|| {
        let text = serde_json::to_string_pretty(&ref_arg(rec, "record")?.record).map_err(|e| Failure::from(Error::from(e)))?;
        put_string(out, text)
    })
}

/// Copy of the run's storage ledger.
///
/// # Safety
/// `rec` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_record_ledger(rec: *const ClbRunRecord, out: *mut *mut ClbLedger) -> ClbStatus {
    guard(|| put_box(out, ClbLedger { ledger: ref_arg(rec, "record")?.record.ledger.clone() }))
}

/// # Safety
/// `rec` must be NULL or a handle from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clb_record_free(rec: *mut ClbRunRecord) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}

/// Metrics of a lower-triangular accuracy matrix given row-major in a
/// `num_tasks * num_tasks` array; entries above the diagonal are ignored.
///
/// # Safety
/// `values` must point to `num_tasks * num_tasks` readable doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_metrics_compute(values: *const f64, num_tasks: usize, out: *mut ClbMetrics) -> ClbStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        let n2 = num_tasks
            .checked_mul(num_tasks)
            .ok_or_else(|| Failure(ClbStatus::OutOfRange, "num_tasks overflows".into()))?;
        let flat = std::slice::from_raw_parts(values, n2);
        let rows = (0..num_tasks).map(|t| flat[t * num_tasks..=t * num_tasks + t].to_vec()).collect();
        put(out, metrics_of(&AccuracyMatrix::from_rows(rows)?)?)
    })
}

/// Empty ledger.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_ledger_new(out: *mut *mut ClbLedger) -> ClbStatus {
    guard(|| put_box(out, ClbLedger { ledger: StorageLedger::default() }))
}

/// Ledger of a published method footprint (`icarl`, `gpm`, `l2p`,
/// `moe_adapter4cl`).
///
/// # Safety
/// `method` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_ledger_published(method: *const c_char, out: *mut *mut ClbLedger) -> ClbStatus {
    guard(|| {
        let name = str_arg(method, "method")?;
        let fp = published_footprints()
            .into_iter()
            .find(|f| f.method == name)
            .ok_or_else(|| Failure(ClbStatus::OutOfRange, format!("no published footprint for `{name}`")))?;
        put_box(out, ClbLedger { ledger: fp.ledger })
    })
}

/// Appends `count` values of `kind`. Images cost 1 unit per value, every
/// other kind 4.
///
/// # Safety
/// `ledger` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn clb_ledger_push(ledger: *mut ClbLedger, kind: ClbStorageKind, count: u64) -> ClbStatus {
    guard(|| {
        let l = &mut mut_arg(ledger, "ledger")?.ledger;
        l.push(match kind {
            ClbStorageKind::Image => StorageEntry::image(count),
            ClbStorageKind::Feature => StorageEntry::numeric(StorageKind::Feature, count),
            ClbStorageKind::Model => StorageEntry::numeric(StorageKind::Model, count),
            ClbStorageKind::Parameter => StorageEntry::numeric(StorageKind::Parameter, count),
            ClbStorageKind::Prompt => StorageEntry::numeric(StorageKind::Prompt, count),
        });
        Ok(())
    })
}

/// Sets the frozen backbone footprint in units.
///
/// # Safety
/// `ledger` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn clb_ledger_set_frozen(ledger: *mut ClbLedger, units: u64) -> ClbStatus {
    guard(|| {
        mut_arg(ledger, "ledger")?.ledger.frozen_param_units = units;
        Ok(())
    })
}

/// Total units, optionally counting the frozen backbone.
///
/// # Safety
/// `ledger` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clb_ledger_total_units(ledger: *const ClbLedger, include_frozen: bool, out: *mut u64) -> ClbStatus {
    guard(|| put(out, compute_budget_with(&ref_arg(ledger, "ledger")?.ledger, include_frozen)?.total_units))
}

/// # Safety
/// `ledger` must be NULL or a handle from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clb_ledger_free(ledger: *mut ClbLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}
