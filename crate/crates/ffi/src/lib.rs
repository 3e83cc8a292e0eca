//! C interface to the scene-reid pipeline.
//!
//! Every function returns an [`SrStatus`]. On failure the message is kept per
//! thread and can be read with [`sr_last_error_message`]. Handles are opaque
//! and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use scene_reid::pipeline::checkpoint::{checkpoint_load, checkpoint_save};
use scene_reid::pipeline::config::{Config, DataConfig};
use scene_reid::pipeline::dataset_io::{load_dataset, save_dataset};
use scene_reid::pipeline::synth::{synth_generate, Dataset};
use scene_reid::pipeline::train::{quick_eval, Trainer};
use scene_reid::ReidError;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dataset = 4,
    Checkpoint = 5,
    Protocol = 6,
    Numerical = 7,
    Shape = 8,
    Io = 9,
    /// A Rust panic was caught at the boundary.
    Internal = 10,
}

/// Which half of a dataset to address.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrSplit {
    Train = 0,
    Test = 1,
}

/// Parsed configuration.
pub struct SrConfig {
    inner: Config,
}

/// Synthetic scenes plus the settings and seed that produced them.
pub struct SrDataset {
    inner: Dataset,
    data: DataConfig,
    seed: u64,
}

/// Model parameters with optimizer and matching state.
pub struct SrTrainer {
    inner: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SrStatus, String);

impl From<ReidError> for Failure {
    fn from(e: ReidError) -> Self {
        let code = match &e {
            ReidError::Config(_) => SrStatus::Config,
            ReidError::Dataset(_) | ReidError::Image(_) => SrStatus::Dataset,
            ReidError::Checkpoint(_) | ReidError::Json(_) => SrStatus::Checkpoint,
            ReidError::Protocol(_) => SrStatus::Protocol,
            ReidError::Numerical(_) => SrStatus::Numerical,
            ReidError::Shape { .. } => SrStatus::Shape,
            ReidError::Io(_) => SrStatus::Io,
            _ => SrStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            SrStatus::Internal
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn borrow_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(SrStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Clears the stored error message.
#[no_mangle]
pub extern "C" fn sr_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Small built-in profile that trains in seconds.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_config_desk(out: *mut *mut SrConfig) -> SrStatus {
    guard(|| put(out, SrConfig { inner: Config::desk() }))
}

/// Parses and validates a TOML config.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_config_from_toml(toml: *const c_char, out: *mut *mut SrConfig) -> SrStatus {
    guard(|| {
        let cfg = Config::from_toml_str(&text(toml, "toml")?)?;
        put(out, SrConfig { inner: cfg })
    })
}

/// Serializes a config to TOML; free the result with [`sr_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_config_to_toml(cfg: *const SrConfig, out: *mut *mut c_char) -> SrStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let s = CString::new(cfg.inner.to_toml_string())
            .map_err(|_| Failure(SrStatus::Internal, "config text contains NUL".into()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// Number of dimensions of the final representation.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_config_embedding_dim(cfg: *const SrConfig, out: *mut usize) -> SrStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?;
        *borrow_mut(out, "output pointer")? = cfg.inner.embedding_dim();
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sr_config_free(cfg: *mut SrConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Renders the synthetic dataset described by the config's data section.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_generate(cfg: *const SrConfig, seed: u64, out: *mut *mut SrDataset) -> SrStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?;
        let ds = synth_generate(&cfg.inner.data, seed)?;
        put(
            out,
            SrDataset {
                inner: ds,
                data: cfg.inner.data.clone(),
                seed,
            },
        )
    })
}

/// Loads a dataset directory written by [`sr_dataset_save`] or the CLI.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_load(dir: *const c_char, out: *mut *mut SrDataset) -> SrStatus {
    guard(|| {
        let (inner, data, seed) = load_dataset(&PathBuf::from(text(dir, "dir")?))?;
        put(out, SrDataset { inner, data, seed })
    })
}

/// # Safety
/// `ds` must be a live handle and `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_save(ds: *const SrDataset, dir: *const c_char) -> SrStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        save_dataset(&ds.inner, &ds.data, ds.seed, &PathBuf::from(text(dir, "dir")?))?;
        Ok(())
    })
}

/// Scene and person-box counts of one split.
///
/// # Safety
/// `ds` must be a live handle; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_counts(
    ds: *const SrDataset,
    split: SrSplit,
    scenes: *mut usize,
    persons: *mut usize,
) -> SrStatus {
    guard(|| {
        let ds = borrow(ds, "dataset")?;
        let s = match split {
            SrSplit::Train => &ds.inner.train,
            SrSplit::Test => &ds.inner.test,
        };
        *borrow_mut(scenes, "scenes")? = s.scenes.len();
        *borrow_mut(persons, "persons")? = s.scenes.iter().map(|x| x.persons().count()).sum();
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sr_dataset_free(ds: *mut SrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fresh model and training state for a dataset.
///
/// # Safety
/// `cfg` and `ds` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_new(
    cfg: *const SrConfig,
    ds: *const SrDataset,
    seed: u64,
    out: *mut *mut SrTrainer,
) -> SrStatus {
    guard(|| {
        let cfg = borrow(cfg, "config")?;
        let ds = borrow(ds, "dataset")?;
        let t = Trainer::new(&cfg.inner, ds.inner.train.identities.len(), seed)?;
        put(out, SrTrainer { inner: t })
    })
}

/// Trains one epoch and reports its mean loss.
///
/// # Safety
/// `t` and `ds` must be live handles; `loss` may be null.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_run_epoch(t: *mut SrTrainer, ds: *const SrDataset, loss: *mut f64) -> SrStatus {
    guard(|| {
        let t = borrow_mut(t, "trainer")?;
        let ds = borrow(ds, "dataset")?;
        let m = t.inner.run_epoch(&ds.inner)?;
        if let Some(l) = loss.as_mut() {
            *l = m.loss;
        }
        Ok(())
    })
}

/// Epochs completed so far.
///
/// # Safety
/// `t` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_epoch(t: *const SrTrainer, out: *mut usize) -> SrStatus {
    guard(|| {
        let t = borrow(t, "trainer")?;
        *borrow_mut(out, "output pointer")? = t.inner.epoch;
        Ok(())
    })
}

/// Standard-protocol mAP and top-1 on the test split.
///
/// # Safety
/// `t` and `ds` must be live handles; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_evaluate(
    t: *const SrTrainer,
    ds: *const SrDataset,
    map: *mut f64,
    top1: *mut f64,
) -> SrStatus {
    guard(|| {
        let t = borrow(t, "trainer")?;
        let ds = borrow(ds, "dataset")?;
        let (m, k) = quick_eval(&t.inner.model, &ds.inner.test)?;
        *borrow_mut(map, "map")? = m;
        *borrow_mut(top1, "top1")? = k;
        Ok(())
    })
}

/// Writes the final representations of the persons in one test scene, row
/// major, into `buf`. `rows` receives the person count even when `cap` is too
/// small, in which case the call fails with `SR_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `t` and `ds` must be live handles, `buf` must hold `cap` doubles, and
/// `rows` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_embed_test_scene(
    t: *const SrTrainer,
    ds: *const SrDataset,
    scene: usize,
    buf: *mut f64,
    cap: usize,
    rows: *mut usize,
) -> SrStatus {
    guard(|| {
        let t = borrow(t, "trainer")?;
        let ds = borrow(ds, "dataset")?;
        let rows = borrow_mut(rows, "rows")?;
        let s = ds.inner.test.scenes.get(scene).ok_or_else(|| {
            Failure(
                SrStatus::InvalidArgument,
                format!("scene {scene} out of range for {} test scenes", ds.inner.test.scenes.len()),
            )
        })?;
        let reps = t.inner.model.embed_persons(&[s])?;
        *rows = reps.shape()[0];
        if reps.len() > cap {
            return Err(Failure(
                SrStatus::InvalidArgument,
                format!("buffer holds {cap} values but {} are needed", reps.len()),
            ));
        }
        if reps.len() > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            std::slice::from_raw_parts_mut(buf, reps.len()).copy_from_slice(reps.data());
        }
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_save(t: *const SrTrainer, path: *const c_char) -> SrStatus {
    guard(|| {
        let t = borrow(t, "trainer")?;
        checkpoint_save(&t.inner, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Loads a checkpoint. When `expected` is not null the stored config must equal it.
///
/// # Safety
/// `path` must be a NUL-terminated path, `expected` a live handle or null, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_load(
    path: *const c_char,
    expected: *const SrConfig,
    out: *mut *mut SrTrainer,
) -> SrStatus {
    guard(|| {
        let expected = expected.as_ref().map(|c| &c.inner);
        let t = checkpoint_load(&PathBuf::from(text(path, "path")?), expected)?;
        put(out, SrTrainer { inner: t })
    })
}

/// # Safety
/// `t` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sr_trainer_free(t: *mut SrTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
