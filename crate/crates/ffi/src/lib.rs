//! C ABI over the `infossm` library.
//!
//! Models live behind an opaque `InfossmModel` handle created by
//! `infossm_model_load` or `infossm_model_train` and released with
//! `infossm_model_free`. Every fallible call returns an `InfossmStatus`; the
//! message of the most recent failure on the calling thread is available
//! from `infossm_last_error`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use infossm::archive::{self, ModelArchive};
use infossm::cli::train_archive;
use infossm::config::ExperimentConfig;
use infossm::data::TrajectoryBatch;
use infossm::diffmath::Mat;
use infossm::eval::mode_rollout;
use infossm::filtering::{self, TrackConfig};
use infossm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes. Validation and numerical failures share their values with
/// the command-line exit codes.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InfossmStatus {
    Ok = 0,
    /// Bad arguments, shapes, files or configuration.
    Validation = 2,
    /// Non-finite objective, failed factorization or degenerate weights.
    Numerical = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// An internal panic was caught.
    Panic = 5,
}

/// Opaque trained model.
pub struct InfossmModel {
    archive: ModelArchive,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> InfossmStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => InfossmStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            InfossmStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            if e.exit_code() == 3 {
                InfossmStatus::Numerical
            } else {
                InfossmStatus::Validation
            }
        }
        Err(_) => {
            set_error("internal panic");
            InfossmStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::Validation(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const InfossmModel) -> Result<&'a InfossmModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, need: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if len < need {
        return Err(Error::LengthMismatch(format!("{what} holds {len} values but {need} are needed")).into());
    }
    if need == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn infossm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn infossm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a model archive. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_load(path: *const c_char, out: *mut *mut InfossmModel) -> InfossmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let archive = archive::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(InfossmModel { archive }));
        Ok(())
    })
}

/// Train on a dataset CSV. `config_toml` holds config text and may be null
/// for the default profile. `seed` overrides the config seed. On success
/// `*out` owns a new handle; on failure it is set to null.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_train(
    config_toml: *const c_char,
    data_csv: *const c_char,
    seed: u64,
    out: *mut *mut InfossmModel,
) -> InfossmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let text = if config_toml.is_null() {
            String::new()
        } else {
            CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| Error::Validation("config is not valid UTF-8".into()))?
                .to_owned()
        };
        let mut cfg = ExperimentConfig::from_toml(&text, None)?;
        cfg.set_seed(seed);
        let data = TrajectoryBatch::read_csv(&path_arg(data_csv, "data_csv")?)?;
        let (archive, failure) = train_archive(&cfg, &data, None)?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        *out = Box::into_raw(Box::new(InfossmModel { archive }));
        Ok(())
    })
}

/// Write the model to an archive file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_save(model: *const InfossmModel, path: *const c_char) -> InfossmStatus {
    guard(|| {
        let m = model_ref(model)?;
        archive::save(&m.archive, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_free(model: *mut InfossmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of dynamics modes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_num_modes(model: *const InfossmModel) -> usize {
    model.as_ref().map_or(0, |m| m.archive.model.num_modes())
}

/// Latent state dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_state_dim(model: *const InfossmModel) -> usize {
    model.as_ref().map_or(0, |m| m.archive.model.state_dim())
}

/// Observation dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_obs_dim(model: *const InfossmModel) -> usize {
    model.as_ref().map_or(0, |m| m.archive.model.obs_dim())
}

/// Length of the observation window the encoder expects, or 0.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn infossm_model_window(model: *const InfossmModel) -> usize {
    model.as_ref().map_or(0, |m| m.archive.nets.window)
}

/// Noise-free observations of mode `code`'s mean dynamics from state `x1`.
/// Writes `(steps + 1) * obs_dim` values row-major into `out`.
///
/// # Safety
/// `x1` must hold `x1_len` values and `out` room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn infossm_rollout(
    model: *const InfossmModel,
    x1: *const f64,
    x1_len: usize,
    code: usize,
    steps: usize,
    out: *mut f64,
    out_len: usize,
) -> InfossmStatus {
    guard(|| {
        let m = &model_ref(model)?.archive.model;
        let x1 = input(x1, x1_len, "x1")?;
        let d = m.obs_dim();
        let dst = output(out, out_len, (steps + 1) * d, "out")?;
        let path = mode_rollout(m, x1, code, steps)?;
        for t in 0..=steps {
            for j in 0..d {
                dst[t * d + j] = path[(t, j)];
            }
        }
        Ok(())
    })
}

/// Particle-filter an observation window `y` (`t` rows of `d` values,
/// row-major). Writes the filtered state means (`t * state_dim`) and the
/// mode posteriors (`t * num_modes`), both row-major. Either output may be
/// null with a zero length to skip it.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn infossm_track(
    model: *const InfossmModel,
    y: *const f64,
    t: usize,
    d: usize,
    particles: usize,
    seed: u64,
    out_means: *mut f64,
    means_len: usize,
    out_code_probs: *mut f64,
    probs_len: usize,
) -> InfossmStatus {
    guard(|| {
        let a = &model_ref(model)?.archive;
        let (s, l) = (a.model.state_dim(), a.model.num_modes());
        if d != a.model.obs_dim() {
            return Err(Error::DimensionMismatch(format!("d = {d} but the model observes {}", a.model.obs_dim())).into());
        }
        let y = Mat::from_row_slice(t, d, input(y, t * d, "y")?);
        let cfg = TrackConfig { particles, ..TrackConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = filtering::track(&y, &a.model, &a.nets, &cfg, &mut rng)?;
        if !(out_means.is_null() && means_len == 0) {
            let dst = output(out_means, means_len, t * s, "out_means")?;
            for (i, r) in res.rows.iter().enumerate() {
                dst[i * s..(i + 1) * s].copy_from_slice(&r.mean);
            }
        }
        if !(out_code_probs.is_null() && probs_len == 0) {
            let dst = output(out_code_probs, probs_len, t * l, "out_code_probs")?;
            for (i, r) in res.rows.iter().enumerate() {
                dst[i * l..(i + 1) * l].copy_from_slice(&r.code_probs);
            }
        }
        Ok(())
    })
}
