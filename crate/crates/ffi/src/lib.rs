//! C ABI over `extvae`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns an
//! [`ExtvaeStatus`]; on failure a message is kept per thread and can be read
//! with [`extvae_last_error`]. Panics are caught and reported as
//! `EXTVAE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use extvae::marginal_models::fit_gev_mle;
use extvae::maxid_process::{ModelDesign, ModelKind};
use extvae::seed::rng_from_seed;
use extvae::spatial_basis::build_basis;
use extvae::stable_dist::{sample_tilted_ps, TiltedPsParams, DEFAULT_MAX_TRIES};
use extvae::tail_metrics::{crps_ensemble, empirical_chi_h};
use extvae::vae::{emulate, init_params, train, TrainConfig, VaeState};
use extvae::{io, Error, Field, KnotConfig, Scale, SiteSet};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtvaeStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// An argument is outside its domain or inconsistent with another.
    InvalidArgument = 2,
    /// Malformed or unreadable input data.
    Data = 3,
    /// An optimizer, sampler or quadrature failed.
    Numerical = 4,
    Panic = 5,
}

/// Scale tag of a field.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtvaeScale {
    Raw = 0,
    Uniform = 1,
    Frechet = 2,
}

impl From<ExtvaeScale> for Scale {
    fn from(s: ExtvaeScale) -> Self {
        match s {
            ExtvaeScale::Raw => Scale::Raw,
            ExtvaeScale::Uniform => Scale::Uniform,
            ExtvaeScale::Frechet => Scale::Frechet,
        }
    }
}

/// Opaque set of 2-D site coordinates.
pub struct ExtvaeSites(SiteSet);

/// Opaque field: replicates by sites.
pub struct ExtvaeField(Field);

/// Opaque trained or initialized emulator.
pub struct ExtvaeModel(VaeState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn extvae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn extvae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

struct Fail(ExtvaeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = if e.is_numerical() {
            ExtvaeStatus::Numerical
        } else {
            match e {
                Error::Parse { .. } | Error::Io { .. } | Error::Json { .. } => ExtvaeStatus::Data,
                _ => ExtvaeStatus::InvalidArgument,
            }
        };
        Fail(status, e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(ExtvaeStatus::NullPointer, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ExtvaeStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ExtvaeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ExtvaeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ExtvaeStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn slice<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, name: &str) -> Result<&'a mut [f64], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

fn model_kind(model: u32) -> Result<ModelKind, Fail> {
    Ok(match model {
        1 => ModelKind::I,
        2 => ModelKind::II,
        3 => ModelKind::III,
        4 => ModelKind::IV,
        5 => ModelKind::V,
        m => return Err(invalid(format!("model must be 1-5, got {m}"))),
    })
}

/// Sites from `n` interleaved `(x, y)` pairs.
///
/// # Safety
/// `xy` must point to `2 n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn extvae_sites_new(xy: *const f64, n: usize, out: *mut *mut ExtvaeSites) -> ExtvaeStatus {
    guard(|| {
        let v = slice(xy, 2 * n, "xy")?;
        let coords = v.chunks(2).map(|c| [c[0], c[1]]).collect();
        put(out, ExtvaeSites(SiteSet::new(coords)?))
    })
}

/// # Safety
/// `sites` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn extvae_sites_free(sites: *mut ExtvaeSites) {
    if !sites.is_null() {
        drop(Box::from_raw(sites));
    }
}

/// # Safety
/// `sites` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn extvae_sites_len(sites: *const ExtvaeSites) -> usize {
    sites.as_ref().map_or(0, |s| s.0.len())
}

/// Field from `n_t * n_sites` replicate-major values.
///
/// # Safety
/// `values` must point to `n_t * len(sites)` doubles.
#[no_mangle]
pub unsafe extern "C" fn extvae_field_new(
    values: *const f64,
    n_t: usize,
    sites: *const ExtvaeSites,
    scale: ExtvaeScale,
    out: *mut *mut ExtvaeField,
) -> ExtvaeStatus {
    guard(|| {
        let s = get(sites, "sites")?;
        let v = slice(values, n_t * s.0.len(), "values")?;
        put(out, ExtvaeField(Field::new(v.to_vec(), n_t, s.0.clone(), scale.into())?))
    })
}

/// Simulates design `model` (1-5 for I-V) with latent stability `alpha`.
///
/// # Safety
/// `sites` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn extvae_simulate(
    model: u32,
    alpha: f64,
    sites: *const ExtvaeSites,
    n_t: usize,
    seed: u64,
    out: *mut *mut ExtvaeField,
) -> ExtvaeStatus {
    guard(|| {
        let s = get(sites, "sites")?;
        let design = ModelDesign::with_alpha(model_kind(model)?, alpha)?;
        put(out, ExtvaeField(design.simulate(&s.0, n_t, seed)?))
    })
}

/// Reads a long-format CSV field (`t,site_id,x,y,value`).
///
/// # Safety
/// `csv_path` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn extvae_field_read_csv(
    csv_path: *const c_char,
    scale: ExtvaeScale,
    out: *mut *mut ExtvaeField,
) -> ExtvaeStatus {
    guard(|| put(out, ExtvaeField(io::read_field(path(csv_path)?, scale.into())?)))
}

/// # Safety
/// `field` must be a live handle and `csv_path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn extvae_field_write_csv(field: *const ExtvaeField, csv_path: *const c_char) -> ExtvaeStatus {
    guard(|| Ok(io::write_field(path(csv_path)?, &get(field, "field")?.0)?))
}

/// # Safety
/// `field` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn extvae_field_free(field: *mut ExtvaeField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Writes the replicate and site counts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn extvae_field_shape(field: *const ExtvaeField, n_t: *mut usize, n_sites: *mut usize) -> ExtvaeStatus {
    guard(|| {
        let f = get(field, "field")?;
        if n_t.is_null() || n_sites.is_null() {
            return Err(null("shape output"));
        }
        *n_t = f.0.n_t();
        *n_sites = f.0.n_s();
        Ok(())
    })
}

/// Copies the replicate-major values into `out`, which holds `len` doubles.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn extvae_field_values(field: *const ExtvaeField, out: *mut f64, len: usize) -> ExtvaeStatus {
    guard(|| {
        let f = get(field, "field")?;
        let v = f.0.values();
        if len != v.len() {
            return Err(invalid(format!("buffer holds {len} values, field has {}", v.len())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(v);
        Ok(())
    })
}

/// Draws `n` variables from the exponentially tilted positive-stable law
/// with stability `alpha` and tilt `theta`.
///
/// # Safety
/// `out` must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn extvae_sample_tilted_ps(alpha: f64, theta: f64, seed: u64, n: usize, out: *mut f64) -> ExtvaeStatus {
    guard(|| {
        let p = TiltedPsParams::standard(alpha, theta)?;
        let mut rng = rng_from_seed(seed);
        for v in slice_mut(out, n, "out")? {
            *v = sample_tilted_ps(&p, &mut rng, DEFAULT_MAX_TRIES)?;
        }
        Ok(())
    })
}

/// Maximum-likelihood GEV fit; writes `mu`, `sigma`, `xi` to `params[0..3]`
/// and their standard errors to `se[0..3]` when `se` is not null.
///
/// # Safety
/// `series` must hold `n` doubles, `params` 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn extvae_fit_gev(series: *const f64, n: usize, params: *mut f64, se: *mut f64) -> ExtvaeStatus {
    guard(|| {
        let fit = fit_gev_mle(slice(series, n, "series")?)?;
        slice_mut(params, 3, "params")?.copy_from_slice(&[fit.params.mu, fit.params.sigma, fit.params.xi]);
        if !se.is_null() {
            slice_mut(se, 3, "se")?.copy_from_slice(&fit.se);
        }
        Ok(())
    })
}

/// Empirical `χ_h(u)` with its 95% envelope at `n_u` thresholds. The field
/// must be on the uniform scale.
///
/// # Safety
/// `u` must hold `n_u` doubles and each output `n_u` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn extvae_empirical_chi(
    field: *const ExtvaeField,
    h: f64,
    tol: f64,
    u: *const f64,
    n_u: usize,
    estimate: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
) -> ExtvaeStatus {
    guard(|| {
        let f = get(field, "field")?;
        let c = empirical_chi_h(&f.0, h, tol, slice(u, n_u, "u")?)?;
        slice_mut(estimate, n_u, "estimate")?.copy_from_slice(&c.estimate);
        slice_mut(lower, n_u, "lower")?.copy_from_slice(&c.lower);
        slice_mut(upper, n_u, "upper")?.copy_from_slice(&c.upper);
        Ok(())
    })
}

/// CRPS of an ensemble of `n` members against observation `y`.
///
/// # Safety
/// `ensemble` must hold `n` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn extvae_crps_ensemble(ensemble: *const f64, n: usize, y: f64, out: *mut f64) -> ExtvaeStatus {
    guard(|| {
        let v = crps_ensemble(slice(ensemble, n, "ensemble")?, y)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Initializes an emulator on `field` with a regular `n x n` grid of knots
/// over `[0, 10]^2` with the given radius, then runs at most `max_iters`
/// training iterations (0 skips training).
///
/// # Safety
/// `field` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn extvae_model_train(
    field: *const ExtvaeField,
    knots_per_side: usize,
    radius: f64,
    max_iters: usize,
    seed: u64,
    out: *mut *mut ExtvaeModel,
) -> ExtvaeStatus {
    guard(|| {
        let f = &get(field, "field")?.0;
        let knots = KnotConfig::regular(knots_per_side, 0.0, 10.0, radius)?;
        let basis = build_basis(f.sites(), &knots)?;
        let mut state = init_params(f, &basis)?;
        if max_iters > 0 {
            let cfg = TrainConfig {
                max_iters,
                seed,
                ..TrainConfig::default()
            };
            state = train(f, &cfg, state)?;
        }
        put(out, ExtvaeModel(state))
    })
}

/// Loads a model saved by [`extvae_model_save`] or the command line.
///
/// # Safety
/// `json_path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn extvae_model_load(json_path: *const c_char, out: *mut *mut ExtvaeModel) -> ExtvaeStatus {
    guard(|| {
        let text = io::read_string(path(json_path)?)?;
        put(out, ExtvaeModel(VaeState::from_json(&text)?))
    })
}

/// # Safety
/// `model` must be a live handle and `json_path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn extvae_model_save(model: *const ExtvaeModel, json_path: *const c_char) -> ExtvaeStatus {
    guard(|| {
        let m = get(model, "model")?;
        Ok(io::write_bytes(path(json_path)?, format!("{}\n", m.0.to_json()?).as_bytes())?)
    })
}

/// Number of knots of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn extvae_model_n_knots(model: *const ExtvaeModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.n_knots())
}

/// Emulates `draws` ensembles conditioned on the replicates of `field`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn extvae_emulate(
    model: *const ExtvaeModel,
    field: *const ExtvaeField,
    draws: usize,
    seed: u64,
    out: *mut *mut ExtvaeField,
) -> ExtvaeStatus {
    guard(|| {
        let m = get(model, "model")?;
        let f = get(field, "field")?;
        put(out, ExtvaeField(emulate(&m.0, &f.0, draws, seed)?))
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn extvae_model_free(model: *mut ExtvaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
