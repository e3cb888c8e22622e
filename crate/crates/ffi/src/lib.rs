//! C ABI over `mfsde`.
//!
//! Every fallible function returns an [`MfsdeStatus`]; on failure the message
//! is kept per thread and read with [`mfsde_last_error_message`]. Handles are
//! opaque and released with the matching `*_free`. Panics never cross the
//! boundary; they come back as `MFSDE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mfsde::density::{interaction_precompute, DensityCoupling, InteractionMode, PiecewiseDensity};
use mfsde::fpsolve::{solve_fp, FpOptions};
use mfsde::grid::Grid;
use mfsde::io;
use mfsde::model::{builtin_example, Problem};
use mfsde::sde::{simulate_ensemble, strong_error, Ensemble, EnsembleOptions, Interaction, Recording};
use mfsde::stats::estimate_orders;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfsdeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericalFailure = 3,
    Io = 4,
    Panic = 5,
}

/// Interaction evaluation used by [`mfsde_ensemble_simulate`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfsdeMode {
    Interpolate = 0,
    Exact = 1,
}

pub struct MfsdeProblem {
    inner: Problem,
}

pub struct MfsdeDensity {
    inner: PiecewiseDensity,
}

pub struct MfsdeEnsemble {
    inner: Ensemble,
}

struct Failure(MfsdeStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

fn invalid(e: impl ToString) -> Failure {
    Failure(MfsdeStatus::InvalidArgument, e.to_string())
}

fn numerical(e: impl ToString) -> Failure {
    Failure(MfsdeStatus::NumericalFailure, e.to_string())
}

fn io_failure(e: io::IoError) -> Failure {
    match e {
        io::IoError::Io { .. } => Failure(MfsdeStatus::Io, e.to_string()),
        _ => invalid(e),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> MfsdeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MfsdeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MfsdeStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    unsafe { p.as_ref() }.ok_or_else(|| Failure(MfsdeStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    unsafe { p.as_mut() }.ok_or_else(|| Failure(MfsdeStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(MfsdeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(MfsdeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(Failure(MfsdeStatus::NullPointer, "path is null".into()));
    }
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn copy_into(src: &[f64], dst: &mut [f64]) -> FfiResult {
    if dst.len() < src.len() {
        return Err(invalid(format!("buffer holds {} values, need {}", dst.len(), src.len())));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the length needed including the NUL, or 0 if
/// there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mfsde_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n - 1) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfsde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Built-in example problem 1, 2 or 3.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mfsde_problem_builtin(id: u32, out: *mut *mut MfsdeProblem) -> MfsdeStatus {
    guard(|| {
        let out = unsafe { out_ref(out, "out") }?;
        let inner = builtin_example(id).map_err(invalid)?;
        *out = Box::into_raw(Box::new(MfsdeProblem { inner }));
        Ok(())
    })
}

/// # Safety
/// `problem` must be valid and `dim` writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_problem_dim(problem: *const MfsdeProblem, dim: *mut usize) -> MfsdeStatus {
    guard(|| {
        let p = unsafe { deref(problem, "problem") }?;
        *unsafe { out_ref(dim, "dim") }? = p.inner.dim();
        Ok(())
    })
}

/// # Safety
/// `problem` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfsde_problem_free(problem: *mut MfsdeProblem) {
    if !problem.is_null() {
        drop(unsafe { Box::from_raw(problem) });
    }
}

/// Solves the Fokker-Planck equation on `(-alpha, alpha)^d` with `2m + 1`
/// nodes per axis and `n_steps` time steps up to the problem's horizon.
///
/// # Safety
/// `problem` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_solve_fp(problem: *const MfsdeProblem, alpha: f64, m: usize, n_steps: usize, out: *mut *mut MfsdeDensity) -> MfsdeStatus {
    guard(|| {
        let p = &unsafe { deref(problem, "problem") }?.inner;
        let out = unsafe { out_ref(out, "out") }?;
        let grid = Grid::new(p.dim(), alpha, m, p.horizon(), n_steps).map_err(invalid)?;
        let sol = solve_fp(p, &grid, &FpOptions::default()).map_err(numerical)?;
        *out = Box::into_raw(Box::new(MfsdeDensity { inner: PiecewiseDensity::new(sol.field) }));
        Ok(())
    })
}

/// Reads a density written by [`mfsde_density_write`] or the CLI (binary, or CSV by `.csv` extension).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_read(path: *const c_char, out: *mut *mut MfsdeDensity) -> MfsdeStatus {
    guard(|| {
        let path = unsafe { path_arg(path) }?;
        let out = unsafe { out_ref(out, "out") }?;
        let field = io::read_density(&path).map_err(io_failure)?;
        *out = Box::into_raw(Box::new(MfsdeDensity { inner: PiecewiseDensity::new(field) }));
        Ok(())
    })
}

/// # Safety
/// `density` must be valid and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_write(density: *const MfsdeDensity, path: *const c_char) -> MfsdeStatus {
    guard(|| {
        let d = unsafe { deref(density, "density") }?;
        let path = unsafe { path_arg(path) }?;
        io::write_density(&path, d.inner.field()).map_err(io_failure)
    })
}

/// # Safety
/// `density` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_free(density: *mut MfsdeDensity) {
    if !density.is_null() {
        drop(unsafe { Box::from_raw(density) });
    }
}

/// Number of time levels (`n_steps + 1`) and of nodes per level.
///
/// # Safety
/// `density` must be valid; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_shape(density: *const MfsdeDensity, levels: *mut usize, nodes: *mut usize) -> MfsdeStatus {
    guard(|| {
        let d = unsafe { deref(density, "density") }?;
        *unsafe { out_ref(levels, "levels") }? = d.inner.field().n_levels();
        *unsafe { out_ref(nodes, "nodes") }? = d.inner.grid().node_count();
        Ok(())
    })
}

/// Copies the node values of level `n` in lexicographic node order.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_copy_level(density: *const MfsdeDensity, n: usize, buf: *mut f64, len: usize) -> MfsdeStatus {
    guard(|| {
        let d = unsafe { deref(density, "density") }?;
        let level = d.inner.field().try_level(n).map_err(invalid)?;
        copy_into(level, unsafe { slice_mut(buf, len, "buf") }?)
    })
}

/// # Safety
/// `density` must be valid and `mass` writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_mass(density: *const MfsdeDensity, n: usize, mass: *mut f64) -> MfsdeStatus {
    guard(|| {
        let d = unsafe { deref(density, "density") }?;
        *unsafe { out_ref(mass, "mass") }? = d.inner.total_mass(n).map_err(invalid)?;
        Ok(())
    })
}

/// Mean (`d` values) and row-major covariance (`d * d` values) of level `n`.
///
/// # Safety
/// `mean` and `cov` must hold `mean_len` and `cov_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_moments(
    density: *const MfsdeDensity,
    n: usize,
    mean: *mut f64,
    mean_len: usize,
    cov: *mut f64,
    cov_len: usize,
) -> MfsdeStatus {
    guard(|| {
        let d = unsafe { deref(density, "density") }?;
        let m = d.inner.density_moments(n).map_err(invalid)?;
        copy_into(&m.mean, unsafe { slice_mut(mean, mean_len, "mean") }?)?;
        copy_into(&m.covariance, unsafe { slice_mut(cov, cov_len, "cov") }?)
    })
}

/// Piecewise-constant density value at time `t` and point `x` (`x_len` = d).
///
/// # Safety
/// `x` must hold `x_len` doubles and `value` be writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_density_eval(density: *const MfsdeDensity, t: f64, x: *const f64, x_len: usize, value: *mut f64) -> MfsdeStatus {
    guard(|| {
        let d = unsafe { deref(density, "density") }?;
        let x = unsafe { slice(x, x_len, "x") }?;
        if x.len() != d.inner.grid().dim() {
            return Err(invalid(format!("x has {} coordinates, density is {}-dimensional", x.len(), d.inner.grid().dim())));
        }
        *unsafe { out_ref(value, "value") }? = d.inner.eval(t, x).map_err(invalid)?;
        Ok(())
    })
}

/// Euler-Maruyama ensemble of `paths` paths with `n_steps` steps. `density`
/// supplies the interaction term and may be null only for problems without one.
///
/// # Safety
/// `problem` must be valid, `density` valid or null, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_ensemble_simulate(
    problem: *const MfsdeProblem,
    density: *const MfsdeDensity,
    mode: MfsdeMode,
    paths: usize,
    n_steps: usize,
    seed: u64,
    out: *mut *mut MfsdeEnsemble,
) -> MfsdeStatus {
    guard(|| {
        let p = &unsafe { deref(problem, "problem") }?.inner;
        let out = unsafe { out_ref(out, "out") }?;
        let opts = EnsembleOptions::new(paths, n_steps, seed).recording(Recording::Final);
        let ens = match unsafe { density.as_ref() } {
            None => simulate_ensemble(p, Interaction::None, &opts).map_err(numerical)?,
            Some(d) => {
                let mode = match mode {
                    MfsdeMode::Interpolate => InteractionMode::Interpolate,
                    MfsdeMode::Exact => InteractionMode::Exact,
                };
                let field = interaction_precompute(&d.inner, p).map_err(invalid)?;
                let coupling = DensityCoupling::new(p, &d.inner, &field, mode).map_err(invalid)?;
                simulate_ensemble(p, Interaction::Density(&coupling), &opts).map_err(numerical)?
            }
        };
        *out = Box::into_raw(Box::new(MfsdeEnsemble { inner: ens }));
        Ok(())
    })
}

/// # Safety
/// `ensemble` must be valid; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_ensemble_shape(ensemble: *const MfsdeEnsemble, paths: *mut usize, dim: *mut usize) -> MfsdeStatus {
    guard(|| {
        let e = unsafe { deref(ensemble, "ensemble") }?;
        *unsafe { out_ref(paths, "paths") }? = e.inner.paths();
        *unsafe { out_ref(dim, "dim") }? = e.inner.dim();
        Ok(())
    })
}

/// Final states, path-major (`paths * dim` values).
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mfsde_ensemble_copy_final(ensemble: *const MfsdeEnsemble, buf: *mut f64, len: usize) -> MfsdeStatus {
    guard(|| {
        let e = unsafe { deref(ensemble, "ensemble") }?;
        copy_into(&e.inner.final_states(), unsafe { slice_mut(buf, len, "buf") }?)
    })
}

/// # Safety
/// `ensemble` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfsde_ensemble_free(ensemble: *mut MfsdeEnsemble) {
    if !ensemble.is_null() {
        drop(unsafe { Box::from_raw(ensemble) });
    }
}

/// RMS endpoint distance between two ensembles driven by the same Brownian paths.
///
/// # Safety
/// Both ensembles must be valid and `error` writable.
#[no_mangle]
pub unsafe extern "C" fn mfsde_strong_error(coarse: *const MfsdeEnsemble, fine: *const MfsdeEnsemble, error: *mut f64) -> MfsdeStatus {
    guard(|| {
        let c = unsafe { deref(coarse, "coarse") }?;
        let f = unsafe { deref(fine, "fine") }?;
        *unsafe { out_ref(error, "error") }? = strong_error(&c.inner, &f.inner).map_err(invalid)?;
        Ok(())
    })
}

/// Observed orders `log2(e[i+1] / e[i])` for errors at doubling resolutions,
/// finest first. Writes `len - 1` values to `orders`.
///
/// # Safety
/// `errors` and `resolutions` must hold `len` doubles, `orders` `len - 1`.
#[no_mangle]
pub unsafe extern "C" fn mfsde_estimate_orders(errors: *const f64, resolutions: *const f64, len: usize, orders: *mut f64) -> MfsdeStatus {
    guard(|| {
        let e = unsafe { slice(errors, len, "errors") }?;
        let r = unsafe { slice(resolutions, len, "resolutions") }?;
        let o = estimate_orders(e, r).map_err(invalid)?;
        copy_into(&o, unsafe { slice_mut(orders, o.len(), "orders") }?)
    })
}
