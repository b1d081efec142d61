//! C ABI over the core toolkit: opaque handles, integer status codes, and a
//! thread-local error message. The header `include/tfk.h` is generated from
//! this file by cbindgen at build time.
//!
//! Conventions, mirrored in the header docs:
//! - Constructors return `NULL` on failure; every other fallible call
//!   returns a [`TfkStatus`]. In both cases [`tfk_last_error`] carries a
//!   message until the next failing call on the same thread.
//! - Handles are freed exactly once with their matching `*_free` function;
//!   `NULL` is accepted and ignored there.
//! - Buffers are caller-allocated; lengths are in elements, not bytes, and
//!   must match the full voxel count of the grid.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tfk_core::conditioning::{assemble, Modality};
use tfk_core::flowmatch::{integrate_forward, load_checkpoint, sample_noise, Integrator, VelocityModel};
use tfk_core::grid::{GridSpec, LabelMask, ScalarField3D, TissueMap};
use tfk_core::growth::{concentration_to_mask, simulate, GrowthParams, SimClock};
use tfk_core::metrics;
use tfk_core::phantom::head_phantom;

/// Result of a fallible call. Anything but `Ok` leaves a message in
/// [`tfk_last_error`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfkStatus {
    Ok = 0,
    /// A required pointer argument was `NULL`.
    NullArgument = 1,
    /// Arguments were structurally valid but semantically rejected.
    InvalidArgument = 2,
    /// A buffer length did not match the grid's voxel count.
    BufferSize = 3,
    /// File could not be read or decoded.
    Io = 4,
    /// Internal invariant violation; report as a bug.
    Internal = 5,
}

/// Per-voxel tissue labels on a 3D grid.
pub struct TfkTissue {
    inner: TissueMap,
}

/// A scalar field (concentration or image) on a 3D grid.
pub struct TfkField {
    inner: ScalarField3D,
}

/// A trained velocity model loaded from a checkpoint.
pub struct TfkModel {
    inner: VelocityModel,
}

/// Growth-model parameters; obtain defaults from
/// [`tfk_growth_params_default`] and override selectively.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TfkGrowthParams {
    /// Proliferation rate, 1/day.
    pub rho: f64,
    /// White-matter diffusivity, mm^2/day.
    pub d_white: f64,
    /// Gray-matter diffusivity as a fraction of `d_white`.
    pub gray_ratio: f64,
    /// Seed center in voxel coordinates.
    pub seed_center: [f64; 3],
    /// Gaussian seed width, mm.
    pub seed_sigma: f64,
    /// Peak seed concentration in [0, 1].
    pub seed_amplitude: f64,
}

impl From<TfkGrowthParams> for GrowthParams {
    fn from(p: TfkGrowthParams) -> GrowthParams {
        GrowthParams {
            rho: p.rho,
            d_white: p.d_white,
            gray_ratio: p.gray_ratio,
            seed_center: p.seed_center,
            seed_sigma: p.seed_sigma,
            seed_amplitude: p.seed_amplitude,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(text).expect("NULs stripped above"));
    });
}

/// Run a fallible body, translating panics into `Internal` instead of
/// unwinding across the C boundary.
fn guarded<T>(on_panic: T, body: impl FnOnce() -> T) -> T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(v) => v,
        Err(_) => {
            set_error("internal panic");
            on_panic
        }
    }
}

fn spec_from_dims(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Option<GridSpec> {
    match GridSpec::new(nx, ny, nz, dx, dy, dz) {
        Ok(spec) => Some(spec),
        Err(e) => {
            set_error(e);
            None
        }
    }
}

/// Library version as a static `MAJOR.MINOR.PATCH` string.
#[no_mangle]
pub extern "C" fn tfk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message from the most recent failure on this thread, or `NULL` if none
/// has occurred. The pointer stays valid until the next failing call on the
/// same thread.
#[no_mangle]
pub extern "C" fn tfk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Build a tissue map from per-voxel codes in x-fastest order:
/// 0 background, 1 CSF, 2 gray matter, 3 white matter. `len` must equal
/// `nx*ny*nz`. Returns `NULL` on failure.
///
/// # Safety
/// `codes` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn tfk_tissue_new(
    nx: usize,
    ny: usize,
    nz: usize,
    dx: f64,
    dy: f64,
    dz: f64,
    codes: *const u8,
    len: usize,
) -> *mut TfkTissue {
    guarded(std::ptr::null_mut(), || {
        if codes.is_null() {
            set_error("codes is NULL");
            return std::ptr::null_mut();
        }
        let Some(spec) = spec_from_dims(nx, ny, nz, dx, dy, dz) else {
            return std::ptr::null_mut();
        };
        if len != spec.n_voxels() {
            set_error(format!("len {} does not match {} voxels", len, spec.n_voxels()));
            return std::ptr::null_mut();
        }
        let codes = std::slice::from_raw_parts(codes, len);
        match TissueMap::from_codes(spec, codes) {
            Ok(map) => Box::into_raw(Box::new(TfkTissue { inner: map })),
            Err(e) => {
                set_error(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Build the synthetic head phantom used by the demo pipeline: an ellipsoid
/// brain with a gray-matter shell and a central CSF ventricle. Returns
/// `NULL` on failure.
#[no_mangle]
pub extern "C" fn tfk_tissue_head_phantom(
    nx: usize,
    ny: usize,
    nz: usize,
    dx: f64,
    dy: f64,
    dz: f64,
) -> *mut TfkTissue {
    guarded(std::ptr::null_mut(), || {
        let Some(spec) = spec_from_dims(nx, ny, nz, dx, dy, dz) else {
            return std::ptr::null_mut();
        };
        match head_phantom(spec) {
            Ok(map) => Box::into_raw(Box::new(TfkTissue { inner: map })),
            Err(e) => {
                set_error(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Free a tissue map. `NULL` is ignored.
///
/// # Safety
/// `tissue` must come from a `tfk_tissue_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tfk_tissue_free(tissue: *mut TfkTissue) {
    if !tissue.is_null() {
        drop(Box::from_raw(tissue));
    }
}

/// Default growth parameters (seed centered at the voxel origin; set
/// `seed_center` before simulating).
#[no_mangle]
pub extern "C" fn tfk_growth_params_default() -> TfkGrowthParams {
    let p = GrowthParams::default();
    TfkGrowthParams {
        rho: p.rho,
        d_white: p.d_white,
        gray_ratio: p.gray_ratio,
        seed_center: p.seed_center,
        seed_sigma: p.seed_sigma,
        seed_amplitude: p.seed_amplitude,
    }
}

/// Run the growth solver and return the concentration field at `t_end`
/// days. `dt` must respect the explicit-scheme stability bound for the
/// largest diffusivity. Returns `NULL` on failure.
///
/// # Safety
/// `tissue` and `params` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tfk_simulate_final(
    tissue: *const TfkTissue,
    params: *const TfkGrowthParams,
    dt: f64,
    t_end: f64,
) -> *mut TfkField {
    guarded(std::ptr::null_mut(), || {
        let (Some(tissue), Some(params)) = (tissue.as_ref(), params.as_ref()) else {
            set_error("tissue or params is NULL");
            return std::ptr::null_mut();
        };
        let clock = SimClock { dt, t_end, snapshot_every: t_end.max(1.0) };
        match simulate(&tissue.inner, &(*params).into(), &clock) {
            Ok(snaps) => {
                let (_, last) = snaps.into_iter().last().expect("simulate returns the seed at least");
                Box::into_raw(Box::new(TfkField { inner: last }))
            }
            Err(e) => {
                set_error(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Grid dimensions of a field.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tfk_field_dims(
    field: *const TfkField,
    nx: *mut usize,
    ny: *mut usize,
    nz: *mut usize,
) -> TfkStatus {
    guarded(TfkStatus::Internal, || {
        let Some(field) = field.as_ref() else {
            set_error("field is NULL");
            return TfkStatus::NullArgument;
        };
        if nx.is_null() || ny.is_null() || nz.is_null() {
            set_error("output pointer is NULL");
            return TfkStatus::NullArgument;
        }
        let spec = field.inner.spec();
        *nx = spec.nx;
        *ny = spec.ny;
        *nz = spec.nz;
        TfkStatus::Ok
    })
}

/// Copy the field values into `out` in x-fastest order. `len` must equal
/// the voxel count reported by [`tfk_field_dims`].
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tfk_field_values(field: *const TfkField, out: *mut f64, len: usize) -> TfkStatus {
    guarded(TfkStatus::Internal, || {
        let Some(field) = field.as_ref() else {
            set_error("field is NULL");
            return TfkStatus::NullArgument;
        };
        if out.is_null() {
            set_error("out is NULL");
            return TfkStatus::NullArgument;
        }
        let data = field.inner.data();
        if len != data.len() {
            set_error(format!("len {} does not match {} voxels", len, data.len()));
            return TfkStatus::BufferSize;
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(data);
        TfkStatus::Ok
    })
}

/// Threshold a concentration field into a 0/1 whole-tumor mask written to
/// `out`. `len` must equal the voxel count.
///
/// # Safety
/// `out` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tfk_field_threshold(
    field: *const TfkField,
    threshold: f64,
    out: *mut u8,
    len: usize,
) -> TfkStatus {
    guarded(TfkStatus::Internal, || {
        let Some(field) = field.as_ref() else {
            set_error("field is NULL");
            return TfkStatus::NullArgument;
        };
        if out.is_null() {
            set_error("out is NULL");
            return TfkStatus::NullArgument;
        }
        if len != field.inner.data().len() {
            set_error(format!("len {} does not match {} voxels", len, field.inner.data().len()));
            return TfkStatus::BufferSize;
        }
        let mask = concentration_to_mask(&field.inner, threshold);
        for (dst, &bit) in std::slice::from_raw_parts_mut(out, len).iter_mut().zip(mask.bits()) {
            *dst = bit as u8;
        }
        TfkStatus::Ok
    })
}

/// Free a field. `NULL` is ignored.
///
/// # Safety
/// `field` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tfk_field_free(field: *mut TfkField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Load a model checkpoint and keep its averaged inference weights.
/// Returns `NULL` on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tfk_model_load(path: *const c_char) -> *mut TfkModel {
    guarded(std::ptr::null_mut(), || {
        if path.is_null() {
            set_error("path is NULL");
            return std::ptr::null_mut();
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            set_error("path is not valid UTF-8");
            return std::ptr::null_mut();
        };
        match load_checkpoint(Path::new(path)) {
            Ok(ckpt) => Box::into_raw(Box::new(TfkModel { inner: ckpt.ema_model })),
            Err(e) => {
                set_error(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Free a model. `NULL` is ignored.
///
/// # Safety
/// `model` must come from [`tfk_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tfk_model_free(model: *mut TfkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Synthesize one image: condition the model on `tissue` plus the tumor
/// concentration `conc`, integrate the flow from seeded noise, and return
/// the image clamped to [0, 1]. `modality` is one of "T1", "T1c", "T2",
/// "FLAIR" (case-insensitive). Returns `NULL` on failure.
///
/// # Safety
/// All pointers must be valid; `modality` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tfk_generate_image(
    model: *const TfkModel,
    tissue: *const TfkTissue,
    conc: *const TfkField,
    modality: *const c_char,
    steps: usize,
    seed: u64,
) -> *mut TfkField {
    guarded(std::ptr::null_mut(), || {
        let (Some(model), Some(tissue), Some(conc)) = (model.as_ref(), tissue.as_ref(), conc.as_ref())
        else {
            set_error("model, tissue, or conc is NULL");
            return std::ptr::null_mut();
        };
        if modality.is_null() {
            set_error("modality is NULL");
            return std::ptr::null_mut();
        }
        let Some(modality) = CStr::from_ptr(modality).to_str().ok().and_then(Modality::parse) else {
            set_error("modality must be one of T1, T1c, T2, FLAIR");
            return std::ptr::null_mut();
        };
        let run = || -> Result<ScalarField3D, String> {
            let cond = assemble(&tissue.inner, &conc.inner, modality).map_err(|e| e.to_string())?;
            let z0 = sample_noise(*tissue.inner.spec(), model.inner.cfg().data_channels, seed, 0)
                .map_err(|e| e.to_string())?;
            let z = integrate_forward(&model.inner, &z0, 0.0, 1.0, steps, &cond, Integrator::Euler)
                .map_err(|e| e.to_string())?;
            let mut img = z.to_field(0);
            img.clamp_in_place(0.0, 1.0);
            Ok(img)
        };
        match run() {
            Ok(img) => Box::into_raw(Box::new(TfkField { inner: img })),
            Err(e) => {
                set_error(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Dice overlap between two 0/1 masks of `len` voxels (nonzero bytes count
/// as inside). Two empty masks score 1.
///
/// # Safety
/// `a` and `b` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfk_dice(a: *const u8, b: *const u8, len: usize, out: *mut f64) -> TfkStatus {
    guarded(TfkStatus::Internal, || {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("a, b, or out is NULL");
            return TfkStatus::NullArgument;
        }
        let Some(spec) = spec_from_dims(len, 1, 1, 1.0, 1.0, 1.0) else {
            return TfkStatus::InvalidArgument;
        };
        let to_mask = |bytes: *const u8| {
            let mut m = LabelMask::new(spec, false).expect("spec already validated");
            for (i, &v) in std::slice::from_raw_parts(bytes, len).iter().enumerate() {
                if v != 0 {
                    m.set(i, 0, 0, true);
                }
            }
            m
        };
        match metrics::dice(&to_mask(a), &to_mask(b)) {
            Ok(v) => {
                *out = v;
                TfkStatus::Ok
            }
            Err(e) => {
                set_error(e);
                TfkStatus::InvalidArgument
            }
        }
    })
}

/// PSNR in dB between two value buffers of `len` voxels, restricted to the
/// nonzero bytes of `mask` (pass `NULL` to use every voxel). Identical
/// inputs report the 99 dB sentinel.
///
/// # Safety
/// `a` and `b` must point to `len` readable doubles; `mask` is `NULL` or
/// `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tfk_psnr(
    a: *const f64,
    b: *const f64,
    mask: *const u8,
    len: usize,
    data_max: f64,
    out: *mut f64,
) -> TfkStatus {
    guarded(TfkStatus::Internal, || {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("a, b, or out is NULL");
            return TfkStatus::NullArgument;
        }
        let Some(spec) = spec_from_dims(len, 1, 1, 1.0, 1.0, 1.0) else {
            return TfkStatus::InvalidArgument;
        };
        let field = |values: *const f64| {
            ScalarField3D::from_vec(spec, std::slice::from_raw_parts(values, len).to_vec())
                .expect("length matches the spec by construction")
        };
        let mut keep = LabelMask::new(spec, true).expect("spec already validated");
        if !mask.is_null() {
            for (i, &v) in std::slice::from_raw_parts(mask, len).iter().enumerate() {
                if v == 0 {
                    keep.set(i, 0, 0, false);
                }
            }
        }
        match metrics::psnr(&field(a), &field(b), &keep, data_max) {
            Ok(v) => {
                *out = v;
                TfkStatus::Ok
            }
            Err(e) => {
                set_error(e);
                TfkStatus::InvalidArgument
            }
        }
    })
}
