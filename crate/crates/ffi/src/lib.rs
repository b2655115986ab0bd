//! C interface to `nebla-core`.
//!
//! Objects are opaque heap handles created by `nebla_*_new`/`_load` and
//! released with the matching `_free`; freeing NULL is a no-op. Every
//! fallible call returns a [`NeblaStatus`]; on failure a message is kept per
//! thread and can be read with [`nebla_last_error`]. Panics never cross the
//! boundary and are reported as `NEBLA_STATUS_PANIC`.
//!
//! Borrowed data pointers (`nebla_volume_data`, `nebla_image_data`) stay
//! valid until the owning handle is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nebla_core::autodiff::ParamStore;
use nebla_core::config::{Preset, RunConfig};
use nebla_core::geometry::RayBundle;
use nebla_core::metrics::{psnr_volume, ssim_volume};
use nebla_core::model::Model;
use nebla_core::optim::{reconstruct, Checkpoint};
use nebla_core::projector::{default_mu_scale, mip, render_px, Image2D, Plane};
use nebla_core::volume::{load_volume, make_phantom, save_volume, PhantomSpec, Volume};
use nebla_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeblaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numerical = 5,
    Io = 6,
    Panic = 7,
}

/// Axis-aligned maximum intensity projection planes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeblaPlane {
    Axial = 0,
    Sagittal = 1,
    Coronal = 2,
}

/// A `(1, h, w, d)` volume of `f32` voxels, `d` fastest.
pub struct NeblaVolume {
    inner: Volume,
}

/// A row-major `f32` image.
pub struct NeblaImage {
    inner: Image2D,
}

/// A model with parameters restored from a checkpoint.
pub struct NeblaModel {
    model: Model,
    params: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NeblaStatus {
    match e {
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::AxisOutOfRange { .. } => NeblaStatus::InvalidArgument,
        Error::Config(_) => NeblaStatus::Config,
        Error::Format { .. } | Error::Degenerate(_) => NeblaStatus::Data,
        Error::Numerical(_) => NeblaStatus::Numerical,
        Error::Io { .. } => NeblaStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NeblaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NeblaStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is NULL"));
            NeblaStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            NeblaStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::InvalidArgument(format!("{what} is not UTF-8"))))?;
    Ok(PathBuf::from(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nebla_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nebla_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Procedural jaw phantom of spatial size `h x w x d`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn nebla_phantom_new(h: usize, w: usize, d: usize, seed: u64, out: *mut *mut NeblaVolume) -> NeblaStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let vol = make_phantom(&PhantomSpec::for_dims([1, h, w, d], seed))?;
        *slot = boxed(NeblaVolume { inner: vol });
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nebla_volume_load(path: *const c_char, out: *mut *mut NeblaVolume) -> NeblaStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let vol = load_volume(&path_arg(path, "path")?)?;
        *slot = boxed(NeblaVolume { inner: vol });
        Ok(())
    })
}

/// # Safety
/// `vol` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nebla_volume_save(vol: *const NeblaVolume, path: *const c_char) -> NeblaStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        save_volume(&v.inner, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Writes `(c, h, w, d)` into `dims[0..4]`.
///
/// # Safety
/// `vol` must be a live handle and `dims` point to four `size_t`.
#[no_mangle]
pub unsafe extern "C" fn nebla_volume_dims(vol: *const NeblaVolume, dims: *mut usize) -> NeblaStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        if dims.is_null() {
            return Err(Fail::Null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 4).copy_from_slice(&v.inner.dims());
        Ok(())
    })
}

/// Voxel data (`c*h*w*d` floats), or NULL for a NULL handle.
///
/// # Safety
/// `vol` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nebla_volume_data(vol: *const NeblaVolume) -> *const f32 {
    vol.as_ref().map_or(ptr::null(), |v| v.inner.data().as_ptr())
}

/// # Safety
/// `vol` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn nebla_volume_free(vol: *mut NeblaVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

fn run_config(path: Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(&p),
        None => Ok(RunConfig::preset(Preset::Desk)),
    }
}

/// Renders the panoramic X-ray of `vol` with the geometry of the run
/// config at `config_path` (NULL selects the desk preset).
///
/// # Safety
/// `vol` must be a live handle, `config_path` NULL or NUL-terminated, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nebla_render_px(vol: *const NeblaVolume, config_path: *const c_char, out: *mut *mut NeblaImage) -> NeblaStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        let slot = self::out(out, "out")?;
        let path = if config_path.is_null() { None } else { Some(path_arg(config_path, "config_path")?) };
        let cfg = run_config(path)?;
        let bundle = RayBundle::build(&cfg.model.trajectory)?;
        let mu = if cfg.render.mu_scale > 0.0 { cfg.render.mu_scale } else { default_mu_scale(&bundle) };
        let px = render_px(&v.inner, &bundle, mu)?;
        *slot = boxed(NeblaImage { inner: px });
        Ok(())
    })
}

/// # Safety
/// `vol` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nebla_mip(vol: *const NeblaVolume, plane: NeblaPlane, out: *mut *mut NeblaImage) -> NeblaStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        let slot = self::out(out, "out")?;
        let plane = match plane {
            NeblaPlane::Axial => Plane::Axial,
            NeblaPlane::Sagittal => Plane::Sagittal,
            NeblaPlane::Coronal => Plane::Coronal,
        };
        *slot = boxed(NeblaImage { inner: mip(&v.inner, plane) });
        Ok(())
    })
}

/// Loads an 8-bit binary PGM.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nebla_image_load_pgm(path: *const c_char, out: *mut *mut NeblaImage) -> NeblaStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = boxed(NeblaImage {
            inner: Image2D::load_pgm(&path_arg(path, "path")?)?,
        });
        Ok(())
    })
}

/// Writes an 8-bit binary PGM, rounding and clamping to `[0, 255]`.
///
/// # Safety
/// `img` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nebla_image_save_pgm(img: *const NeblaImage, path: *const c_char) -> NeblaStatus {
    guard(|| {
        deref(img, "img")?.inner.save_pgm(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be a live handle; `rows` and `cols` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nebla_image_dims(img: *const NeblaImage, rows: *mut usize, cols: *mut usize) -> NeblaStatus {
    guard(|| {
        let [r, c] = deref(img, "img")?.inner.dims();
        *self::out(rows, "rows")? = r;
        *self::out(cols, "cols")? = c;
        Ok(())
    })
}

/// Pixel data (`rows*cols` floats), or NULL for a NULL handle.
///
/// # Safety
/// `img` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nebla_image_data(img: *const NeblaImage) -> *const f32 {
    img.as_ref().map_or(ptr::null(), |i| i.inner.pixels().as_ptr())
}

/// # Safety
/// `img` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn nebla_image_free(img: *mut NeblaImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Loads a checkpoint and rebuilds its model.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nebla_model_load(path: *const c_char, out: *mut *mut NeblaModel) -> NeblaStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let ckpt = Checkpoint::load(&path_arg(path, "path")?)?;
        let mut params = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let model = Model::new(&mut params, &ckpt.model, &mut rng)?;
        ckpt.restore_into(&mut params)?;
        *slot = boxed(NeblaModel { model, params });
        Ok(())
    })
}

/// Expected PX size and output volume dims of a model.
///
/// # Safety
/// `model` must be a live handle, `image` point to two and `volume` to four
/// `size_t`.
#[no_mangle]
pub unsafe extern "C" fn nebla_model_dims(model: *const NeblaModel, image: *mut usize, volume: *mut usize) -> NeblaStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if image.is_null() {
            return Err(Fail::Null("image"));
        }
        if volume.is_null() {
            return Err(Fail::Null("volume"));
        }
        std::slice::from_raw_parts_mut(image, 2).copy_from_slice(&m.model.cfg.image());
        std::slice::from_raw_parts_mut(volume, 4).copy_from_slice(&m.model.cfg.volume);
        Ok(())
    })
}

/// Coarse field output and refined volume for one PX image. Either output
/// pointer may be NULL to skip it.
///
/// # Safety
/// `model` and `px` must be live handles; non-NULL outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nebla_reconstruct(
    model: *const NeblaModel,
    px: *const NeblaImage,
    coarse: *mut *mut NeblaVolume,
    refined: *mut *mut NeblaVolume,
) -> NeblaStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let img = deref(px, "px")?;
        let (c, r) = reconstruct(&m.model, &m.params, &img.inner)?;
        if let Some(slot) = coarse.as_mut() {
            *slot = boxed(NeblaVolume { inner: c });
        }
        if let Some(slot) = refined.as_mut() {
            *slot = boxed(NeblaVolume { inner: r });
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn nebla_model_free(model: *mut NeblaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// PSNR in dB over a 255 range; `+inf` for identical volumes.
///
/// # Safety
/// `a`, `b` must be live handles and `db` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nebla_psnr(a: *const NeblaVolume, b: *const NeblaVolume, db: *mut f64) -> NeblaStatus {
    guard(|| {
        let v = psnr_volume(&deref(a, "a")?.inner, &deref(b, "b")?.inner)?;
        *out(db, "db")? = v;
        Ok(())
    })
}

/// Mean SSIM over axial slices, in `[-1, 1]`.
///
/// # Safety
/// `a`, `b` must be live handles and `ssim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nebla_ssim(a: *const NeblaVolume, b: *const NeblaVolume, ssim: *mut f64) -> NeblaStatus {
    guard(|| {
        let v = ssim_volume(&deref(a, "a")?.inner, &deref(b, "b")?.inner)?;
        *out(ssim, "ssim")? = v;
        Ok(())
    })
}
