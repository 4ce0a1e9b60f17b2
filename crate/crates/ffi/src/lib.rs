//! C ABI over `patchseg`.
//!
//! Volumes and networks are opaque heap handles owned by the caller and
//! released with the matching `_free` function. Every fallible call returns a
//! [`PsegStatus`]; on failure the message is available from
//! [`pseg_last_error`] on the same thread until the next failing call.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use patchseg::{ClassSet, Error, PatchDnn, RoiMask, Volume3D};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsegStatus {
    Ok = 0,
    NullArgument = 1,
    Io = 2,
    Format = 3,
    Dims = 4,
    Divergence = 5,
    Invalid = 6,
    Panic = 7,
}

/// Opaque 3D volume.
pub struct PsegVolume(Volume3D);

/// Opaque trained network.
pub struct PsegNetwork(PatchDnn<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn remember(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn status_of(e: &Error) -> PsegStatus {
    match e.category() {
        "io" => PsegStatus::Io,
        "format" => PsegStatus::Format,
        "dims" => PsegStatus::Dims,
        "divergence" => PsegStatus::Divergence,
        _ => PsegStatus::Invalid,
    }
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

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsegStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            remember(&format!("null argument: {what}"));
            PsegStatus::NullArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            remember(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            remember("internal panic");
            PsegStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidConfig(format!("{what} is not UTF-8"))))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Message of the last failure on this thread, or an empty string. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn pseg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a raw-grid or NIfTI-1 volume into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pseg_volume_load(path: *const c_char, out: *mut *mut PsegVolume) -> PsegStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let v = patchseg::load_volume(path)?;
        *out = Box::into_raw(Box::new(PsegVolume(v)));
        Ok(())
    })
}

/// Writes `volume` in the raw-grid format.
///
/// # Safety
/// `volume` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pseg_volume_save(volume: *const PsegVolume, path: *const c_char) -> PsegStatus {
    guard(|| {
        let v = handle(volume, "volume")?;
        let path = path_arg(path, "path")?;
        patchseg::save_volume(&v.0, path)?;
        Ok(())
    })
}

/// Releases a volume. Null is ignored.
///
/// # Safety
/// `volume` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pseg_volume_free(volume: *mut PsegVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Grid size `[nx, ny, nz]` of `volume`, written to `dims[0..3]`.
///
/// # Safety
/// `volume` must come from this library; `dims` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn pseg_volume_dims(volume: *const PsegVolume, dims: *mut u32) -> PsegStatus {
    guard(|| {
        let v = handle(volume, "volume")?;
        if dims.is_null() {
            return Err(Failure::Null("dims"));
        }
        for (k, d) in v.0.dims().into_iter().enumerate() {
            *dims.add(k) = d as u32;
        }
        Ok(())
    })
}

/// 1 for label volumes, 0 for intensity volumes, -1 for a null handle.
///
/// # Safety
/// `volume` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn pseg_volume_is_label(volume: *const PsegVolume) -> i32 {
    match volume.as_ref() {
        None => -1,
        Some(v) => i32::from(v.0.kind() == patchseg::VolumeKind::Label),
    }
}

/// Loads a network checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pseg_network_load(path: *const c_char, out: *mut *mut PsegNetwork) -> PsegStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let net = patchseg::load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(PsegNetwork(net)));
        Ok(())
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `network` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pseg_network_free(network: *mut PsegNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Patch side of `network`, or 0 for a null handle.
///
/// # Safety
/// `network` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn pseg_network_patch(network: *const PsegNetwork) -> u32 {
    network.as_ref().map_or(0, |n| n.0.patch() as u32)
}

/// Segments `image` inside `mask` (nonzero voxels) and stores a new label
/// volume in `*out`. `block` voxels are classified per matrix product; 0
/// selects the default.
///
/// # Safety
/// Handles must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pseg_segment(
    network: *const PsegNetwork,
    image: *const PsegVolume,
    mask: *const PsegVolume,
    block: usize,
    out: *mut *mut PsegVolume,
) -> PsegStatus {
    guard(|| {
        let net = handle(network, "network")?;
        let image = handle(image, "image")?;
        let mask = handle(mask, "mask")?;
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let roi = RoiMask::from_volume(&mask.0);
        let block = if block == 0 { patchseg::inference::DEFAULT_BLOCK } else { block };
        let r = patchseg::segment_batched(&net.0, &image.0, &roi, block)?;
        *out = Box::into_raw(Box::new(PsegVolume(r.labels)));
        Ok(())
    })
}

/// Pooled-foreground Dice of two label volumes, written to `*out`.
///
/// # Safety
/// Handles must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pseg_dice(a: *const PsegVolume, b: *const PsegVolume, out: *mut f64) -> PsegStatus {
    guard(|| {
        let a = handle(a, "a")?;
        let b = handle(b, "b")?;
        let out = out_ptr(out, "out")?;
        *out = patchseg::dice(&a.0, &b.0, &ClassSet::Foreground)?;
        Ok(())
    })
}
