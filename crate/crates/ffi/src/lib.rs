//! C ABI over the matting library.
//!
//! Images are channel-planar `f64` arrays (`3 * height * width`, all red values
//! first) with values in `[0, 1]`; mattes are `height * width` arrays and masks
//! are `uint8_t` arrays holding 0 or 1. Every fallible call returns a
//! [`WsshmStatus`]; after a failure [`wsshm_last_error`] describes it.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use wsshm::labels::{self, AlphaMatte, BoundaryMask, RgbImage, SegMask};
use wsshm::metrics::{image_metrics, rgb_to_tensor};
use wsshm::network::{load_checkpoint, save_checkpoint, Mode, Network, NetworkConfig};
use wsshm::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WsshmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque network handle.
pub struct WsshmNetwork {
    net: Network<f32>,
}

/// Per-image metrics; boundary fields are meaningful only when `has_boundary` is 1.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WsshmMetrics {
    pub mse_whole: f64,
    pub sad_whole: f64,
    pub mse_boundary: f64,
    pub sad_boundary: f64,
    pub has_boundary: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WsshmStatus {
    match e {
        Error::InvalidInput(_) | Error::EmptyDataset(_) | Error::Manifest(_) | Error::OutputExists(_) => WsshmStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => WsshmStatus::DimensionMismatch,
        Error::Io(_) | Error::Image { .. } | Error::Csv(_) | Error::Json(_) => WsshmStatus::Io,
        Error::Checkpoint(_) => WsshmStatus::Checkpoint,
        Error::Config { .. } => WsshmStatus::Config,
        Error::Stage { source, .. } => status_of(source),
        _ => WsshmStatus::Internal,
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

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> WsshmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WsshmStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            WsshmStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            WsshmStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    nonnull(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::invalid(format!("`{what}` is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn check_size(height: usize, width: usize) -> Result<usize, Failure> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("image dimensions must be positive").into());
    }
    height
        .checked_mul(width)
        .filter(|n| n.checked_mul(3).is_some())
        .ok_or_else(|| Error::invalid("image dimensions overflow").into())
}

/// Message for the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn wsshm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wsshm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a randomly initialised network. `preset` is "r101", "r18" or "r18_half";
/// `base_width` 0 keeps the preset width.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wsshm_network_new(preset: *const c_char, base_width: usize, seed: u64, out: *mut *mut WsshmNetwork) -> WsshmStatus {
    guard(|| {
        nonnull(out, "out")?;
        let name = path_arg(preset, "preset")?;
        let mut cfg = match name.to_str() {
            Some("r101") => NetworkConfig::r101(),
            Some("r18") => NetworkConfig::r18(),
            Some("r18_half") => NetworkConfig::r18_half(),
            _ => return Err(Error::invalid(format!("unknown preset {}", name.display())).into()),
        };
        if base_width != 0 {
            cfg = cfg.with_base_width(base_width);
        }
        let net = Network::build(&cfg, seed)?;
        *out = Box::into_raw(Box::new(WsshmNetwork { net }));
        Ok(())
    })
}

/// Loads a checkpoint written by the trainer or [`wsshm_network_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wsshm_network_load(path: *const c_char, out: *mut *mut WsshmNetwork) -> WsshmStatus {
    guard(|| {
        nonnull(out, "out")?;
        let path = path_arg(path, "path")?;
        let (mut net, _) = load_checkpoint::<f32>(&path)?;
        net.set_mode(Mode::Eval);
        *out = Box::into_raw(Box::new(WsshmNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wsshm_network_save(net: *const WsshmNetwork, path: *const c_char) -> WsshmStatus {
    guard(|| {
        nonnull(net, "net")?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&path, &(*net).net, "external", 0)?;
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wsshm_network_free(net: *mut WsshmNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `net` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wsshm_network_parameter_count(net: *const WsshmNetwork, out: *mut usize) -> WsshmStatus {
    guard(|| {
        nonnull(net, "net")?;
        nonnull(out, "out")?;
        *out = (*net).net.parameter_count();
        Ok(())
    })
}

/// Eval-mode forward pass at the input resolution. Either output may be NULL.
///
/// # Safety
/// `rgb` must hold `3*height*width` values; non-NULL outputs `height*width`.
#[no_mangle]
pub unsafe extern "C" fn wsshm_network_predict(
    net: *const WsshmNetwork,
    rgb: *const f64,
    height: usize,
    width: usize,
    out_matte: *mut f64,
    out_boundary: *mut f64,
) -> WsshmStatus {
    guard(|| {
        nonnull(net, "net")?;
        let n = check_size(height, width)?;
        let img = RgbImage::new(height, width, slice(rgb, 3 * n, "rgb")?.to_vec())?;
        let pred = (*net).net.forward_with_mode(&rgb_to_tensor(&img), Mode::Eval)?;
        for (dst, src) in [(out_matte, &pred.matte), (out_boundary, &pred.boundary)] {
            if !dst.is_null() {
                let d = slice_mut(dst, n, "out")?;
                for (o, &v) in d.iter_mut().zip(src.plane(0, 0)) {
                    *o = f64::from(v);
                }
            }
        }
        Ok(())
    })
}

/// `out = matte * fg + (1 - matte) * bg`.
///
/// # Safety
/// Image pointers must hold `3*height*width` values, `matte` `height*width`.
#[no_mangle]
pub unsafe extern "C" fn wsshm_composite(
    fg: *const f64,
    bg: *const f64,
    matte: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> WsshmStatus {
    guard(|| {
        let n = check_size(height, width)?;
        let fg = RgbImage::new(height, width, slice(fg, 3 * n, "fg")?.to_vec())?;
        let bg = RgbImage::new(height, width, slice(bg, 3 * n, "bg")?.to_vec())?;
        let m = AlphaMatte::new(height, width, slice(matte, n, "matte")?.to_vec())?;
        let img = labels::composite(&fg, &bg, &m)?;
        slice_mut(out, 3 * n, "out")?.copy_from_slice(img.values());
        Ok(())
    })
}

/// Marks pixels whose opacity lies strictly between 0.05 and 0.95.
///
/// # Safety
/// `matte` and `out_mask` must hold `height*width` elements.
#[no_mangle]
pub unsafe extern "C" fn wsshm_extract_boundary(matte: *const f64, height: usize, width: usize, out_mask: *mut u8) -> WsshmStatus {
    guard(|| {
        let n = check_size(height, width)?;
        let m = AlphaMatte::new(height, width, slice(matte, n, "matte")?.to_vec())?;
        slice_mut(out_mask, n, "out_mask")?.copy_from_slice(labels::extract_boundary(&m).values());
        Ok(())
    })
}

/// Label blending: the pseudo matte where `boundary` is 1, the segmentation label elsewhere.
///
/// # Safety
/// Every pointer must hold `height*width` elements.
#[no_mangle]
pub unsafe extern "C" fn wsshm_blend_matte(
    pseudo_matte: *const f64,
    boundary: *const u8,
    seg: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> WsshmStatus {
    guard(|| {
        let n = check_size(height, width)?;
        let m = AlphaMatte::new(height, width, slice(pseudo_matte, n, "pseudo_matte")?.to_vec())?;
        let b = BoundaryMask::new(height, width, slice(boundary, n, "boundary")?.to_vec())?;
        let s = SegMask::new(height, width, slice(seg, n, "seg")?.to_vec())?;
        let blended = labels::blend_matte(&m, &b, &s)?;
        slice_mut(out, n, "out")?.copy_from_slice(blended.values());
        Ok(())
    })
}

/// Whole and boundary-region MSE (x1e3) and SAD (/1e3) of `pred` against `gt`.
///
/// # Safety
/// `pred` and `gt` must hold `height*width` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wsshm_image_metrics(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    out: *mut WsshmMetrics,
) -> WsshmStatus {
    guard(|| {
        nonnull(out, "out")?;
        let n = check_size(height, width)?;
        let p = AlphaMatte::new(height, width, slice(pred, n, "pred")?.to_vec())?;
        let g = AlphaMatte::new(height, width, slice(gt, n, "gt")?.to_vec())?;
        let m = image_metrics(&p, &g)?;
        *out = WsshmMetrics {
            mse_whole: m.mse_whole,
            sad_whole: m.sad_whole,
            mse_boundary: m.mse_boundary.unwrap_or(0.0),
            sad_boundary: m.sad_boundary.unwrap_or(0.0),
            has_boundary: u8::from(m.mse_boundary.is_some()),
        };
        Ok(())
    })
}
