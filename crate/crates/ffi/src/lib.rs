//! C interface to `recal3d-core`.
//!
//! Every fallible function returns a [`Recal3dStatus`]; on failure the
//! message is kept per thread and read with [`recal3d_last_error`]. Objects
//! cross the boundary as opaque handles that the caller releases with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use recal3d_core::blocks::{BlockConfig, BlockKind};
use recal3d_core::labels::LabelVolume;
use recal3d_core::metrics::{surface_dice, volumetric_dice};
use recal3d_core::segnet::{load_weights, save_weights, NetConfig, SegNet};
use recal3d_core::synth::{generate, Phantom, PhantomSpec};
use recal3d_core::{Error, Rng, Shape, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recal3dStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidConfig = 2,
    Shape = 3,
    Format = 4,
    Incompatible = 5,
    Io = 6,
    Generation = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recal3dBlockKind {
    Cse = 0,
    Sse = 1,
    Scse = 2,
    Cbam = 3,
    Pe = 4,
}

impl From<Recal3dBlockKind> for BlockKind {
    fn from(k: Recal3dBlockKind) -> Self {
        match k {
            Recal3dBlockKind::Cse => BlockKind::Cse,
            Recal3dBlockKind::Sse => BlockKind::Sse,
            Recal3dBlockKind::Scse => BlockKind::Scse,
            Recal3dBlockKind::Cbam => BlockKind::Cbam,
            Recal3dBlockKind::Pe => BlockKind::Pe,
        }
    }
}

/// Segmentation network handle.
pub struct Recal3dNet(SegNet);

/// Synthetic phantom handle.
pub struct Recal3dPhantom(Phantom);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> Recal3dStatus {
    match e {
        Error::Config(_) | Error::Json(_) => Recal3dStatus::InvalidConfig,
        Error::Shape(_) | Error::Size { .. } | Error::UnsupportedKernel(_) | Error::Contract(_) => Recal3dStatus::Shape,
        Error::Format { .. } => Recal3dStatus::Format,
        Error::Compatibility => Recal3dStatus::Incompatible,
        Error::Io(_) => Recal3dStatus::Io,
        Error::Generation { .. } => Recal3dStatus::Generation,
        Error::NonFinite { .. } => Recal3dStatus::NonFinite,
        Error::GradCheck { .. } => Recal3dStatus::Internal,
    }
}

struct Fail(Recal3dStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(Recal3dStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Recal3dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Recal3dStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Recal3dStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(Recal3dStatus::InvalidConfig, format!("{what} is not UTF-8")))
}

unsafe fn net_config(json: *const c_char) -> Result<NetConfig, Fail> {
    if json.is_null() {
        return Ok(NetConfig::default());
    }
    let cfg: NetConfig = serde_json::from_str(str_arg(json, "config")?).map_err(Error::from)?;
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn labels_arg(data: *const u8, h: usize, w: usize, d: usize, what: &str) -> Result<LabelVolume, Fail> {
    if data.is_null() {
        return Err(null(what));
    }
    let n = h.checked_mul(w).and_then(|x| x.checked_mul(d)).ok_or_else(|| Fail(Recal3dStatus::Shape, "extent overflow".into()))?;
    Ok(LabelVolume::new(h, w, d, std::slice::from_raw_parts(data, n).to_vec())?)
}

unsafe fn out_slice<'a, T>(buf: *mut T, len: usize, need: usize) -> Result<&'a mut [T], Fail> {
    if buf.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail(Recal3dStatus::BufferTooSmall, format!("buffer holds {len} values, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(buf, need))
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn recal3d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn recal3d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialised network. `config_json` may be null for the
/// default network.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn recal3d_net_new(config_json: *const c_char, seed: u64, out: *mut *mut Recal3dNet) -> Recal3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = SegNet::build(net_config(config_json)?, &mut Rng::new(seed))?;
        *out = Box::into_raw(Box::new(Recal3dNet(net)));
        Ok(())
    })
}

/// Loads a weights file written for the network described by `config_json`
/// (null for the default network).
///
/// # Safety
/// `path` and `config_json` as for [`recal3d_net_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn recal3d_net_load(
    path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut Recal3dNet,
) -> Recal3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let net = load_weights(path, &net_config(config_json)?)?;
        *out = Box::into_raw(Box::new(Recal3dNet(net)));
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn recal3d_net_save(net: *const Recal3dNet, path: *const c_char) -> Recal3dStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        save_weights(&net.0, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `net` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn recal3d_net_param_count(net: *const Recal3dNet, out: *mut u64) -> Recal3dStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = net.0.params().scalar_count() as u64;
        Ok(())
    })
}

/// Segments one single-channel volume of `h·w·d` values (row-major, `d`
/// fastest) into `labels`, which must hold at least `h·w·d` bytes.
///
/// # Safety
/// `net` must be live; `volume` must point to `h·w·d` doubles and `labels`
/// to `labels_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn recal3d_net_segment(
    net: *const Recal3dNet,
    volume: *const f64,
    h: usize,
    w: usize,
    d: usize,
    labels: *mut u8,
    labels_len: usize,
) -> Recal3dStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if volume.is_null() {
            return Err(null("volume"));
        }
        let shape = Shape::new(1, h, w, d)?;
        let out = out_slice(labels, labels_len, shape.numel())?;
        let x = Tensor::from_data(shape, std::slice::from_raw_parts(volume, shape.numel()).to_vec())?;
        let seg = LabelVolume::argmax(&net.0.predict(&x)?)?;
        out.copy_from_slice(seg.data());
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn recal3d_net_free(net: *mut Recal3dNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Generates a phantom. `spec_json` may be null for the default spec.
///
/// # Safety
/// `spec_json` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn recal3d_phantom_generate(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut Recal3dPhantom,
) -> Recal3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec: PhantomSpec = if spec_json.is_null() {
            PhantomSpec::default()
        } else {
            serde_json::from_str(str_arg(spec_json, "spec")?).map_err(Error::from)?
        };
        *out = Box::into_raw(Box::new(Recal3dPhantom(generate(&spec, seed)?)));
        Ok(())
    })
}

/// Writes the extents `[h, w, d]` to `extents`.
///
/// # Safety
/// `phantom` must be live; `extents` must point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn recal3d_phantom_extents(phantom: *const Recal3dPhantom, extents: *mut usize) -> Recal3dStatus {
    guard(|| {
        let p = phantom.as_ref().ok_or_else(|| null("phantom"))?;
        out_slice(extents, 3, 3)?.copy_from_slice(&p.0.labels.extents());
        Ok(())
    })
}

/// # Safety
/// `phantom` must be live; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn recal3d_phantom_intensity(phantom: *const Recal3dPhantom, buf: *mut f64, len: usize) -> Recal3dStatus {
    guard(|| {
        let p = phantom.as_ref().ok_or_else(|| null("phantom"))?;
        let data = p.0.intensity.data();
        out_slice(buf, len, data.len())?.copy_from_slice(data);
        Ok(())
    })
}

/// # Safety
/// `phantom` must be live; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn recal3d_phantom_labels(phantom: *const Recal3dPhantom, buf: *mut u8, len: usize) -> Recal3dStatus {
    guard(|| {
        let p = phantom.as_ref().ok_or_else(|| null("phantom"))?;
        let data = p.0.labels.data();
        out_slice(buf, len, data.len())?.copy_from_slice(data);
        Ok(())
    })
}

/// # Safety
/// `phantom` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn recal3d_phantom_free(phantom: *mut Recal3dPhantom) {
    if !phantom.is_null() {
        drop(Box::from_raw(phantom));
    }
}

/// Volumetric Dice of `class` between two label volumes of `h·w·d` bytes.
///
/// # Safety
/// `pred` and `truth` must each point to `h·w·d` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn recal3d_volumetric_dice(
    pred: *const u8,
    truth: *const u8,
    h: usize,
    w: usize,
    d: usize,
    class: usize,
    out: *mut f64,
) -> Recal3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = volumetric_dice(&labels_arg(pred, h, w, d, "pred")?, &labels_arg(truth, h, w, d, "truth")?, class)?;
        Ok(())
    })
}

/// Surface Dice of `class` at `tolerance` with unit voxel spacing.
///
/// # Safety
/// As for [`recal3d_volumetric_dice`].
#[no_mangle]
pub unsafe extern "C" fn recal3d_surface_dice(
    pred: *const u8,
    truth: *const u8,
    h: usize,
    w: usize,
    d: usize,
    class: usize,
    tolerance: f64,
    out: *mut f64,
) -> Recal3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let pred = labels_arg(pred, h, w, d, "pred")?;
        let truth = labels_arg(truth, h, w, d, "truth")?;
        *out = surface_dice(&pred, &truth, class, tolerance, [1.0; 3])?;
        Ok(())
    })
}

/// Learned parameters of one block on `channels` channels. `reduction` 0
/// picks the kind's default.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn recal3d_block_param_count(
    kind: Recal3dBlockKind,
    channels: usize,
    reduction: usize,
    out: *mut u64,
) -> Recal3dStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = BlockConfig::new(kind.into(), channels);
        if reduction > 0 {
            cfg = cfg.with_reduction(reduction);
        }
        cfg.validate()?;
        *out = cfg.param_count() as u64;
        Ok(())
    })
}
